import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_styles import FIXTURE_DIR, N_STYLES, make_style, style_paths  # noqa: E402


@pytest.fixture(scope="session", autouse=True)
def _style_fixture_files():
    """Regenerate the committed style PNGs if a fresh checkout lost them."""
    if not all(p.exists() for p in style_paths()):
        from splatstyle.imageio import save_png

        FIXTURE_DIR.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(style_paths()):
            save_png(make_style(i), p)
    return style_paths()


@pytest.fixture(scope="session")
def style_images(_style_fixture_files):
    from splatstyle.imageio import load_png

    return [load_png(p) for p in _style_fixture_files]


@pytest.fixture(scope="session")
def small_scene():
    from splatstyle.scene import make_synthetic_scene

    return make_synthetic_scene("spheres", 400, 4, seed=11, width=64, height=48)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
