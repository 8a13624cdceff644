import base64
import struct
import time

import numpy as np
import pytest
from starlette.testclient import TestClient

from splatstyle import cli, scene, service, stylefield, trainer
from splatstyle.imageio import load_png, to_uint8

from fixture_styles import style_paths


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    scene_ply = root / "scene.ply"
    bundle = scene.make_synthetic_scene("spheres", 600, 4, seed=6,
                                        width=64, height=48)
    scene.save_bundle(bundle, scene_ply)
    styles = [(p.name, load_png(p)) for p in style_paths()[:4]]
    cfg = trainer.TrainConfig(iterations=150, seed=0, lr=2e-3)
    result = trainer.train(cfg, scene=bundle, styles=styles)
    field_path = root / "field.bin"
    stylefield.save_field(result.field, field_path)
    style_dir = style_paths()[0].parent
    snapshot = service.build_snapshot(scene_ply, field_path, style_dir)
    app = service.create_app(snapshot)
    return {"app": app, "snapshot": snapshot, "scene": scene_ply,
            "field": field_path, "style_dir": style_dir,
            "camera": bundle.cameras[1]}


def request_msg(camera, frame_id=1, weights=(1.0, 0.0, 0.0, 0.0), res=None):
    cam = camera.to_json()
    return {"frame_id": frame_id, "camera": cam,
            "weights": list(weights),
            "res": list(res or (camera.width, camera.height))}


def read_frame(ws):
    payload = ws.receive_bytes()
    frame_id, w, h = struct.unpack("<QII", payload[:16])
    pixels = np.frombuffer(payload[16:], dtype=np.uint8).reshape(h, w, 3)
    telemetry = ws.receive_json()
    return frame_id, pixels, telemetry


class TestHttp:
    def test_healthz(self, served):
        with TestClient(served["app"]) as client:
            r = client.get("/healthz")
            assert r.status_code == 200

    def test_info_metadata(self, served):
        with TestClient(served["app"]) as client:
            info = client.get("/info").json()
        assert info["n_gaussians"] == 600
        assert info["latent_dim"] == 48
        assert len(info["styles"]) == 4
        blob = base64.b64decode(info["styles"][0])
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"


class TestStream:
    def test_corner_weights_match_cli_render(self, served, tmp_path):
        # weights (1,0,0,0) must be bit-identical to the offline render
        png = tmp_path / "cli.png"
        rc = cli.main(["render", "--scene", str(served["scene"]),
                       "--field", str(served["field"]),
                       "--style", str(style_paths()[0]), "--cam", "1",
                       "--out", str(png)])
        assert rc == 0
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(request_msg(served["camera"], frame_id=1))
                frame_id, pixels, telemetry = read_frame(ws)
        assert frame_id == 1
        assert telemetry["frame_id"] == 1
        cli_pixels = (load_png(png) * 255.0).round().astype(np.uint8)
        np.testing.assert_array_equal(pixels, cli_pixels)

    def test_two_sessions_identical(self, served):
        msg = request_msg(served["camera"], frame_id=3,
                          weights=(0.25, 0.25, 0.25, 0.25))
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(msg)
                _, a, _ = read_frame(ws)
            with client.websocket_connect("/stream") as ws:
                ws.send_json(msg)
                _, b, _ = read_frame(ws)
        np.testing.assert_array_equal(a, b)

    def test_malformed_message_keeps_session(self, served):
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_text("{not json")
                err = ws.receive_json()
                assert "error" in err
                ws.send_json(request_msg(served["camera"], frame_id=9))
                frame_id, _, _ = read_frame(ws)
                assert frame_id == 9

    def test_bad_weights_rejected(self, served):
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(request_msg(served["camera"], weights=(0.9, 0, 0, 0)))
                assert "error" in ws.receive_json()
                ws.send_json(request_msg(served["camera"],
                                         weights=(-0.1, 0.6, 0.3, 0.2)))
                assert "error" in ws.receive_json()

    def test_oversized_resolution_rejected(self, served):
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(request_msg(served["camera"], res=(4000, 4000)))
                assert "error" in ws.receive_json()

    def test_weights_renormalized_within_tolerance(self, served):
        base = request_msg(served["camera"], frame_id=1)
        tweaked = request_msg(served["camera"], frame_id=2,
                              weights=(1.0005, 0.0, 0.0, 0.0))
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(base)
                _, a, _ = read_frame(ws)
                ws.send_json(tweaked)
                _, b, _ = read_frame(ws)
        np.testing.assert_array_equal(a, b)

    def test_burst_coalescing(self, served):
        # 100 rapid-fire requests: replies strictly increasing, gaps allowed
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                for fid in range(1, 101):
                    ws.send_json(request_msg(served["camera"], frame_id=fid))
                seen = []
                while True:
                    fid, _, _ = read_frame(ws)
                    seen.append(fid)
                    if fid == 100:
                        break
        assert seen == sorted(seen)
        assert len(set(seen)) == len(seen)
        assert seen[-1] == 100

    def test_stale_frame_ids_dropped(self, served):
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(request_msg(served["camera"], frame_id=5))
                fid, _, _ = read_frame(ws)
                assert fid == 5
                ws.send_json(request_msg(served["camera"], frame_id=3))  # stale
                ws.send_json(request_msg(served["camera"], frame_id=7))
                fid, _, _ = read_frame(ws)
                assert fid == 7

    def test_telemetry_tracks_wall_clock(self, served):
        # sum of reported render times within 10% of client wall-clock
        n = 30
        with TestClient(served["app"]) as client:
            with client.websocket_connect("/stream") as ws:
                ws.send_json(request_msg(served["camera"], frame_id=1))
                read_frame(ws)  # warm caches and jit
                start = time.perf_counter()
                total_us = 0
                for fid in range(2, n + 2):
                    ws.send_json(request_msg(served["camera"], frame_id=fid))
                    _, _, telemetry = read_frame(ws)
                    total_us += telemetry["render_us"]
                wall = time.perf_counter() - start
        assert total_us / 1e6 <= wall
        assert total_us / 1e6 >= 0.5 * wall  # transport overhead stays modest


class TestSnapshotCache:
    def test_lru_eviction_keeps_results_correct(self, served, rng):
        snap = served["snapshot"]
        first = snap.colors_for_weights(np.array([1.0, 0.0, 0.0, 0.0]))
        for _ in range(20):
            w = rng.uniform(0.1, 1.0, 4)
            snap.colors_for_weights(w / w.sum())
        again = snap.colors_for_weights(np.array([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_array_equal(first, again)

    def test_build_snapshot_needs_four_styles(self, served, tmp_path):
        from splatstyle.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            service.build_snapshot(served["scene"], served["field"], tmp_path)
