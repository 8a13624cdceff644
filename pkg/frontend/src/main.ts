// DOM wiring: canvas display, orbit drag, style pad, FPS/telemetry readout.

import { StreamClient, ViewRequest } from "./client.js";
import { OrbitState, clampElevation, orbitToCamera } from "./camera.js";
import { ServiceInfo, rgbToRgba } from "./protocol.js";
import { padWeights } from "./weights.js";

const RESOLUTIONS: [number, number][] = [
  [256, 256],
  [384, 384],
  [512, 512],
];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function start(): Promise<void> {
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d")!;
  const pad = el<HTMLCanvasElement>("pad");
  const padCtx = pad.getContext("2d")!;
  const fpsLabel = el<HTMLSpanElement>("fps");
  const banner = el<HTMLDivElement>("banner");
  const resSelect = el<HTMLSelectElement>("res");

  const base = location.host || "127.0.0.1:8642";
  const info: ServiceInfo = await (await fetch(`http://${base}/info`)).json();

  const thumbs = info.styles.map((b64) => {
    const img = new Image();
    img.src = `data:image/png;base64,${b64}`;
    return img;
  });

  const orbit: OrbitState = {
    azimuthDeg: 0,
    elevationDeg: 10,
    radius: 2.4,
    target: [0, 0, 0],
  };
  let padPos = { x: 0.5, y: 0.5 };
  let resolution = RESOLUTIONS[0];
  let lastImage: ImageData | null = null;

  const client = new StreamClient(`ws://${base}/stream`, {
    onFrame: (frame) => {
      // double-buffered: build the full ImageData before presenting
      const image = new ImageData(frame.width, frame.height);
      rgbToRgba(frame.pixels, image.data);
      lastImage = image;
      canvas.width = frame.width;
      canvas.height = frame.height;
      ctx.putImageData(lastImage, 0, 0);
      fpsLabel.textContent = `${client.fps().toFixed(1)} fps`;
    },
    onTelemetry: (t) => {
      el<HTMLSpanElement>("renderus").textContent = `${t.render_us} us`;
    },
    onStatus: (connected) => {
      banner.style.display = connected ? "none" : "block";
      if (connected) push();
    },
    onError: (message) => console.warn("service error:", message),
  });

  function currentView(): ViewRequest {
    return {
      camera: orbitToCamera(orbit, resolution[0], resolution[1]),
      weights: padWeights(padPos.x, padPos.y),
      res: resolution,
    };
  }

  function drawPad(): void {
    const s = pad.width;
    padCtx.clearRect(0, 0, s, s);
    const corners = [
      [0, 0],
      [1, 0],
      [0, 1],
      [1, 1],
    ];
    thumbs.forEach((img, i) => {
      const [cx, cy] = corners[i];
      padCtx.drawImage(img, cx * (s - 48), cy * (s - 48), 48, 48);
    });
    padCtx.fillStyle = "#ff5533";
    padCtx.beginPath();
    padCtx.arc(padPos.x * s, padPos.y * s, 6, 0, 2 * Math.PI);
    padCtx.fill();
  }

  function push(): void {
    client.requestView(currentView());
    drawPad();
  }

  let dragging: "orbit" | "pad" | null = null;
  let last = { x: 0, y: 0 };

  canvas.addEventListener("pointerdown", (ev) => {
    dragging = "orbit";
    last = { x: ev.clientX, y: ev.clientY };
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (dragging !== "orbit") return;
    orbit.azimuthDeg += (ev.clientX - last.x) * 0.4;
    orbit.elevationDeg = clampElevation(
      orbit.elevationDeg - (ev.clientY - last.y) * 0.4,
    );
    last = { x: ev.clientX, y: ev.clientY };
    push();
  });
  canvas.addEventListener("pointerup", () => (dragging = null));
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    orbit.radius = Math.max(0.4, orbit.radius * (1 + ev.deltaY * 0.001));
    push();
  });

  function padFromEvent(ev: PointerEvent): void {
    const rect = pad.getBoundingClientRect();
    padPos = {
      x: Math.min(Math.max((ev.clientX - rect.left) / rect.width, 0), 1),
      y: Math.min(Math.max((ev.clientY - rect.top) / rect.height, 0), 1),
    };
    push();
  }
  pad.addEventListener("pointerdown", (ev) => {
    dragging = "pad";
    pad.setPointerCapture(ev.pointerId);
    padFromEvent(ev);
  });
  pad.addEventListener("pointermove", (ev) => {
    if (dragging === "pad") padFromEvent(ev);
  });
  pad.addEventListener("pointerup", () => (dragging = null));

  resSelect.innerHTML = RESOLUTIONS.map(
    ([w, h], i) => `<option value="${i}">${w}x${h}</option>`,
  ).join("");
  resSelect.addEventListener("change", () => {
    resolution = RESOLUTIONS[Number(resSelect.value)];
    push();
  });

  el<HTMLSpanElement>("meta").textContent =
    `${info.n_gaussians.toLocaleString()} gaussians`;
  drawPad();
  push();
}

start().catch((err) => {
  document.body.textContent = `viewer failed to start: ${err}`;
});
