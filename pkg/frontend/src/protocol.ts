// Wire protocol shared with the render service.

export interface CameraRecord {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  w: number;
  h: number;
  R: number[]; // 3x3 world-to-camera, row-major
  t: number[]; // 3-vector
}

export interface RenderRequest {
  frame_id: number;
  camera: CameraRecord;
  weights: [number, number, number, number];
  res: [number, number];
}

export interface Telemetry {
  frame_id: number;
  render_us: number;
}

export interface DecodedFrame {
  frameId: number;
  width: number;
  height: number;
  pixels: Uint8Array; // RGB8 row-major
}

export interface ServiceInfo {
  n_gaussians: number;
  latent_dim: number;
  styles: string[]; // base64 PNG thumbnails, pad corner order
}

const HEADER_BYTES = 16;

/** Binary frame: u64 frame_id LE, u32 width, u32 height, then RGB8 pixels. */
export function decodeFrame(buffer: ArrayBuffer): DecodedFrame {
  if (buffer.byteLength < HEADER_BYTES) {
    throw new Error(`frame too short: ${buffer.byteLength} bytes`);
  }
  const view = new DataView(buffer);
  const frameId = Number(view.getBigUint64(0, true));
  const width = view.getUint32(8, true);
  const height = view.getUint32(12, true);
  const pixels = new Uint8Array(buffer, HEADER_BYTES);
  if (pixels.length !== width * height * 3) {
    throw new Error(
      `payload ${pixels.length} bytes does not match ${width}x${height} RGB8`,
    );
  }
  return { frameId, width, height, pixels };
}

/** RGB8 -> RGBA for a canvas ImageData buffer. */
export function rgbToRgba(rgb: Uint8Array, rgba: Uint8ClampedArray): void {
  const n = rgb.length / 3;
  for (let i = 0; i < n; i++) {
    rgba[4 * i] = rgb[3 * i];
    rgba[4 * i + 1] = rgb[3 * i + 1];
    rgba[4 * i + 2] = rgb[3 * i + 2];
    rgba[4 * i + 3] = 255;
  }
}
