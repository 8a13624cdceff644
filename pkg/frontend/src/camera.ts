// Orbit state -> pinhole camera record (OpenCV convention: x right, y down,
// z forward; world up is +y).

import type { CameraRecord } from "./protocol.js";

export interface OrbitState {
  azimuthDeg: number;
  elevationDeg: number;
  radius: number;
  target: [number, number, number];
}

export const VERTICAL_FOV_DEG = 60;
export const MAX_ELEVATION_DEG = 85;

type Vec3 = [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2]);
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function clampElevation(deg: number): number {
  return Math.min(Math.max(deg, -MAX_ELEVATION_DEG), MAX_ELEVATION_DEG);
}

/** Camera position on the orbit sphere; azimuth 0, elevation 0 sits on +z. */
export function orbitEye(state: OrbitState): Vec3 {
  const az = (state.azimuthDeg * Math.PI) / 180;
  const el = (clampElevation(state.elevationDeg) * Math.PI) / 180;
  const r = state.radius;
  return [
    state.target[0] + r * Math.sin(az) * Math.cos(el),
    state.target[1] + r * Math.sin(el),
    state.target[2] + r * Math.cos(az) * Math.cos(el),
  ];
}

export function orbitToCamera(
  state: OrbitState,
  width: number,
  height: number,
): CameraRecord {
  if (state.radius <= 0) {
    throw new Error("orbit radius must be positive");
  }
  const eye = orbitEye(state);
  const fwd = normalize(sub(state.target, eye));
  const worldUp: Vec3 = [0, 1, 0];
  const right = normalize(cross(fwd, worldUp));
  const down = cross(fwd, right);
  const rotation = [...right, ...down, ...fwd];
  const t = [
    -(right[0] * eye[0] + right[1] * eye[1] + right[2] * eye[2]),
    -(down[0] * eye[0] + down[1] * eye[1] + down[2] * eye[2]),
    -(fwd[0] * eye[0] + fwd[1] * eye[1] + fwd[2] * eye[2]),
  ];
  const fy = height / 2 / Math.tan(((VERTICAL_FOV_DEG / 2) * Math.PI) / 180);
  return {
    fx: fy,
    fy,
    cx: width / 2,
    cy: height / 2,
    w: width,
    h: height,
    R: rotation,
    t,
  };
}
