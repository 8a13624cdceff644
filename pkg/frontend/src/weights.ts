// Bilinear blend weights for the 2D style pad.

export type PadWeights = [number, number, number, number];

/**
 * Pad position (px, py) in [0,1]^2 to corner weights
 * (top-left, top-right, bottom-left, bottom-right); they always sum to 1.
 */
export function padWeights(px: number, py: number): PadWeights {
  const x = Math.min(Math.max(px, 0), 1);
  const y = Math.min(Math.max(py, 0), 1);
  return [
    (1 - x) * (1 - y),
    x * (1 - y),
    (1 - x) * y,
    x * y,
  ];
}
