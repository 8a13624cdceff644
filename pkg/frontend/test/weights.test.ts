import { describe, expect, it } from "vitest";

import { padWeights } from "../src/weights.js";

describe("padWeights", () => {
  it("corner (0,0) gives the exact unit vector", () => {
    expect(padWeights(0, 0)).toEqual([1, 0, 0, 0]);
    expect(padWeights(1, 0)).toEqual([0, 1, 0, 0]);
    expect(padWeights(0, 1)).toEqual([0, 0, 1, 0]);
    expect(padWeights(1, 1)).toEqual([0, 0, 0, 1]);
  });

  it("center gives equal quarters", () => {
    expect(padWeights(0.5, 0.5)).toEqual([0.25, 0.25, 0.25, 0.25]);
  });

  it("always sums to 1 within 1e-6", () => {
    for (let i = 0; i < 200; i++) {
      const x = Math.random();
      const y = Math.random();
      const sum = padWeights(x, y).reduce((a, b) => a + b, 0);
      expect(Math.abs(sum - 1)).toBeLessThan(1e-6);
    }
  });

  it("clamps positions outside the pad", () => {
    expect(padWeights(-0.5, 2)).toEqual([0, 0, 1, 0]);
  });
});
