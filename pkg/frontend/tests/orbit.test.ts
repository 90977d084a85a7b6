import { describe, expect, it } from "vitest";

import {
  applyDrag,
  applyWheel,
  DIST_MAX,
  DIST_MIN,
  PITCH_LIMIT,
} from "../src/orbit";

describe("orbit controls", () => {
  it("drag adjusts yaw and pitch proportionally", () => {
    const p = applyDrag({ yaw: 0, pitch: 0, dist: 2.7 }, 100, -50);
    expect(p.yaw).toBeCloseTo(0.8);
    expect(p.pitch).toBeCloseTo(-0.4);
    expect(p.dist).toBe(2.7);
  });

  it("pitch clamps at the limit", () => {
    const p = applyDrag({ yaw: 0, pitch: 1.1, dist: 2.7 }, 0, 1000);
    expect(p.pitch).toBe(PITCH_LIMIT);
  });

  it("wheel zoom is exponential and clamped", () => {
    let p = { yaw: 0, pitch: 0, dist: 2.7 };
    const closer = applyWheel(p, -400);
    expect(closer.dist).toBeLessThan(2.7);
    for (let i = 0; i < 50; i++) p = applyWheel(p, 1000);
    expect(p.dist).toBe(DIST_MAX);
    for (let i = 0; i < 80; i++) p = applyWheel(p, -1000);
    expect(p.dist).toBe(DIST_MIN);
  });
});
