/** Orbit-camera interaction math: drag to yaw/pitch, wheel to distance. */

export interface OrbitParams {
  yaw: number;
  pitch: number;
  dist: number;
}

export const YAW_PER_PIXEL = 0.008;
export const PITCH_PER_PIXEL = 0.008;
export const PITCH_LIMIT = 1.2;
export const DIST_MIN = 1.2;
export const DIST_MAX = 6.0;

export function applyDrag(p: OrbitParams, dx: number, dy: number): OrbitParams {
  const yaw = p.yaw + dx * YAW_PER_PIXEL;
  let pitch = p.pitch + dy * PITCH_PER_PIXEL;
  pitch = Math.min(PITCH_LIMIT, Math.max(-PITCH_LIMIT, pitch));
  return { yaw, pitch, dist: p.dist };
}

export function applyWheel(p: OrbitParams, deltaY: number): OrbitParams {
  // exponential zoom feels uniform across the range
  let dist = p.dist * Math.exp(deltaY * 0.001);
  dist = Math.min(DIST_MAX, Math.max(DIST_MIN, dist));
  return { yaw: p.yaw, pitch: p.pitch, dist };
}
