/** Client-side session state: sliders, outbound coalescing, frame accounting.
 *
 * Nothing here touches the DOM or the socket; the client wires a `send`
 * callback in, which keeps every invariant unit-testable:
 *  - no message leaves before `hello` arrived,
 *  - slider values clamp to [-1, 1] and always have the hello dimension,
 *  - code/camera updates are rate-limited and coalesced to the latest value,
 *  - frame counters must be strictly increasing.
 */

import {
  autoMessage,
  Frame,
  Hello,
  requestFrameMessage,
  setCameraMessage,
  setCodeMessage,
} from "./protocol.js";

export const MAX_MESSAGES_PER_SECOND = 60;

export type SendFn = (text: string) => void;
export type Clock = () => number; // milliseconds

export class UiState {
  connected = false;
  hello: Hello | null = null;
  yaw = 0;
  pitch = 0;
  dist = 2.7;
  code: number[] = [];
  autoFps = 0;
  lastFrameCounter = -1;
  framesDropped = 0;
  private frameTimes: number[] = [];

  private send: SendFn;
  private clock: Clock;
  private lastSentAt = -Infinity;
  private pendingTimer = false;
  private dirtyCamera = false;
  private dirtyCode = false;
  private scheduleFlush: (delayMs: number, fn: () => void) => void;

  constructor(
    send: SendFn,
    clock: Clock = () => Date.now(),
    scheduleFlush: (delayMs: number, fn: () => void) => void = (d, fn) =>
      void setTimeout(fn, d),
  ) {
    this.send = send;
    this.clock = clock;
    this.scheduleFlush = scheduleFlush;
  }

  onHello(h: Hello): void {
    this.hello = h;
    this.connected = true;
    this.code = new Array(h.dm).fill(0);
  }

  /** Sliders clamp to [-1, 1]; unknown dimensions are rejected. */
  setCodeDim(index: number, value: number): void {
    if (!this.hello) return; // nothing may be sent before hello
    if (index < 0 || index >= this.hello.dm) {
      throw new RangeError(`code dimension ${index} out of range`);
    }
    this.code[index] = Math.min(1, Math.max(-1, value));
    this.dirtyCode = true;
    this.flushSoon();
  }

  setAllCode(values: number[]): void {
    if (!this.hello) return;
    for (let i = 0; i < this.hello.dm; i++) {
      this.code[i] = Math.min(1, Math.max(-1, values[i] ?? 0));
    }
    this.dirtyCode = true;
    this.flushSoon();
  }

  setCamera(yaw: number, pitch: number, dist: number): void {
    if (!this.hello) return;
    this.yaw = yaw;
    this.pitch = Math.min(1.4, Math.max(-1.4, pitch));
    this.dist = Math.min(8, Math.max(0.5, dist));
    this.dirtyCamera = true;
    this.flushSoon();
  }

  requestFrame(): void {
    if (!this.hello) return;
    this.flushNow();
    this.send(requestFrameMessage());
  }

  setAuto(fps: number): void {
    if (!this.hello) return;
    this.autoFps = fps;
    this.send(autoMessage(fps));
  }

  /** Rate-limited coalescing: at most MAX_MESSAGES_PER_SECOND flushes, always
   * carrying the latest state. */
  private flushSoon(): void {
    const interval = 1000 / MAX_MESSAGES_PER_SECOND;
    const now = this.clock();
    if (now - this.lastSentAt >= interval) {
      this.flushNow();
      return;
    }
    if (!this.pendingTimer) {
      this.pendingTimer = true;
      const wait = interval - (now - this.lastSentAt);
      this.scheduleFlush(wait, () => {
        this.pendingTimer = false;
        this.flushNow();
      });
    }
  }

  private flushNow(): void {
    if (!this.hello) return;
    const sent = this.dirtyCamera || this.dirtyCode;
    if (this.dirtyCamera) {
      this.send(setCameraMessage(this.yaw, this.pitch, this.dist));
      this.dirtyCamera = false;
    }
    if (this.dirtyCode) {
      this.send(setCodeMessage([...this.code]));
      this.dirtyCode = false;
    }
    if (sent) {
      this.lastSentAt = this.clock();
    }
  }

  /** Frame bookkeeping; returns false when the frame must be dropped. */
  acceptFrame(frame: Frame): boolean {
    if (frame.counter <= this.lastFrameCounter) {
      this.framesDropped += 1;
      return false;
    }
    this.lastFrameCounter = frame.counter;
    const now = this.clock();
    this.frameTimes.push(now);
    if (this.frameTimes.length > 30) {
      this.frameTimes.shift();
    }
    return true;
  }

  /** FPS over a 30-frame sliding window. */
  get fps(): number {
    if (this.frameTimes.length < 2) return 0;
    const span =
      this.frameTimes[this.frameTimes.length - 1] - this.frameTimes[0];
    if (span <= 0) return 0;
    return ((this.frameTimes.length - 1) * 1000) / span;
  }
}
