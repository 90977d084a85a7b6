/** Browser bootstrap: connects to the avatar service, builds the code sliders
 * from the hello metadata, wires orbit mouse control and blits frames. */

import { applyDrag, applyWheel, OrbitParams } from "./orbit.js";
import { parseFrame, parseServerMessage } from "./protocol.js";
import { UiState } from "./state.js";

const RETRY_MS = 1500;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

class ViewerApp {
  private state: UiState | null = null;
  private ws: WebSocket | null = null;
  private orbit: OrbitParams = { yaw: 0, pitch: 0, dist: 2.7 };
  private canvas = el<HTMLCanvasElement>("view");
  private status = el<HTMLSpanElement>("status");
  private fpsLabel = el<HTMLSpanElement>("fps");
  private sliders = el<HTMLDivElement>("sliders");
  private wiggleTimer: number | null = null;

  connect(): void {
    const url = `ws://${location.host}/ws`;
    this.status.textContent = `connecting to ${url}…`;
    const ws = new WebSocket(url);
    ws.binaryType = "arraybuffer";
    this.ws = ws;

    ws.onmessage = (ev: MessageEvent) => {
      if (typeof ev.data === "string") {
        this.onText(ev.data);
      } else {
        this.onFrame(ev.data as ArrayBuffer);
      }
    };
    ws.onclose = () => {
      this.status.textContent = "disconnected, retrying…";
      this.state = null;
      window.setTimeout(() => this.connect(), RETRY_MS);
    };
    ws.onerror = () => ws.close();
  }

  private send = (text: string): void => {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(text);
    }
  };

  private onText(text: string): void {
    let msg;
    try {
      msg = parseServerMessage(text);
    } catch (err) {
      console.warn("bad server message:", err);
      return;
    }
    if (msg.type === "hello") {
      this.state = new UiState(this.send);
      this.state.onHello(msg);
      this.status.textContent =
        `connected · ${msg.n} primitives · ${msg.dm} code dims`;
      this.canvas.width = msg.resolution;
      this.canvas.height = msg.resolution;
      this.buildSliders(msg.dm);
      this.state.setAuto(30);
    } else {
      console.warn("server error:", msg.message);
    }
  }

  private onFrame(buf: ArrayBuffer): void {
    if (!this.state) return;
    let frame;
    try {
      frame = parseFrame(buf);
    } catch (err) {
      console.warn("dropped frame:", err);
      return;
    }
    if (!this.state.acceptFrame(frame)) {
      console.warn("out-of-order frame", frame.counter);
      return;
    }
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const img = ctx.createImageData(frame.width, frame.height);
    const src = frame.pixels;
    const dst = img.data;
    for (let i = 0, j = 0; i < src.length; i += 3, j += 4) {
      dst[j] = src[i];
      dst[j + 1] = src[i + 1];
      dst[j + 2] = src[i + 2];
      dst[j + 3] = 255;
    }
    ctx.putImageData(img, 0, 0);
    this.fpsLabel.textContent = `${this.state.fps.toFixed(1)} fps`;
  }

  private buildSliders(dm: number): void {
    this.sliders.innerHTML = "";
    for (let i = 0; i < dm; i++) {
      const row = document.createElement("label");
      row.className = "slider-row";
      const name = document.createElement("span");
      name.textContent = `m${i}`;
      const input = document.createElement("input");
      input.type = "range";
      input.min = "-1";
      input.max = "1";
      input.step = "0.01";
      input.value = "0";
      input.dataset.dim = String(i);
      input.oninput = () => {
        this.state?.setCodeDim(i, parseFloat(input.value));
      };
      row.append(name, input);
      this.sliders.append(row);
    }
  }

  resetCode(): void {
    if (!this.state) return;
    this.stopWiggle();
    this.state.setAllCode(new Array(this.state.code.length).fill(0));
    this.sliders
      .querySelectorAll("input")
      .forEach((inp) => ((inp as HTMLInputElement).value = "0"));
  }

  /** Sweeps one code dimension sinusoidally so its region visibly moves. */
  wiggle(dim: number): void {
    this.stopWiggle();
    const t0 = performance.now();
    const tick = () => {
      if (!this.state) return;
      const v = Math.sin((performance.now() - t0) / 300);
      this.state.setCodeDim(dim, v);
      const inp = this.sliders.querySelector(
        `input[data-dim="${dim}"]`,
      ) as HTMLInputElement | null;
      if (inp) inp.value = v.toFixed(2);
      this.wiggleTimer = window.setTimeout(tick, 33);
    };
    tick();
  }

  stopWiggle(): void {
    if (this.wiggleTimer !== null) {
      clearTimeout(this.wiggleTimer);
      this.wiggleTimer = null;
    }
  }

  attachInput(): void {
    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    this.canvas.addEventListener("mousedown", (ev) => {
      dragging = true;
      lastX = ev.clientX;
      lastY = ev.clientY;
    });
    window.addEventListener("mouseup", () => (dragging = false));
    window.addEventListener("mousemove", (ev) => {
      if (!dragging || !this.state) return;
      this.orbit = applyDrag(this.orbit, ev.clientX - lastX, ev.clientY - lastY);
      lastX = ev.clientX;
      lastY = ev.clientY;
      this.state.setCamera(this.orbit.yaw, this.orbit.pitch, this.orbit.dist);
    });
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      if (!this.state) return;
      this.orbit = applyWheel(this.orbit, ev.deltaY);
      this.state.setCamera(this.orbit.yaw, this.orbit.pitch, this.orbit.dist);
    });
    el<HTMLButtonElement>("reset").onclick = () => this.resetCode();
    el<HTMLButtonElement>("wiggle").onclick = () => this.wiggle(0);
  }
}

const app = new ViewerApp();
app.attachInput();
app.connect();
