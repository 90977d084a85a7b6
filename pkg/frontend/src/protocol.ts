/** Wire protocol shared with the avatar service. */

export interface Hello {
  type: "hello";
  n: number;
  dm: number;
  resolution: number;
}

export interface ErrorMsg {
  type: "error";
  message: string;
}

export type ServerMessage = Hello | ErrorMsg;

export interface Frame {
  counter: number;
  width: number;
  height: number;
  pixels: Uint8Array; // RGB8, row-major
}

export function parseServerMessage(text: string): ServerMessage {
  const obj = JSON.parse(text);
  if (obj.type === "hello") {
    if (
      typeof obj.n !== "number" ||
      typeof obj.dm !== "number" ||
      typeof obj.resolution !== "number"
    ) {
      throw new Error("malformed hello message");
    }
    return obj as Hello;
  }
  if (obj.type === "error") {
    return { type: "error", message: String(obj.message ?? "") };
  }
  throw new Error(`unknown server message type: ${obj.type}`);
}

export const FRAME_HEADER_BYTES = 8;

/** Parses one binary frame: u32le counter, u16le width, u16le height, RGB8. */
export function parseFrame(data: ArrayBuffer): Frame {
  if (data.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${data.byteLength} bytes`);
  }
  const view = new DataView(data);
  const counter = view.getUint32(0, true);
  const width = view.getUint16(4, true);
  const height = view.getUint16(6, true);
  const expected = FRAME_HEADER_BYTES + width * height * 3;
  if (data.byteLength !== expected) {
    throw new Error(
      `frame payload mismatch: got ${data.byteLength}, expected ${expected}`,
    );
  }
  return {
    counter,
    width,
    height,
    pixels: new Uint8Array(data, FRAME_HEADER_BYTES),
  };
}

export function setCameraMessage(yaw: number, pitch: number, dist: number): string {
  return JSON.stringify({ type: "set_camera", yaw, pitch, dist });
}

export function setCodeMessage(code: number[]): string {
  return JSON.stringify({ type: "set_code", code });
}

export function requestFrameMessage(): string {
  return JSON.stringify({ type: "request_frame" });
}

export function autoMessage(fps: number): string {
  return JSON.stringify({ type: "auto", fps });
}
