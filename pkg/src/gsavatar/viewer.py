"""Live avatar service: WebSocket control/frames plus the static companion UI.

Protocol (one session per connection):
  server -> client on connect: {"type": "hello", "n": N, "dm": D_m,
                                "resolution": R}
  client -> server text: {"type": "set_camera", "yaw":, "pitch":, "dist":}
                         {"type": "set_code", "code": [..D_m floats..]}
                         {"type": "request_frame"}
                         {"type": "auto", "fps": f}   (f <= 0 disables)
  server -> client binary frames: u32 counter, u16 width, u16 height
                                  (little-endian), then raw RGB8 rows.
Camera and code updates coalesce: only the latest pair is rendered. Pose-only
changes reuse the animated Gaussian set, so the motion decoder runs exactly
once per distinct driving code.
"""

import json
import os
import socket
import threading
import time

import numpy as np

from . import _ws
from . import autodiff as ad
from .cameras import orbit_camera
from .motion import MotionCode, animate
from .rasterizer import rasterize

FRONTEND_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "frontend")

FALLBACK_PAGE = b"""<!doctype html><title>gsavatar viewer</title>
<p>The bundled UI was not found. Connect a WebSocket client to /ws.</p>
"""

MIME = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
        ".map": "application/json", ".ico": "image/x-icon"}


class Session:
    """Per-connection state: camera orbit parameters, driving code, caches and
    instrumentation counters."""

    def __init__(self, avatar, psi, resolution, background=0.0):
        self.avatar = avatar
        self.psi = psi
        self.resolution = int(resolution)
        self.background = background
        self.yaw = 0.0
        self.pitch = 0.0
        self.dist = 2.7
        self.code_src = MotionCode.zeros(psi.code_dim)
        self.code_drv = MotionCode.zeros(psi.code_dim)
        self.frame_counter = 0
        self.render_count = 0
        self.psi_eval_count = 0
        self._cached_code_key = None
        self._cached_gset = None
        self._frame_times = []

    def handle_message(self, msg):
        """Applies one decoded control message; returns ("frame", bytes) when a
        frame must be sent, ("error", text) on a protocol error, else None."""
        mtype = msg.get("type")
        if mtype == "set_camera":
            try:
                yaw = float(msg["yaw"])
                pitch = float(msg["pitch"])
                dist = float(msg["dist"])
            except (KeyError, TypeError, ValueError):
                return ("error", "set_camera needs numeric yaw, pitch, dist")
            if not all(np.isfinite([yaw, pitch, dist])) or dist <= 0:
                return ("error", "set_camera values out of range")
            self.yaw, self.pitch, self.dist = yaw, pitch, dist
            return None
        if mtype == "set_code":
            code = msg.get("code")
            if not isinstance(code, list) or len(code) != self.psi.code_dim:
                return ("error",
                        f"set_code expects a list of {self.psi.code_dim} floats")
            try:
                self.code_drv = MotionCode(np.asarray(code, dtype=np.float32),
                                           dim=self.psi.code_dim)
            except ValueError as exc:
                return ("error", str(exc))
            return None
        if mtype == "request_frame":
            return ("frame", self.render_frame())
        if mtype == "auto":
            return ("auto", float(msg.get("fps", 0.0)))
        return ("error", f"unknown message type {mtype!r}")

    def _gaussians_for_code(self):
        key = self.code_drv.values.tobytes()
        if key != self._cached_code_key:
            with ad.no_grad():
                self._cached_gset = animate(self.avatar, self.psi,
                                            self.code_src, self.code_drv).detached()
            self.psi_eval_count += 1
            self._cached_code_key = key
        return self._cached_gset

    def render_frame(self):
        """Renders the latest state into a binary frame message."""
        gset = self._gaussians_for_code()
        cam = orbit_camera(self.yaw, self.pitch, self.dist,
                           base_size=self.resolution,
                           near=max(0.05, self.dist - 1.2),
                           far=self.dist + 1.2)
        with ad.no_grad():
            img = rasterize(gset, cam, self.resolution,
                            background=self.background)
        self.render_count += 1
        self.frame_counter += 1
        now = time.perf_counter()
        self._frame_times.append(now)
        if len(self._frame_times) > 30:
            self._frame_times.pop(0)
        rgb = img.to_srgb8()
        head = np.zeros(8, np.uint8)
        head[0:4] = np.frombuffer(np.uint32(self.frame_counter).tobytes(), np.uint8)
        head[4:6] = np.frombuffer(np.uint16(rgb.shape[1]).tobytes(), np.uint8)
        head[6:8] = np.frombuffer(np.uint16(rgb.shape[0]).tobytes(), np.uint8)
        return head.tobytes() + rgb.tobytes()

    @property
    def fps_estimate(self):
        if len(self._frame_times) < 2:
            return 0.0
        span = self._frame_times[-1] - self._frame_times[0]
        return (len(self._frame_times) - 1) / span if span > 0 else 0.0


class AvatarServer:
    """Threaded WebSocket + static-file server around one shared avatar."""

    def __init__(self, avatar, psi, port=0, resolution=256, background=0.0,
                 auto_fps=0.0, static_dir=None):
        self.avatar = avatar
        self.psi = psi
        self.resolution = resolution
        self.background = background
        self.auto_fps = auto_fps
        self.static_dir = static_dir if static_dir is not None else FRONTEND_DIR
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind(("127.0.0.1", port))
        except OSError as exc:
            raise OSError(f"cannot bind port {port}: {exc}") from exc
        self._sock.listen(8)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._accept_thread = None
        self.sessions = []

    # -- lifecycle ---------------------------------------------------------
    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def serve_forever(self):
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        self.stop()

    def stop(self):
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    # -- internals -----------------------------------------------------------
    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._handle_conn, args=(conn,),
                             daemon=True).start()

    def _handle_conn(self, sock):
        try:
            first, headers, rest = _ws.read_http_head(sock)
        except ConnectionError:
            sock.close()
            return
        if headers.get("upgrade", "").lower() == "websocket":
            key = headers.get("sec-websocket-key", "")
            resp = ("HTTP/1.1 101 Switching Protocols\r\n"
                    "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                    f"Sec-WebSocket-Accept: {_ws.accept_key(key)}\r\n\r\n")
            sock.sendall(resp.encode())
            conn = _ws.WSConn(sock, mask_outgoing=False)
            conn._buf = rest
            self._session_loop(conn)
        else:
            self._serve_static(sock, first)
            sock.close()

    def _serve_static(self, sock, request_line):
        try:
            path = request_line.split(" ")[1]
        except IndexError:
            path = "/"
        path = path.split("?")[0]
        if path == "/":
            path = "/index.html"
        body, ctype = None, "text/html"
        root = os.path.abspath(self.static_dir) if self.static_dir else None
        if root and os.path.isdir(root):
            cand = os.path.abspath(os.path.join(root, path.lstrip("/")))
            if cand.startswith(root) and os.path.isfile(cand):
                with open(cand, "rb") as fh:
                    body = fh.read()
                ctype = MIME.get(os.path.splitext(cand)[1], "application/octet-stream")
        if body is None:
            if path == "/index.html":
                body = FALLBACK_PAGE
            else:
                sock.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n"
                             b"Connection: close\r\n\r\n")
                return
        head = (f"HTTP/1.1 200 OK\r\nContent-Type: {ctype}\r\n"
                f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n")
        sock.sendall(head.encode() + body)

    def _session_loop(self, conn):
        session = Session(self.avatar, self.psi, self.resolution,
                          self.background)
        self.sessions.append(session)
        lock = threading.Lock()
        dirty = threading.Event()
        pending_frame = threading.Event()
        auto_fps = [self.auto_fps]
        alive = [True]

        conn.send_text(json.dumps({
            "type": "hello", "n": session.avatar.count,
            "dm": session.psi.code_dim, "resolution": session.resolution,
        }))

        def render_worker():
            while alive[0]:
                interval = 1.0 / auto_fps[0] if auto_fps[0] > 0 else None
                triggered = pending_frame.wait(timeout=interval)
                if not alive[0]:
                    return
                pending_frame.clear()
                # auto mode may have been disabled while waiting on the old
                # cadence; only explicit triggers render then
                if not triggered and auto_fps[0] <= 0:
                    continue
                with lock:
                    frame = session.render_frame()
                try:
                    conn.send_binary(frame)
                except (OSError, _ws.WSClosed):
                    return

        worker = threading.Thread(target=render_worker, daemon=True)
        worker.start()
        try:
            while True:
                kind, payload = conn.recv_message()
                if kind != "text":
                    conn.send_text(json.dumps(
                        {"type": "error", "message": "expected a text control message"}))
                    continue
                try:
                    msg = json.loads(payload)
                except json.JSONDecodeError:
                    conn.send_text(json.dumps(
                        {"type": "error", "message": "malformed json"}))
                    continue
                with lock:
                    result = session.handle_message(msg) if isinstance(msg, dict) \
                        else ("error", "expected a json object")
                if result is None:
                    continue
                tag, value = result
                if tag == "error":
                    conn.send_text(json.dumps({"type": "error", "message": value}))
                elif tag == "frame":
                    try:
                        conn.send_binary(value)
                    except (OSError, _ws.WSClosed):
                        break
                elif tag == "auto":
                    auto_fps[0] = value
                    if value > 0:
                        pending_frame.set()
        except (_ws.WSClosed, ConnectionError, OSError):
            pass
        finally:
            alive[0] = False
            pending_frame.set()
            try:
                conn.close()
            except OSError:
                pass


def serve(avatar_path, port, resolution=256, auto_fps=0.0, background=0.0,
          static_dir=None, block=True):
    """Load an avatar file and serve it; returns the server when block=False."""
    from .avatar_io import load_avatar

    avatar, psi = load_avatar(avatar_path)
    avatar.ln_bases  # warm the animation cache before the first client
    server = AvatarServer(avatar, psi, port=port, resolution=resolution,
                          background=background, auto_fps=auto_fps,
                          static_dir=static_dir)
    if block:
        print(f"serving avatar on ws://127.0.0.1:{server.port}/ws "
              f"(UI at http://127.0.0.1:{server.port}/)")
        server.serve_forever()
        return None
    return server.start()
