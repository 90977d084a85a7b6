"""Minimal RFC 6455 WebSocket framing over blocking sockets.

Covers what the viewer needs: HTTP upgrade handshake (server and client),
text/binary/ping/pong/close frames, client-side masking. Messages up to 2^63
bytes; no extensions, no fragmentation on send (fragmented receives are
reassembled).
"""

import base64
import hashlib
import os
import socket
import struct

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT, OP_TEXT, OP_BIN, OP_CLOSE, OP_PING, OP_PONG = 0, 1, 2, 8, 9, 10


class WSClosed(ConnectionError):
    pass


def accept_key(key):
    return base64.b64encode(hashlib.sha1((key + GUID).encode()).digest()).decode()


def read_http_head(sock):
    """Reads one HTTP request/response head; returns (first_line, headers, rest)."""
    buf = b""
    while b"\r\n\r\n" not in buf:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("peer closed during HTTP head")
        buf += chunk
        if len(buf) > 65536:
            raise ConnectionError("oversized HTTP head")
    head, rest = buf.split(b"\r\n\r\n", 1)
    lines = head.decode("latin-1").split("\r\n")
    headers = {}
    for line in lines[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    return lines[0], headers, rest


class WSConn:
    """One established WebSocket endpoint (either side)."""

    def __init__(self, sock, mask_outgoing):
        self.sock = sock
        self.mask_outgoing = mask_outgoing
        self._buf = b""
        self.closed = False

    # -- sending ---------------------------------------------------------
    def _send_frame(self, opcode, payload):
        if self.closed:
            raise WSClosed("connection already closed")
        head = bytes([0x80 | opcode])
        n = len(payload)
        mask_bit = 0x80 if self.mask_outgoing else 0
        if n < 126:
            head += bytes([mask_bit | n])
        elif n < 1 << 16:
            head += bytes([mask_bit | 126]) + struct.pack(">H", n)
        else:
            head += bytes([mask_bit | 127]) + struct.pack(">Q", n)
        if self.mask_outgoing:
            mask = os.urandom(4)
            masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            self.sock.sendall(head + mask + masked)
        else:
            self.sock.sendall(head + payload)

    def send_text(self, text):
        self._send_frame(OP_TEXT, text.encode())

    def send_binary(self, data):
        self._send_frame(OP_BIN, bytes(data))

    def send_close(self, code=1000):
        try:
            self._send_frame(OP_CLOSE, struct.pack(">H", code))
        except OSError:
            pass
        self.closed = True

    # -- receiving -------------------------------------------------------
    def _read_exact(self, n):
        while len(self._buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise WSClosed("peer closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def _read_frame(self):
        b0, b1 = self._read_exact(2)
        fin = bool(b0 & 0x80)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        n = b1 & 0x7F
        if n == 126:
            n = struct.unpack(">H", self._read_exact(2))[0]
        elif n == 127:
            n = struct.unpack(">Q", self._read_exact(8))[0]
        mask = self._read_exact(4) if masked else None
        payload = self._read_exact(n)
        if mask:
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        return fin, opcode, payload

    def recv_message(self):
        """Returns ("text", str) or ("binary", bytes); handles ping/close."""
        frags = []
        op_first = None
        while True:
            fin, opcode, payload = self._read_frame()
            if opcode == OP_PING:
                self._send_frame(OP_PONG, payload)
                continue
            if opcode == OP_PONG:
                continue
            if opcode == OP_CLOSE:
                self.closed = True
                raise WSClosed("close frame received")
            if opcode in (OP_TEXT, OP_BIN):
                op_first = opcode
                frags.append(payload)
            elif opcode == OP_CONT:
                frags.append(payload)
            else:
                raise ConnectionError(f"unsupported opcode {opcode}")
            if fin:
                data = b"".join(frags)
                if op_first == OP_TEXT:
                    return "text", data.decode()
                return "binary", data

    def close(self):
        self.send_close()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def client_connect(host, port, path="/ws", timeout=10.0):
    """Plain WebSocket client handshake; returns a WSConn."""
    sock = socket.create_connection((host, port), timeout=timeout)
    key = base64.b64encode(os.urandom(16)).decode()
    req = (f"GET {path} HTTP/1.1\r\nHost: {host}:{port}\r\n"
           "Upgrade: websocket\r\nConnection: Upgrade\r\n"
           f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n")
    sock.sendall(req.encode())
    status, headers, rest = read_http_head(sock)
    if " 101 " not in status + " ":
        raise ConnectionError(f"handshake refused: {status}")
    if headers.get("sec-websocket-accept") != accept_key(key):
        raise ConnectionError("bad Sec-WebSocket-Accept")
    conn = WSConn(sock, mask_outgoing=True)
    conn._buf = rest
    return conn
