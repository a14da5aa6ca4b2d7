"""TCP transport for the PSI exchange.

Frame layout (all big-endian)::

    "PSIF" | version u8 | msg_type u8 | payload_len u32 | payload

On connect the server immediately sends Round 1.  The client answers with
Round 2 and receives Round 3; it may then ask for a re-keyed Round 1 with a
DescentNext frame, send another Round 2 on the same session, or hang up.
Any failure is reported with an Error frame before the server closes.
"""
from __future__ import annotations

import enum
import logging
import random
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

from psifeed.bloom import DEFAULT_FP_RATE
from psifeed.commgroup import SecretKey
from psifeed.errors import ErrorCode, ProtocolError
from psifeed.geotoken import TokenSet
from psifeed.protocol import (
    DEFAULT_SESSION_TIMEOUT, DescentNextMsg, ErrorMsg, MatchResult, PsiServer, Round1Msg,
    Round2Msg, Round3Msg, Strategy, run_match,
)

log = logging.getLogger(__name__)

MAGIC = b"PSIF"
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024
HEADER = struct.Struct(">4sBBI")


class MsgType(enum.IntEnum):
    ROUND1 = 1
    ROUND2 = 2
    ROUND3 = 3
    ERROR = 4
    DESCENT_NEXT = 5


_CLASSES = {
    MsgType.ROUND1: Round1Msg,
    MsgType.ROUND2: Round2Msg,
    MsgType.ROUND3: Round3Msg,
    MsgType.ERROR: ErrorMsg,
    MsgType.DESCENT_NEXT: DescentNextMsg,
}
_TYPES = {cls: t for t, cls in _CLASSES.items()}


class FrameError(ProtocolError):
    def __init__(self, message: str):
        super().__init__(ErrorCode.BAD_FRAME, message)


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class UnknownMsgType(FrameError):
    pass


class Oversize(FrameError):
    pass


class Truncated(FrameError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes


def _check_header(magic: bytes, version: int, msg_type: int, length: int) -> MsgType:
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        t = MsgType(msg_type)
    except ValueError:
        raise UnknownMsgType(f"unknown message type {msg_type}") from None
    if length > MAX_PAYLOAD:
        raise Oversize(f"payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return t


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise Oversize(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, int(frame.msg_type), len(frame.payload)) + frame.payload


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode the frame at the start of ``data``; returns it and the bytes consumed."""
    if len(data) < HEADER.size:
        raise Truncated(f"need {HEADER.size} header bytes, have {len(data)}")
    t = _check_header(*HEADER.unpack_from(data))
    length = HEADER.unpack_from(data)[3]
    end = HEADER.size + length
    if len(data) < end:
        raise Truncated(f"payload_len {length} but only {len(data) - HEADER.size} bytes follow")
    return Frame(t, bytes(data[HEADER.size:end])), end


def encode_message(msg) -> bytes:
    return encode_frame(Frame(_TYPES[type(msg)], msg.to_bytes()))


def decode_message(frame: Frame):
    return _CLASSES[frame.msg_type].from_bytes(frame.payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame | None:
    """Next frame from ``sock``, or None on a clean close between frames."""
    head = _recv_exact(sock, HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise Truncated("connection closed inside a frame header")
    magic, version, msg_type, length = HEADER.unpack(head)
    t = _check_header(magic, version, msg_type, length)
    payload = _recv_exact(sock, length)
    if len(payload) < length:
        raise Truncated("connection closed inside a frame payload")
    return Frame(t, payload)


def send_message(sock: socket.socket, msg) -> None:
    sock.sendall(encode_message(msg))


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {addr!r} is not HOST:PORT")
    return host.strip("[]") or "0.0.0.0", int(port)


# -- server --------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    server: "PsiTCPServer"

    def handle(self):
        psi = self.server.psi
        sock = self.request
        sock.settimeout(self.server.io_timeout)
        opened = []
        try:
            msg1 = psi.open()
            opened.append(msg1.session_id)
            send_message(sock, msg1)
            while True:
                frame = read_frame(sock)
                if frame is None:
                    break
                msg = decode_message(frame)
                if isinstance(msg, Round2Msg):
                    send_message(sock, psi.exchange(msg))
                elif isinstance(msg, DescentNextMsg):
                    msg1 = psi.descend(msg.session_id, msg.max_resolution)
                    opened.append(msg1.session_id)
                    send_message(sock, msg1)
                else:
                    raise ProtocolError(ErrorCode.BAD_FRAME, f"unexpected {frame.msg_type.name} from client")
        except ProtocolError as exc:
            log.info("connection %s: %s", self.client_address, exc)
            self._try_send(ErrorMsg(exc.code, exc.message))
        except (OSError, socket.timeout) as exc:
            log.info("connection %s dropped: %s", self.client_address, exc)
        except Exception:
            log.exception("internal error serving %s", self.client_address)
            self._try_send(ErrorMsg(ErrorCode.INTERNAL, "internal error"))
        finally:
            for sid in opened:
                psi.close(sid)

    def _try_send(self, msg):
        try:
            send_message(self.request, msg)
        except OSError:
            pass


class PsiTCPServer(socketserver.ThreadingTCPServer):
    """One thread per connection; ``server_close`` waits for in-flight sessions."""

    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True
    request_queue_size = 64

    def __init__(self, addr: tuple[str, int], psi: PsiServer, io_timeout: float = DEFAULT_SESSION_TIMEOUT):
        self.psi = psi
        self.io_timeout = io_timeout
        super().__init__(addr, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve(bind_addr: str, tokens: TokenSet, r_floor: int | None = None, e: float = DEFAULT_FP_RATE,
          key: SecretKey | None = None, rng: random.Random | None = None,
          timeout: float = DEFAULT_SESSION_TIMEOUT) -> PsiTCPServer:
    """Bind a server for ``tokens``; call ``serve_forever`` (or use :func:`start_background`)."""
    psi = PsiServer(tokens, r_floor, e, key, rng, timeout)
    srv = PsiTCPServer(parse_addr(bind_addr), psi, timeout)
    log.info("serving %d tokens at r=%d (floor %d) on %s", len(tokens), tokens.resolution, psi.r_floor, srv.address)
    return srv


def start_background(srv: PsiTCPServer, poll_interval: float = 0.05) -> threading.Thread:
    """Run ``srv`` on a daemon thread; ``shutdown`` returns within ``poll_interval``."""
    t = threading.Thread(target=srv.serve_forever, args=(poll_interval,), name="psi-server", daemon=True)
    t.start()
    return t


# -- client --------------------------------------------------------------------

class RemoteChannel:
    """Client end of one connection; implements the protocol ``Channel`` interface."""

    def __init__(self, addr: str, timeout: float = 60.0):
        self.addr = addr
        self.timeout = timeout
        self.sock: socket.socket | None = None
        self.frames: list[tuple[str, MsgType]] = []

    def __enter__(self):
        self.sock = socket.create_connection(parse_addr(self.addr), timeout=self.timeout)
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self.sock is not None:
            self.sock.close()
            self.sock = None

    def _send(self, msg):
        send_message(self.sock, msg)
        self.frames.append(("sent", _TYPES[type(msg)]))

    def _expect(self, cls):
        frame = read_frame(self.sock)
        if frame is None:
            raise ProtocolError(ErrorCode.INTERNAL, "server closed the connection")
        self.frames.append(("received", frame.msg_type))
        msg = decode_message(frame)
        if isinstance(msg, ErrorMsg):
            raise msg.exception()
        if not isinstance(msg, cls):
            raise ProtocolError(ErrorCode.BAD_FRAME, f"expected {cls.__name__}, got {frame.msg_type.name}")
        return msg

    def open(self) -> Round1Msg:
        return self._expect(Round1Msg)

    def exchange(self, msg2: Round2Msg) -> Round3Msg:
        self._send(msg2)
        return self._expect(Round3Msg)

    def descend(self, session_id: bytes, max_resolution: int) -> Round1Msg:
        self._send(DescentNextMsg(session_id, max_resolution))
        return self._expect(Round1Msg)


def match_client(server_addr: str, tokens: TokenSet, strategy: Strategy = Strategy.BEST,
                 key: SecretKey | None = None, rng: random.Random | None = None, rekey: bool = True,
                 descend: bool = True, timeout: float = 60.0) -> MatchResult:
    with RemoteChannel(server_addr, timeout) as ch:
        return run_match(ch, tokens, strategy, key, rng, rekey, descend)
