"""Three-message private set intersection cardinality (PSI-CA).

Server (the friend being ranked) publishes Bloom filters of its singly
blinded tokens, one per resolution it offers.  The client blinds its own
tokens, the server adds its layer and shuffles, and the client removes its
layer and counts Bloom hits.  Only the count is learned.

Every token is domain separated by resolution before hashing:
``hash_to_group(bytes([r]) + token)``.
"""
from __future__ import annotations

import enum
import logging
import random
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

from psifeed import commgroup
from psifeed._rng import child_rng, make_rng
from psifeed.bloom import DEFAULT_FP_RATE, BloomFilter, bloom_build, check_rate
from psifeed.commgroup import ELEMENT_BYTES, SecretKey
from psifeed.errors import ErrorCode, InputError, ProtocolError
from psifeed.geotoken import TimeMode, TokenSet, check_resolution

log = logging.getLogger(__name__)

SESSION_ID_BYTES = 16
ALL_RESOLUTIONS = 0  # Round 2 sentinel for "all"
DEFAULT_SESSION_TIMEOUT = 300.0

_TIME_MODES = [TimeMode.NONE, TimeMode.HOUR_OF_DAY, TimeMode.ABSOLUTE_HOUR]


class Strategy(str, enum.Enum):
    BEST = "best_resolution"
    ALL = "all_resolutions"


def token_point(token: str, r: int) -> bytes:
    return commgroup.hash_to_group(bytes([r]) + token.encode("utf-8"))


def hashed_levels(tokens: TokenSet, r_floor: int, r_top: int | None = None) -> dict[int, list[bytes]]:
    """Hashed (unblinded) points of ``tokens`` truncated to each resolution in range."""
    check_resolution(r_floor)
    r_top = tokens.resolution if r_top is None else min(r_top, tokens.resolution)
    if r_floor > r_top:
        raise InputError(f"floor resolution {r_floor} above top resolution {r_top}")
    return {r: [token_point(t, r) for t in tokens.truncated(r)] for r in range(r_top, r_floor - 1, -1)}


# -- messages and their payload encodings ------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError(ErrorCode.BAD_FRAME, "payload truncated")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def elements(self) -> list[bytes]:
        (count,) = self.unpack(">I")
        raw = self.take(count * ELEMENT_BYTES)
        return [raw[i:i + ELEMENT_BYTES] for i in range(0, len(raw), ELEMENT_BYTES)]

    def rest(self) -> memoryview:
        return self.data[self.pos:]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(ErrorCode.BAD_FRAME, f"{len(self.data) - self.pos} trailing payload bytes")


def _pack_elements(elements: list[bytes]) -> bytes:
    return struct.pack(">I", len(elements)) + b"".join(elements)


def _pack_string(s: str) -> bytes:
    b = s.encode("utf-8")[:0xFFFF]
    return struct.pack(">H", len(b)) + b


@dataclass
class ResolutionOffer:
    resolution: int
    set_size: int
    bloom: BloomFilter


@dataclass
class Round1Msg:
    session_id: bytes
    time_mode: TimeMode
    offers: list[ResolutionOffer]

    @property
    def resolutions_offered(self) -> list[int]:
        return [o.resolution for o in self.offers]

    def offer(self, r: int) -> ResolutionOffer:
        for o in self.offers:
            if o.resolution == r:
                return o
        raise KeyError(r)

    def to_bytes(self) -> bytes:
        parts = [self.session_id, bytes([_TIME_MODES.index(self.time_mode)]), struct.pack(">I", len(self.offers))]
        for o in self.offers:
            parts.append(struct.pack(">BI", o.resolution, o.set_size))
            parts.append(o.bloom.to_bytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Round1Msg":
        rd = _Reader(data)
        sid = rd.take(SESSION_ID_BYTES)
        (mode,) = rd.unpack(">B")
        if mode >= len(_TIME_MODES):
            raise ProtocolError(ErrorCode.BAD_FRAME, f"unknown time mode {mode}")
        (count,) = rd.unpack(">I")
        offers = []
        for _ in range(count):
            r, size = rd.unpack(">BI")
            try:
                check_resolution(r)
                bloom, used = BloomFilter.from_bytes(rd.rest(), n=size)
            except InputError as exc:
                raise ProtocolError(ErrorCode.BAD_FRAME, str(exc)) from None
            rd.take(used)
            offers.append(ResolutionOffer(r, size, bloom))
        rd.done()
        rs = [o.resolution for o in offers]
        if any(a <= b for a, b in zip(rs, rs[1:])):
            raise ProtocolError(ErrorCode.BAD_FRAME, "offered resolutions not strictly decreasing")
        return cls(sid, _TIME_MODES[mode], offers)


@dataclass
class Round2Msg:
    session_id: bytes
    resolution_selected: int  # ALL_RESOLUTIONS for "all"
    elements: list[bytes]

    def to_bytes(self) -> bytes:
        return self.session_id + bytes([self.resolution_selected]) + _pack_elements(self.elements)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Round2Msg":
        rd = _Reader(data)
        sid = rd.take(SESSION_ID_BYTES)
        (r,) = rd.unpack(">B")
        elements = rd.elements()
        rd.done()
        return cls(sid, r, elements)


@dataclass
class Round3Msg:
    session_id: bytes
    elements: list[bytes]

    def to_bytes(self) -> bytes:
        return self.session_id + _pack_elements(self.elements)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Round3Msg":
        rd = _Reader(data)
        sid = rd.take(SESSION_ID_BYTES)
        elements = rd.elements()
        rd.done()
        return cls(sid, elements)


@dataclass
class ErrorMsg:
    code: ErrorCode
    message: str

    def to_bytes(self) -> bytes:
        return struct.pack(">H", int(self.code)) + _pack_string(self.message)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ErrorMsg":
        rd = _Reader(data)
        (code,) = rd.unpack(">H")
        try:
            code = ErrorCode(code)
        except ValueError:
            raise ProtocolError(ErrorCode.BAD_FRAME, f"unknown error code {code}") from None
        (n,) = rd.unpack(">H")
        msg = rd.take(n).decode("utf-8", errors="replace")
        rd.done()
        return cls(code, msg)

    def exception(self) -> ProtocolError:
        return ProtocolError(self.code, self.message)


@dataclass
class DescentNextMsg:
    """Client asks for a fresh (re-keyed) Round 1 capped at ``max_resolution``."""

    session_id: bytes
    max_resolution: int

    def to_bytes(self) -> bytes:
        return self.session_id + bytes([self.max_resolution])

    @classmethod
    def from_bytes(cls, data: bytes) -> "DescentNextMsg":
        rd = _Reader(data)
        sid = rd.take(SESSION_ID_BYTES)
        (r,) = rd.unpack(">B")
        rd.done()
        return cls(sid, r)


@dataclass
class MatchResult:
    cardinality_by_resolution: dict[int, int]
    server_set_size_by_resolution: dict[int, int]
    strategy: Strategy
    stop_resolution: int | None = None
    client_set_size_by_resolution: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "stop_resolution": self.stop_resolution,
            "cardinality_by_resolution": {str(r): c for r, c in sorted(self.cardinality_by_resolution.items())},
            "server_set_size_by_resolution": {str(r): c for r, c in sorted(self.server_set_size_by_resolution.items())},
            "client_set_size_by_resolution": {str(r): c for r, c in sorted(self.client_set_size_by_resolution.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchResult":
        def ints(m):
            return {int(k): int(v) for k, v in (m or {}).items()}

        return cls(
            ints(d["cardinality_by_resolution"]),
            ints(d["server_set_size_by_resolution"]),
            Strategy(d["strategy"]),
            d.get("stop_resolution"),
            ints(d.get("client_set_size_by_resolution")),
        )


# -- state machines -----------------------------------------------------------

@dataclass
class ServerSession:
    session_id: bytes
    key: SecretKey
    time_mode: TimeMode
    set_sizes: dict[int, int]
    rng: random.Random
    last_used: float = field(default_factory=time.monotonic)
    rounds_served: int = 0
    closed: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass
class ClientSession:
    session_id: bytes
    key: SecretKey
    strategy: Strategy
    resolutions: list[int]
    blooms: dict[int, BloomFilter]
    server_set_sizes: dict[int, int]
    client_set_sizes: dict[int, int]
    sent: int


def server_init(tokens: TokenSet, r_floor: int, e: float = DEFAULT_FP_RATE, key: SecretKey | None = None,
                rng: random.Random | None = None, max_resolution: int | None = None,
                levels: dict[int, list[bytes]] | None = None) -> tuple[ServerSession, Round1Msg]:
    """Blind the server set at every resolution in ``[r_floor, top]`` and publish Bloom filters.

    ``levels`` may carry precomputed :func:`hashed_levels` output to skip hashing.
    """
    check_rate(e)
    check_resolution(r_floor)
    rng = rng if rng is not None else make_rng()
    key = key if key is not None else commgroup.keygen(None if isinstance(rng, random.SystemRandom) else rng)
    if levels is None:
        levels = hashed_levels(tokens, r_floor, max_resolution)
    else:
        top = tokens.resolution if max_resolution is None else min(max_resolution, tokens.resolution)
        if r_floor > top:
            raise InputError(f"floor resolution {r_floor} above top resolution {top}")
        levels = {r: levels[r] for r in range(top, r_floor - 1, -1)}
    offers = []
    for r in sorted(levels, reverse=True):
        blinded = [commgroup.encrypt(p, key) for p in levels[r]]
        offers.append(ResolutionOffer(r, len(blinded), bloom_build(blinded, e)))
    sid = rng.randbytes(SESSION_ID_BYTES)
    session = ServerSession(sid, key, tokens.time_mode, {o.resolution: o.set_size for o in offers}, child_rng(rng))
    return session, Round1Msg(sid, tokens.time_mode, offers)


def client_round2(msg1: Round1Msg, tokens: TokenSet, strategy: Strategy = Strategy.BEST,
                  key: SecretKey | None = None, rng: random.Random | None = None,
                  resolution: int | None = None,
                  levels: dict[int, list[bytes]] | None = None) -> tuple[ClientSession, Round2Msg]:
    """Blind the client set at the chosen resolution(s); ``resolution`` pins a BEST run.

    ``levels`` may carry precomputed :func:`hashed_levels` output for ``tokens``.
    """
    strategy = Strategy(strategy)
    rng = rng if rng is not None else make_rng()
    key = key if key is not None else commgroup.keygen(None if isinstance(rng, random.SystemRandom) else rng)
    if msg1.time_mode != tokens.time_mode:
        raise ProtocolError(ErrorCode.RESOLUTION_MISMATCH,
                            f"time mode mismatch: server {msg1.time_mode.value}, client {tokens.time_mode.value}")
    usable = sorted((r for r in msg1.resolutions_offered if r <= tokens.resolution), reverse=True)
    if not usable:
        raise ProtocolError(ErrorCode.RESOLUTION_MISMATCH,
                            f"client resolution {tokens.resolution} below every offered {msg1.resolutions_offered}")
    if strategy is Strategy.BEST:
        if resolution is None:
            resolution = usable[0]
        elif resolution not in usable:
            raise ProtocolError(ErrorCode.RESOLUTION_MISMATCH, f"resolution {resolution} not usable")
        chosen = [resolution]
        selected = resolution
    else:
        chosen = usable
        selected = ALL_RESOLUTIONS
    elements = []
    sizes = {}
    for r in chosen:
        points = levels[r] if levels is not None else [token_point(t, r) for t in tokens.truncated(r)]
        sizes[r] = len(points)
        elements.extend(commgroup.encrypt(p, key) for p in points)
    rng.shuffle(elements)
    session = ClientSession(
        msg1.session_id, key, strategy, chosen,
        {r: msg1.offer(r).bloom for r in chosen},
        {o.resolution: o.set_size for o in msg1.offers},
        sizes, len(elements),
    )
    return session, Round2Msg(msg1.session_id, selected, elements)


def server_round3(session: ServerSession, msg2: Round2Msg, rng: random.Random | None = None) -> Round3Msg:
    """Add the server layer to every client element and shuffle (Fisher-Yates)."""
    if session.closed:
        raise ProtocolError(ErrorCode.UNKNOWN_SESSION, "session closed")
    if msg2.session_id != session.session_id:
        raise ProtocolError(ErrorCode.UNKNOWN_SESSION, "session id mismatch")
    r = msg2.resolution_selected
    if r != ALL_RESOLUTIONS and r not in session.set_sizes:
        raise ProtocolError(ErrorCode.RESOLUTION_MISMATCH, f"resolution {r} was not offered")
    try:
        out = [commgroup.encrypt(x, session.key) for x in msg2.elements]
    except InputError:
        raise ProtocolError(ErrorCode.BAD_FRAME, "invalid group element in round 2") from None
    (rng or session.rng).shuffle(out)
    session.rounds_served += 1
    session.last_used = time.monotonic()
    return Round3Msg(session.session_id, out)


def client_finalize(session: ClientSession, msg3: Round3Msg) -> MatchResult:
    """Strip the client layer and count hits against the Round 1 filters."""
    if msg3.session_id != session.session_id:
        raise ProtocolError(ErrorCode.UNKNOWN_SESSION, "session id mismatch")
    if len(msg3.elements) != session.sent:
        raise ProtocolError(ErrorCode.TAMPERED_TRANSCRIPT,
                            f"sent {session.sent} elements, got {len(msg3.elements)} back")
    counts = dict.fromkeys(session.resolutions, 0)
    blooms = [(r, session.blooms[r]) for r in session.resolutions]
    for x in msg3.elements:
        try:
            y = commgroup.strip(x, session.key)
        except InputError:
            raise ProtocolError(ErrorCode.TAMPERED_TRANSCRIPT, "invalid group element in round 3") from None
        for r, bloom in blooms:
            if y in bloom:
                counts[r] += 1
    stop = session.resolutions[0] if session.strategy is Strategy.BEST else None
    return MatchResult(counts, dict(session.server_set_sizes), session.strategy, stop, dict(session.client_set_sizes))


# -- server-side session management -------------------------------------------

class SessionStore:
    """Thread-safe map of live server sessions with idle expiry."""

    def __init__(self, timeout: float = DEFAULT_SESSION_TIMEOUT, clock=time.monotonic):
        self.timeout = timeout
        self.clock = clock
        self._sessions: dict[bytes, ServerSession] = {}
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._sessions)

    def add(self, session: ServerSession) -> None:
        session.last_used = self.clock()
        with self._lock:
            self._sessions[session.session_id] = session

    def get(self, session_id: bytes) -> ServerSession:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise ProtocolError(ErrorCode.UNKNOWN_SESSION, "unknown session")
            if self.clock() - session.last_used > self.timeout:
                del self._sessions[session_id]
                session.closed = True
                raise ProtocolError(ErrorCode.SESSION_EXPIRED, "session expired")
            return session

    def touch(self, session: ServerSession) -> None:
        session.last_used = self.clock()

    def close(self, session_id: bytes) -> None:
        with self._lock:
            session = self._sessions.pop(session_id, None)
        if session is not None:
            session.closed = True

    def purge(self) -> int:
        now = self.clock()
        with self._lock:
            stale = [sid for sid, s in self._sessions.items() if now - s.last_used > self.timeout]
            for sid in stale:
                self._sessions.pop(sid).closed = True
        return len(stale)


class Channel(Protocol):
    """What a client needs from a server, local or remote."""

    def open(self) -> Round1Msg: ...

    def exchange(self, msg2: Round2Msg) -> Round3Msg: ...

    def descend(self, session_id: bytes, max_resolution: int) -> Round1Msg: ...


class PsiServer:
    """Holds one server token set and answers any number of sessions.

    Hashing of the server set happens once here; each session only blinds.
    A ``key`` makes every session reuse it; otherwise each session is keyed afresh.
    """

    def __init__(self, tokens: TokenSet, r_floor: int | None = None, e: float = DEFAULT_FP_RATE,
                 key: SecretKey | None = None, rng: random.Random | None = None,
                 timeout: float = DEFAULT_SESSION_TIMEOUT, levels: dict[int, list[bytes]] | None = None):
        self.tokens = tokens
        self.r_floor = tokens.resolution if r_floor is None else check_resolution(r_floor)
        self.e = check_rate(e)
        self.key = key
        self.store = SessionStore(timeout)
        self._rng = rng if rng is not None else make_rng()
        self._rng_lock = threading.Lock()
        self._levels = levels if levels is not None else hashed_levels(tokens, self.r_floor)

    def _session_rng(self) -> random.Random:
        with self._rng_lock:
            return child_rng(self._rng)

    def open(self, max_resolution: int | None = None) -> Round1Msg:
        session, msg1 = server_init(self.tokens, self.r_floor, self.e, self.key, self._session_rng(),
                                    max_resolution, self._levels)
        self.store.add(session)
        log.info("session %s opened: sizes %s", session.session_id.hex(), session.set_sizes)
        return msg1

    def exchange(self, msg2: Round2Msg) -> Round3Msg:
        session = self.store.get(msg2.session_id)
        with session.lock:
            msg3 = server_round3(session, msg2)
            self.store.touch(session)
        log.info("session %s answered %d elements", session.session_id.hex(), len(msg3.elements))
        return msg3

    def descend(self, session_id: bytes, max_resolution: int) -> Round1Msg:
        self.store.get(session_id)
        self.close(session_id)
        if max_resolution < self.r_floor:
            raise ProtocolError(ErrorCode.RESOLUTION_MISMATCH, f"{max_resolution} below floor {self.r_floor}")
        return self.open(max_resolution)

    def close(self, session_id: bytes) -> None:
        self.store.close(session_id)


def best_resolution_descent(channel: Channel, tokens: TokenSet, key: SecretKey | None = None,
                            rng: random.Random | None = None, rekey: bool = True) -> MatchResult:
    """Match from the finest common resolution downward, stopping at the first non-zero count.

    With ``rekey`` every step after the first asks the server for a fresh
    Round 1 (new server key) and uses a new client key; otherwise the first
    session and keys are reused for every step.
    """
    rng = rng if rng is not None else make_rng()
    seeded = not isinstance(rng, random.SystemRandom)
    msg1 = channel.open()
    server_sizes = {o.resolution: o.set_size for o in msg1.offers}
    ladder = sorted((r for r in msg1.resolutions_offered if r <= tokens.resolution), reverse=True)
    if not ladder:
        raise ProtocolError(ErrorCode.RESOLUTION_MISMATCH,
                            f"client resolution {tokens.resolution} below every offered {msg1.resolutions_offered}")
    cards: dict[int, int] = {}
    client_sizes: dict[int, int] = {}
    fixed = key if key is not None or rekey else commgroup.keygen(rng if seeded else None)
    for step, r in enumerate(ladder):
        if step and rekey:
            msg1 = channel.descend(msg1.session_id, r)
        k = fixed if fixed is not None else commgroup.keygen(rng if seeded else None)
        session, msg2 = client_round2(msg1, tokens, Strategy.BEST, k, rng, resolution=r)
        result = client_finalize(session, channel.exchange(msg2))
        cards[r] = result.cardinality_by_resolution[r]
        client_sizes.update(result.client_set_size_by_resolution)
        if cards[r] > 0:
            break
    return MatchResult(cards, server_sizes, Strategy.BEST, r, client_sizes)


def run_match(channel: Channel, tokens: TokenSet, strategy: Strategy = Strategy.BEST,
              key: SecretKey | None = None, rng: random.Random | None = None, rekey: bool = True,
              descend: bool = True) -> MatchResult:
    """Client side of a full match.  BEST descends unless ``descend`` is False."""
    strategy = Strategy(strategy)
    if strategy is Strategy.BEST and descend:
        return best_resolution_descent(channel, tokens, key, rng, rekey)
    msg1 = channel.open()
    session, msg2 = client_round2(msg1, tokens, strategy, key, rng)
    return client_finalize(session, channel.exchange(msg2))
