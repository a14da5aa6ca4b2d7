"""GPS traces to deduplicated geohash token sets.

Tokens are plain strings: ``"<geohash>"``, ``"<geohash>@HH"`` (UTC hour of day)
or ``"<geohash>@<epoch hour>"``. A :class:`TokenSet` carries the resolution
and time mode shared by all of its tokens.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from psifeed.errors import InputError

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {c: i for i, c in enumerate(BASE32)}

MIN_RESOLUTION = 1
MAX_RESOLUTION = 9


class TimeMode(str, enum.Enum):
    NONE = "none"
    HOUR_OF_DAY = "hour_of_day"
    ABSOLUTE_HOUR = "absolute_hour"


class GeoPoint(NamedTuple):
    lat: float
    lon: float
    ts: int = 0


def check_resolution(r: int) -> int:
    if isinstance(r, bool) or not isinstance(r, int):
        raise InputError(f"resolution must be an integer, got {r!r}")
    if not MIN_RESOLUTION <= r <= MAX_RESOLUTION:
        raise InputError(f"resolution {r} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]")
    return r


def check_point(p: GeoPoint) -> None:
    if not -90.0 <= p.lat <= 90.0:
        raise InputError(f"latitude {p.lat} out of range")
    if not -180.0 <= p.lon <= 180.0:
        raise InputError(f"longitude {p.lon} out of range")
    if int(p.ts) != p.ts or p.ts < 0:
        raise InputError(f"timestamp {p.ts} must be a non-negative integer")


def _quantize(value: float, lo: float, span: float, nbits: int) -> int:
    top = (1 << nbits) - 1
    idx = min(max(int((value - lo) / span * (1 << nbits)), 0), top)
    # cell edges are exact dyadics; fix up float rounding next to an edge
    while idx > 0 and value < lo + idx * span / (1 << nbits):
        idx -= 1
    while idx < top and value >= lo + (idx + 1) * span / (1 << nbits):
        idx += 1
    # the upper edge (lat 90 / lon 180) belongs to the last cell
    return idx


def encode_geohash(lat: float, lon: float, r: int) -> str:
    """Standard base-32 geohash of ``r`` characters (even bits carry longitude)."""
    check_resolution(r)
    check_point(GeoPoint(lat, lon))
    nbits = 5 * r
    lon_bits = (nbits + 1) // 2
    lat_bits = nbits // 2
    x = _quantize(lon, -180.0, 360.0, lon_bits)
    y = _quantize(lat, -90.0, 180.0, lat_bits)
    code = 0
    for i in range(nbits):
        if i % 2 == 0:
            lon_bits -= 1
            bit = (x >> lon_bits) & 1
        else:
            lat_bits -= 1
            bit = (y >> lat_bits) & 1
        code = (code << 1) | bit
    return "".join(BASE32[(code >> (5 * (r - 1 - i))) & 31] for i in range(r))


def decode_bbox(geohash: str) -> tuple[float, float, float, float]:
    """Return ``(lat_min, lat_max, lon_min, lon_max)`` of a geohash cell."""
    lat_lo, lat_hi, lon_lo, lon_hi = -90.0, 90.0, -180.0, 180.0
    even = True
    for ch in geohash:
        try:
            v = _DECODE[ch]
        except KeyError:
            raise InputError(f"invalid geohash character {ch!r}") from None
        for shift in range(4, -1, -1):
            bit = (v >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                lon_lo, lon_hi = (mid, lon_hi) if bit else (lon_lo, mid)
            else:
                mid = (lat_lo + lat_hi) / 2
                lat_lo, lat_hi = (mid, lat_hi) if bit else (lat_lo, mid)
            even = not even
    return lat_lo, lat_hi, lon_lo, lon_hi


def split_token(token: str) -> tuple[str, str]:
    """Split a token into its geohash part and its time suffix ("" or "@..")."""
    gh, sep, hour = token.partition("@")
    return gh, sep + hour


def token_resolution(token: str) -> int:
    gh, _ = split_token(token)
    if not gh or any(c not in _DECODE for c in gh):
        raise InputError(f"malformed token {token!r}")
    return check_resolution(len(gh))


def truncate(token: str, r: int) -> str:
    """Coarsen a token to resolution ``r``; any time suffix is kept as is."""
    check_resolution(r)
    gh, suffix = split_token(token)
    if r > token_resolution(token):
        raise InputError(f"cannot truncate {token!r} to finer resolution {r}")
    return gh[:r] + suffix


def make_token(p: GeoPoint, r: int, mode: TimeMode) -> str:
    gh = encode_geohash(p.lat, p.lon, r)
    if mode is TimeMode.NONE:
        return gh
    hour = int(p.ts) // 3600
    if mode is TimeMode.HOUR_OF_DAY:
        return f"{gh}@{hour % 24:02d}"
    return f"{gh}@{hour}"


@dataclass(frozen=True)
class TokenSet:
    tokens: frozenset[str]
    resolution: int
    time_mode: TimeMode = TimeMode.NONE

    def __post_init__(self):
        check_resolution(self.resolution)
        object.__setattr__(self, "tokens", frozenset(self.tokens))
        object.__setattr__(self, "time_mode", TimeMode(self.time_mode))
        for t in self.tokens:
            if token_resolution(t) != self.resolution:
                raise InputError(f"token {t!r} is not at resolution {self.resolution}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(sorted(self.tokens))

    def truncated(self, r: int) -> "TokenSet":
        return TokenSet(frozenset(truncate(t, r) for t in self.tokens), r, self.time_mode)


def tokenize_trace(points: Iterable[GeoPoint], r: int, mode: TimeMode = TimeMode.HOUR_OF_DAY) -> TokenSet:
    mode = TimeMode(mode)
    check_resolution(r)
    toks = set()
    for p in points:
        p = GeoPoint(*p)
        check_point(p)
        toks.add(make_token(p, r, mode))
    return TokenSet(frozenset(toks), r, mode)


def multi_res_expand(s: TokenSet, r_min: int) -> dict[int, TokenSet]:
    """Token sets at every resolution from ``s.resolution`` down to ``r_min``."""
    check_resolution(r_min)
    if r_min > s.resolution:
        raise InputError(f"r_min {r_min} exceeds set resolution {s.resolution}")
    return {r: s.truncated(r) for r in range(s.resolution, r_min - 1, -1)}


# -- files -----------------------------------------------------------------

def read_trace_csv(path: str | Path) -> list[GeoPoint]:
    """Read a ``lat,lon,ts`` CSV; any malformed row raises with its line number."""
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["lat", "lon", "ts"]:
            raise InputError(f"{path}:1: expected header 'lat,lon,ts'")
        for row in reader:
            line = reader.line_num
            if len(row) != 3:
                raise InputError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            try:
                p = GeoPoint(float(row[0]), float(row[1]), int(row[2]))
                check_point(p)
            except (ValueError, InputError) as exc:
                raise InputError(f"{path}:{line}: {exc}") from None
            points.append(p)
    return points


def write_trace_csv(path: str | Path, points: Sequence[GeoPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "ts"])
        for p in points:
            w.writerow([repr(float(p.lat)), repr(float(p.lon)), int(p.ts)])


def write_token_file(path: str | Path, s: TokenSet) -> None:
    doc = {"resolution": s.resolution, "time_mode": s.time_mode.value, "tokens": sorted(s.tokens)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_token_file(path: str | Path) -> TokenSet:
    doc: Mapping = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return TokenSet(frozenset(doc["tokens"]), int(doc["resolution"]), TimeMode(doc["time_mode"]))
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: bad token file: {exc}") from None
