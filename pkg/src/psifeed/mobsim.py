"""Synthetic mobility cohorts and the friendship-correlation harness.

People sleep at a home point, spend working hours at one of a few shared
workplaces and spend evenings at social venues.  Friends meet at a venue
of their own on a day with probability ``min(1, strength * shared_venue_rate)``,
so friendship shows up as co-presence at venue scale.  The harness tokenizes
every trace, computes pairwise intersection sizes (in the clear or through
the full PSI exchange) and correlates them with friendship strength.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
import random
from dataclasses import dataclass, field

import numpy as np

from psifeed import commgroup
from psifeed.bloom import DEFAULT_FP_RATE
from psifeed.errors import InputError
from psifeed.geotoken import GeoPoint, TimeMode, TokenSet, check_resolution, tokenize_trace
from psifeed.protocol import (
    PsiServer, Strategy, client_finalize, client_round2, hashed_levels, server_round3,
)

MAX_STRENGTH = 7
WORK_HOURS = range(9, 17)
EVENING_HOURS = range(18, 22)
GPS_JITTER_DEG = 0.0002  # ~20 m


class UndefinedCorrelation(InputError):
    """Pearson correlation with a constant input."""


@dataclass(frozen=True)
class CohortConfig:
    n_people: int = 60
    days: int = 30
    points_per_day: int = 12
    n_venues: int = 150
    venue_extent_deg: float = 2.0
    friendship_density: float = 0.15
    shared_venue_rate: float = 0.05
    seed: int = 0
    n_workplaces: int = 8
    solo_outing_rate: float = 0.5
    center: tuple[float, float] = (42.36, -71.09)

    def __post_init__(self):
        for name in ("n_people", "days", "points_per_day", "n_venues", "n_workplaces"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        for name in ("friendship_density", "shared_venue_rate", "solo_outing_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.venue_extent_deg <= 90.0:
            raise InputError("venue_extent_deg must lie in (0, 90]")


@dataclass
class Cohort:
    traces: list[list[GeoPoint]]
    strengths: np.ndarray  # symmetric int matrix, zero diagonal
    config: CohortConfig


def _in_box(rng: np.random.Generator, cfg: CohortConfig, n: int) -> np.ndarray:
    half = cfg.venue_extent_deg / 2
    lat = rng.uniform(cfg.center[0] - half, cfg.center[0] + half, n)
    lon = rng.uniform(cfg.center[1] - half, cfg.center[1] + half, n)
    return np.column_stack([np.clip(lat, -90, 90), np.clip(lon, -180, 180)])


def gen_friendships(rng: np.random.Generator, n: int, density: float) -> np.ndarray:
    s = np.zeros((n, n), dtype=int)
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < density:
            s[i, j] = s[j, i] = rng.integers(1, MAX_STRENGTH + 1)
    return s


def gen_cohort(cfg: CohortConfig) -> Cohort:
    """Deterministic synthetic cohort for ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_people
    venues = _in_box(rng, cfg, cfg.n_venues)
    workplaces = _in_box(rng, cfg, cfg.n_workplaces)
    homes = _in_box(rng, cfg, n)
    work_of = rng.integers(0, cfg.n_workplaces, n)
    strengths = gen_friendships(rng, n, cfg.friendship_density)
    friend_pairs = [(i, j) for i, j in itertools.combinations(range(n), 2) if strengths[i, j]]
    haunt = {pair: int(rng.integers(0, cfg.n_venues)) for pair in friend_pairs}

    def point(loc, day, hour):
        lat, lon = loc + rng.normal(0, GPS_JITTER_DEG, 2)
        ts = day * 86400 + hour * 3600 + int(rng.integers(0, 3600))
        return GeoPoint(float(np.clip(lat, -90, 90)), float(np.clip(lon, -180, 180)), ts)

    traces: list[list[GeoPoint]] = [[] for _ in range(n)]
    for day in range(cfg.days):
        weekday = day % 7 < 5
        evening_at: dict[int, int] = {}
        for i in range(n):
            if rng.random() < cfg.solo_outing_rate:
                evening_at[i] = int(rng.integers(0, cfg.n_venues))
        meetings = []
        for pair in friend_pairs:
            p = min(1.0, strengths[pair] * cfg.shared_venue_rate)
            if rng.random() < p:
                meetings.append((pair, int(rng.choice(list(EVENING_HOURS)))))
        for i in range(n):
            hours = rng.choice(24, size=min(cfg.points_per_day, 24), replace=False)
            for h in sorted(int(x) for x in hours):
                if weekday and h in WORK_HOURS:
                    loc = workplaces[work_of[i]]
                elif h in EVENING_HOURS and i in evening_at:
                    loc = venues[evening_at[i]]
                else:
                    loc = homes[i]
                traces[i].append(point(loc, day, h))
        for (i, j), h in meetings:
            v = venues[haunt[(i, j)]]
            traces[i].append(point(v, day, h))
            traces[j].append(point(v, day, h))
    return Cohort(traces, strengths, cfg)


def pearson(x, y) -> float:
    """Product-moment correlation; constant input raises UndefinedCorrelation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("pearson needs two equal-length sequences")
    if len(x) < 2:
        raise UndefinedCorrelation("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def plaintext_cardinalities(sets: list[TokenSet]) -> np.ndarray:
    return np.array([len(a.tokens & b.tokens) for a, b in itertools.combinations(sets, 2)], dtype=int)


def protocol_cardinalities(sets: list[TokenSet], e: float = DEFAULT_FP_RATE, seed: int = 0) -> np.ndarray:
    """Pairwise counts through the full PSI exchange, lower index acting as server.

    Each person keeps one key for the whole run, and a person's hashed tokens
    are computed once; every pair still runs its own three messages.
    """
    rng = random.Random(seed)
    r = sets[0].resolution if sets else 1
    keys = [commgroup.keygen(rng) for _ in sets]
    levels = [hashed_levels(s, r) for s in sets]
    out = []
    for i, server_set in enumerate(sets[:-1]):
        srv = PsiServer(server_set, r, e, keys[i], random.Random(rng.getrandbits(64)), levels=levels[i])
        msg1 = srv.open()
        session = srv.store.get(msg1.session_id)
        for j in range(i + 1, len(sets)):
            client, msg2 = client_round2(msg1, sets[j], Strategy.BEST, keys[j], rng, levels=levels[j])
            result = client_finalize(client, server_round3(session, msg2))
            out.append(result.cardinality_by_resolution[r])
        srv.close(msg1.session_id)
    return np.array(out, dtype=int)


@dataclass(frozen=True)
class ResolutionStats:
    resolution: int
    pearson_all: float
    pearson_nonzero: float
    n_pairs: int
    n_nonzero_pairs: int


@dataclass
class CorrelationReport:
    rows: list[ResolutionStats]
    cardinalities: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def by_resolution(self) -> dict[int, ResolutionStats]:
        return {row.resolution: row for row in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resolution", "pearson_all", "pearson_nonzero", "n_pairs"])
        for row in self.rows:
            w.writerow([row.resolution, f"{row.pearson_all:.6f}", f"{row.pearson_nonzero:.6f}", row.n_pairs])
        return buf.getvalue()

    def to_gnuplot(self) -> str:
        lines = ["# resolution pearson_all pearson_nonzero n_pairs"]
        lines += [f"{row.resolution} {row.pearson_all:.6f} {row.pearson_nonzero:.6f} {row.n_pairs}" for row in self.rows]
        return "\n".join(lines) + "\n"


def _pearson_or_nan(x, y) -> float:
    try:
        return pearson(x, y)
    except UndefinedCorrelation:
        return float("nan")


def validate(cfg: CohortConfig, resolutions=(3, 5, 7, 8), use_protocol: bool = False,
             time_mode: TimeMode = TimeMode.HOUR_OF_DAY, e: float = DEFAULT_FP_RATE,
             cohort: Cohort | None = None) -> CorrelationReport:
    """Correlate pairwise intersection size with friendship strength at each resolution.

    Raises UndefinedCorrelation when every pair has the same strength; a
    resolution at which every pair has the same intersection size reports NaN.
    """
    resolutions = sorted({check_resolution(r) for r in resolutions})
    cohort = cohort if cohort is not None else gen_cohort(cfg)
    n = cfg.n_people
    strengths = np.array([cohort.strengths[i, j] for i, j in itertools.combinations(range(n), 2)], dtype=float)
    if n < 2 or np.all(strengths == strengths[0]):
        raise UndefinedCorrelation("friendship strengths are constant; correlation undefined")
    nz = strengths > 0
    rows = []
    cards = {}
    for r in resolutions:
        sets = [tokenize_trace(t, r, time_mode) for t in cohort.traces]
        c = protocol_cardinalities(sets, e, cfg.seed) if use_protocol else plaintext_cardinalities(sets)
        cards[r] = c
        rows.append(ResolutionStats(r, _pearson_or_nan(c, strengths), _pearson_or_nan(c[nz], strengths[nz]),
                                    len(c), int(nz.sum())))
    return CorrelationReport(rows, cards)
