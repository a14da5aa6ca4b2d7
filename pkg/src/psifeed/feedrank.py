"""Feed weights from match results.

A friend's raw score is their intersection count divided by the square root
of the size of the set they shared, optionally weighted toward finer
resolutions.  Scores become a Laplace-smoothed distribution over friends.
"""
from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from psifeed._rng import make_rng
from psifeed.errors import InputError
from psifeed.protocol import MatchResult, Strategy

DEFAULT_ALPHA = 0.1
DEFAULT_GAMMA = 1.0


@dataclass(frozen=True)
class FriendScore:
    friend_id: str
    cardinality: int
    friend_set_size: int
    matched_resolution: int | None
    raw_score: float


@dataclass(frozen=True)
class FeedDistribution:
    entries: list[tuple[str, float]]
    alpha: float = DEFAULT_ALPHA
    resolution_weight_gamma: float = DEFAULT_GAMMA

    def probability(self, friend_id: str) -> float:
        for fid, p in self.entries:
            if fid == friend_id:
                return p
        raise KeyError(friend_id)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)


def raw_score(cardinality: int, set_size: int, weight: float = 1.0) -> float:
    if cardinality < 0 or set_size < 0:
        raise InputError("cardinality and set size must be non-negative")
    if set_size == 0:
        return 0.0
    return weight * cardinality / math.sqrt(set_size)


def _check_gamma(gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise InputError(f"gamma {gamma} outside (0, 1]")
    return float(gamma)


def score(m: MatchResult, friend_id: str = "", gamma: float = DEFAULT_GAMMA, r_max: int | None = None) -> FriendScore:
    """Score one friend from the match the client ran against them.

    Resolution ``r`` is weighted by ``gamma ** (r_max - r)``; ``r_max``
    defaults to the friend's finest offered resolution.  An all-resolutions
    match sums the weighted per-level scores.
    """
    gamma = _check_gamma(gamma)
    sizes = m.server_set_size_by_resolution
    if r_max is None:
        r_max = max(sizes) if sizes else max(m.cardinality_by_resolution, default=0)

    def term(r):
        if r not in sizes:
            raise InputError(f"no friend set size for resolution {r}")
        return raw_score(m.cardinality_by_resolution[r], sizes[r], gamma ** (r_max - r))

    if m.strategy is Strategy.BEST:
        r = m.stop_resolution if m.stop_resolution is not None else max(m.cardinality_by_resolution)
        return FriendScore(friend_id, m.cardinality_by_resolution[r], sizes.get(r, 0), r, term(r))
    levels = sorted(m.cardinality_by_resolution, reverse=True)
    total = sum(term(r) for r in levels)
    matched = next((r for r in levels if m.cardinality_by_resolution[r] > 0), None)
    top = levels[0] if levels else None
    return FriendScore(friend_id, sum(m.cardinality_by_resolution.values()),
                       sizes.get(top, 0) if top is not None else 0, matched, total)


def feed_distribution(scores: Sequence[FriendScore], alpha: float = DEFAULT_ALPHA,
                      gamma: float = DEFAULT_GAMMA) -> FeedDistribution:
    if alpha < 0:
        raise InputError(f"alpha {alpha} must be non-negative")
    if not scores:
        raise InputError("no friends to rank")
    ids = [s.friend_id for s in scores]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate friend ids")
    weights = [s.raw_score + alpha for s in scores]
    total = math.fsum(weights)
    if total == 0:
        probs = [1.0 / len(scores)] * len(scores)
    else:
        probs = [w / total for w in weights]
    return FeedDistribution(list(zip(ids, probs)), alpha, gamma)


def sample_feed(d: FeedDistribution, n_slots: int, seed: int | None = None,
                rng: random.Random | None = None) -> list[str]:
    """Fill ``n_slots`` feed slots i.i.d. from ``d``."""
    if n_slots < 0:
        raise InputError("n_slots must be non-negative")
    if n_slots == 0:
        return []
    rng = rng if rng is not None else (random.Random(seed) if seed is not None else make_rng())
    ids = [fid for fid, _ in d.entries]
    return rng.choices(ids, weights=[p for _, p in d.entries], k=n_slots)


def ranking_rows(d: FeedDistribution, scores: Iterable[FriendScore]) -> list[tuple]:
    by_id = {s.friend_id: s for s in scores}
    rows = [(fid, by_id[fid].cardinality, by_id[fid].friend_set_size, by_id[fid].raw_score, p)
            for fid, p in d.entries]
    rows.sort(key=lambda row: (-row[4], row[0]))
    return rows


def ranking_csv(d: FeedDistribution, scores: Iterable[FriendScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["friend_id", "cardinality", "set_size", "raw_score", "probability"])
    for fid, card, size, raw, p in ranking_rows(d, scores):
        w.writerow([fid, card, size, repr(raw), repr(p)])
    return buf.getvalue()


def append_match(path: str | Path, friend_id: str, m: MatchResult) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"friend_id": friend_id, **m.to_dict()}) + "\n")


def load_matches(path: str | Path) -> list[tuple[str, MatchResult]]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            out.append((str(doc["friend_id"]), MatchResult.from_dict(doc)))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}:{n}: bad match record: {exc}") from None
    return out
