"""Per-node features: user-profile counts and timeline mention-graph statistics."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NegativeOffset, UnknownUser
from .records import TIMELINE_CAP, TweetRecord, UserProfile

PROFILE_COLUMNS = ("verified", "created_months", "followers", "friends", "lists", "favourites", "statuses",
                   "tweet_offset_s")
TIMELINE_COLUMNS = ("in_degree", "out_degree", "weighted_in", "weighted_out", "hop2_in", "hop2_out",
                    "timeline_tweets")


class FeatureMode(str, enum.Enum):
    PROFILE = "profile"
    TIMELINE = "timeline"
    COMBINED = "combined"

    @property
    def dim(self) -> int:
        return {"profile": 8, "timeline": 7, "combined": 15}[self.value]

    @property
    def columns(self) -> tuple[str, ...]:
        if self is FeatureMode.PROFILE:
            return PROFILE_COLUMNS
        if self is FeatureMode.TIMELINE:
            return TIMELINE_COLUMNS
        return PROFILE_COLUMNS + TIMELINE_COLUMNS

    @property
    def binary_columns(self) -> tuple[int, ...]:
        return () if self is FeatureMode.TIMELINE else (0,)


def profile_features(user: UserProfile, tweet: TweetRecord, t0: int) -> np.ndarray:
    offset = tweet.timestamp_s - t0
    if offset < 0:
        raise NegativeOffset(f"tweet {tweet.tweet_id} is {-offset}s before the first tweet of its news item")
    return np.array([
        1.0 if user.verified else 0.0,
        user.created_months,
        user.followers,
        user.friends,
        user.lists,
        user.favourites,
        user.statuses,
        offset,
    ], dtype=np.float64)


@dataclass
class MentionGraph:
    nodes: set[str] = field(default_factory=set)
    weights: dict[tuple[str, str], int] = field(default_factory=dict)

    def successors(self, u: str) -> set[str]:
        return self._out.get(u, set())

    def predecessors(self, u: str) -> set[str]:
        return self._in.get(u, set())

    def __post_init__(self):
        self._out: dict[str, set[str]] = defaultdict(set)
        self._in: dict[str, set[str]] = defaultdict(set)
        for (a, b) in self.weights:
            self._out[a].add(b)
            self._in[b].add(a)


def build_mention_graph(timelines: Mapping[str, Sequence[Sequence[str]]]) -> MentionGraph:
    """Weighted mention graph; ``timelines`` maps a user to the mention lists of their timeline tweets."""
    nodes: set[str] = set()
    weights: dict[tuple[str, str], int] = defaultdict(int)
    for user, tweets in timelines.items():
        nodes.add(user)
        for mentioned in tweets:
            for m in mentioned:
                nodes.add(m)
                if m != user:
                    weights[(user, m)] += 1
    return MentionGraph(nodes, dict(weights))


def _hop2(first: set[str], step, user: str) -> int:
    second: set[str] = set()
    for v in first:
        second |= step(v)
    second -= first
    second.discard(user)
    return len(second)


def timeline_features(g: MentionGraph, user: str, timeline_count: int) -> np.ndarray:
    """Degree, weighted degree and exact-distance-2 neighbour counts in both directions."""
    if user not in g.nodes:
        raise UnknownUser(f"user {user} not in mention graph")
    ins, outs = g.predecessors(user), g.successors(user)
    w_in = sum(g.weights[(v, user)] for v in ins)
    w_out = sum(g.weights[(user, v)] for v in outs)
    return np.array([
        len(ins),
        len(outs),
        w_in,
        w_out,
        _hop2(ins, g.predecessors, user),
        _hop2(outs, g.successors, user),
        min(timeline_count, TIMELINE_CAP),
    ], dtype=np.float64)


def assemble_features(mode: FeatureMode, profile_rows: Sequence[np.ndarray] | None,
                      timeline_rows: Sequence[np.ndarray | None] | None) -> tuple[np.ndarray, int]:
    """Stack per-tweet rows under a news-node row of zeros.

    Returns the ``(n_tweets + 1) x d`` matrix and the number of tweet rows
    whose timeline data was missing (left as zeros).
    """
    mode = FeatureMode(mode)
    n = len(profile_rows) if profile_rows is not None else len(timeline_rows)
    out = np.zeros((n + 1, mode.dim))
    missing = 0
    for k in range(n):
        parts = []
        if mode is not FeatureMode.TIMELINE:
            parts.append(np.asarray(profile_rows[k], dtype=np.float64))
        if mode is not FeatureMode.PROFILE:
            row = timeline_rows[k] if timeline_rows is not None else None
            if row is None:
                missing += 1
                row = np.zeros(len(TIMELINE_COLUMNS))
            parts.append(np.asarray(row, dtype=np.float64))
        out[k + 1] = np.concatenate(parts)
    return out, missing


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    exempt: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "exempt": list(self.exempt)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   tuple(d.get("exempt", ())))

    @classmethod
    def identity(cls, d: int) -> "NormStats":
        return cls(np.zeros(d), np.zeros(d), ())

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Z-score tweet rows; row 0 (news node) stays zero, constant and exempt columns pass through."""
        out = features.copy()
        scale = np.where(self.std > 0, self.std, 1.0)
        shift = np.where(self.std > 0, self.mean, 0.0)
        out[1:] = (features[1:] - shift) / scale
        return out


def fit_norm(matrices: Sequence[np.ndarray], mode: FeatureMode) -> NormStats:
    """Population mean/std per column over the tweet rows of the given (training) matrices."""
    mode = FeatureMode(mode)
    rows = [m[1:] for m in matrices if m.shape[0] > 1]
    if not rows:
        return NormStats.identity(mode.dim)
    stacked = np.vstack(rows)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    for c in mode.binary_columns:
        mean[c], std[c] = 0.0, 0.0
    return NormStats(mean, std, mode.binary_columns)


def normalize_dataset(matrices: Sequence[np.ndarray], mode: FeatureMode) -> tuple[list[np.ndarray], NormStats]:
    stats = fit_norm(matrices, mode)
    return [stats.apply(m) for m in matrices], stats
