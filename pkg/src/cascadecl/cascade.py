"""Turn the tweets of one news item into a labeled propagation graph.

Node 0 is a virtual news node linked to the root of every cascade; tweet
nodes follow in global ``(timestamp_s, tweet_id)`` order. Edges inside a
cascade are inferred from mentions, a posting time window and, optionally,
follower relations, because the platform only reports the root of a retweet.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionMismatch, EmptyResult, MixedNews, OrphanRetweet, UnknownUser
from .records import TweetRecord, UserProfile

DEFAULT_WINDOW_H = 5.0

Edge = tuple[int, int]


@dataclass(frozen=True)
class Cascade:
    root_tweet_id: str
    tweets: tuple[TweetRecord, ...]

    def __len__(self) -> int:
        return len(self.tweets)


@dataclass(frozen=True)
class ClipSpec:
    """Early-detection bound. Both limits present means both apply; ``math.inf`` disables one."""

    max_tweets: int | None = None
    max_hours: float | None = None

    def __post_init__(self):
        if self.max_tweets is None and self.max_hours is None:
            raise ConfigError("ClipSpec needs max_tweets or max_hours")
        if self.max_tweets is not None and self.max_tweets < 1:
            raise ConfigError("max_tweets must be >= 1")
        if self.max_hours is not None and self.max_hours <= 0:
            raise ConfigError("max_hours must be > 0")

    def label(self) -> str:
        parts = []
        if self.max_tweets is not None:
            parts.append(f"{self.max_tweets}t")
        if self.max_hours is not None:
            parts.append(f"{self.max_hours:g}h")
        return "+".join(parts)

    def to_dict(self) -> dict:
        return {"max_tweets": self.max_tweets, "max_hours": self.max_hours}


@dataclass
class PropagationGraph:
    news_id: str
    n: int
    edges: tuple[Edge, ...]
    features: np.ndarray
    label: int
    node_meta: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        if self.edges:
            src, dst = zip(*self.edges)
            A[list(src), list(dst)] = 1.0
        return A

    def permuted(self, perm: Sequence[int]) -> "PropagationGraph":
        """Relabel node ``i`` as ``perm[i]``. Used for invariance checks."""
        perm = list(perm)
        inv = np.argsort(perm)
        feats = self.features[inv]
        edges = tuple(sorted((perm[s], perm[t]) for s, t in self.edges))
        meta = [self.node_meta[i] for i in inv] if self.node_meta else []
        return PropagationGraph(self.news_id, self.n, edges, feats, self.label, meta)


def cascade_sort_key(t: TweetRecord) -> tuple[int, str]:
    return t.sort_key


def group_cascades(tweets: Sequence[TweetRecord]) -> list[Cascade]:
    """Group tweets of one news item into cascades, roots first then retweets by time."""
    news = {t.news_id for t in tweets}
    if len(news) > 1:
        raise MixedNews(f"tweets span several news items: {sorted(news)[:5]}")
    roots = {t.tweet_id: t for t in tweets if t.is_root}
    members: dict[str, list[TweetRecord]] = {rid: [] for rid in roots}
    for t in tweets:
        if t.is_root:
            continue
        if t.root_tweet_id not in members:
            raise OrphanRetweet(f"tweet {t.tweet_id} references missing root {t.root_tweet_id}")
        members[t.root_tweet_id].append(t)
    cascades = []
    for rid in sorted(roots, key=lambda r: roots[r].sort_key):
        root = roots[rid]
        rest = sorted(members[rid], key=cascade_sort_key)
        if rest and rest[0].timestamp_s < root.timestamp_s:
            raise DataError(f"retweet {rest[0].tweet_id} predates its root {rid}")
        cascades.append(Cascade(rid, (root, *rest)))
    return cascades


def infer_edges(cascade: Cascade, users: Mapping[str, UserProfile], time_window_h: float = DEFAULT_WINDOW_H,
                use_follow: bool = False) -> set[tuple[str, str]]:
    """Directed tweet-id pairs ``(earlier, later)`` within one cascade.

    An edge i -> j exists when tweet i mentions j's author, or tweet i is
    public and j follows within the window, or (with ``use_follow``) j's
    author follows i's author. Every eligible earlier tweet gets an edge, not
    just the nearest one.
    """
    if not 1.0 <= time_window_h <= 10.0:
        raise ConfigError(f"time_window_h must lie in [1, 10], got {time_window_h}")
    tweets = cascade.tweets
    for t in tweets:
        if t.user_id not in users:
            raise UnknownUser(f"tweet {t.tweet_id} by unknown user {t.user_id}")
    window = time_window_h * 3600.0
    edges: set[tuple[str, str]] = set()
    for j in range(1, len(tweets)):
        tj = tweets[j]
        follows_j = users[tj.user_id].follows if use_follow else ()
        for i in range(j):
            ti = tweets[i]
            if (tj.user_id in ti.mentioned_user_ids
                    or (ti.is_public and tj.timestamp_s - ti.timestamp_s <= window)
                    or ti.user_id in follows_j):
                edges.add((ti.tweet_id, tj.tweet_id))
    return edges


def assemble_graph(news_id: str, label: int, cascades: Sequence[Cascade],
                   edge_sets: Sequence[Iterable[tuple[str, str]]],
                   feature_rows: Mapping[str, np.ndarray]) -> PropagationGraph:
    """Join cascades through the news node and attach per-tweet feature rows."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    if len(edge_sets) != len(cascades):
        raise DimensionMismatch(f"{len(edge_sets)} edge sets for {len(cascades)} cascades")
    ordered = sorted((t for c in cascades for t in c.tweets), key=cascade_sort_key)
    index = {t.tweet_id: k + 1 for k, t in enumerate(ordered)}
    if len(index) != len(ordered):
        raise DataError(f"news {news_id}: duplicate tweet ids")
    dims = {np.shape(feature_rows[t.tweet_id]) for t in ordered if t.tweet_id in feature_rows}
    if len(dims) != 1 or any(t.tweet_id not in feature_rows for t in ordered):
        raise DimensionMismatch(f"news {news_id}: need one feature row per tweet, all the same length")
    (shape,) = dims
    if len(shape) != 1:
        raise DimensionMismatch(f"feature rows must be vectors, got shape {shape}")
    n = len(ordered) + 1
    feats = np.zeros((n, shape[0]))
    for t in ordered:
        feats[index[t.tweet_id]] = feature_rows[t.tweet_id]
    edges = {(0, index[c.root_tweet_id]) for c in cascades}
    for c, es in zip(cascades, edge_sets):
        members = {t.tweet_id for t in c.tweets}
        for s, d in es:
            if s not in members or d not in members:
                raise DataError(f"edge {s}->{d} leaves its cascade")
            edges.add((index[s], index[d]))
    meta = [None] + [(t.tweet_id, t.user_id, t.timestamp_s) for t in ordered]
    return PropagationGraph(news_id, n, tuple(sorted(edges)), feats, int(label), meta)


def clip_graph(tweets: Sequence[TweetRecord], spec: ClipSpec) -> list[TweetRecord]:
    """Keep the time-ordered prefix within both bounds of ``spec``.

    The hour bound is inclusive and measured from the earliest tweet.
    """
    if not tweets:
        raise EmptyResult("no tweets to clip")
    keep = list(tweets)
    if spec.max_tweets is not None and spec.max_tweets < len(keep):
        keep = keep[:int(spec.max_tweets)]
    if spec.max_hours is not None:
        limit = tweets[0].timestamp_s + spec.max_hours * 3600.0
        keep = [t for t in keep if t.timestamp_s <= limit]
    if not keep:
        raise EmptyResult("clip bounds removed every tweet")
    return keep


def drop_orphans(tweets: Sequence[TweetRecord]) -> list[TweetRecord]:
    """Remove retweets whose root is not in ``tweets`` (only possible after clipping on tied timestamps)."""
    roots = {t.tweet_id for t in tweets if t.is_root}
    return [t for t in tweets if t.is_root or t.root_tweet_id in roots]

