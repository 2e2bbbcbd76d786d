"""Synthetic propagation data in structurally distinct regimes.

The generator emits raw tweet/user/timeline records, which then go through
the same graph-building pipeline as real data. Cascades grow as a
Galton-Watson process with Poisson offspring and exponential reposting
delays; tweets are released in time order until ``max_tweets`` is reached.

``fake_shift`` maps a feature to the shift applied for fake items:

* count features (``followers``, ``friends``, ``lists``, ``favourites``,
  ``statuses``) and ``time_gap``: shift of the log-scale mean, i.e. a
  multiplicative factor ``exp(shift)``;
* ``created_months``: additive shift in months;
* ``verified``: additive shift of the verification probability;
* ``mentions``: additive shift of the per-user timeline mention rate.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cascade import ClipSpec
from .dataset import GraphDataset, build_dataset, save_archive
from .errors import DegenerateRegime
from .features import FeatureMode
from .records import (RawRecords, Timeline, TweetRecord, UserProfile, timeline_to_dict, tweet_to_dict, user_to_dict,
                      write_jsonl)

COUNT_FEATURES = ("followers", "friends", "lists", "favourites", "statuses")
SHIFTABLE = COUNT_FEATURES + ("created_months", "verified", "time_gap", "mentions")

# base distributions, identical for every regime: log-mean and log-sd of each count
_BASE_LOG = {
    "followers": (6.0, 1.0),
    "friends": (5.5, 0.8),
    "lists": (2.0, 1.0),
    "favourites": (7.0, 1.2),
    "statuses": (8.0, 1.0),
}
_BASE_CREATED = (80.0, 30.0)
_BASE_VERIFIED = 0.1
_BASE_MENTION_RATE = 2.0
_NEWS_T0 = 1_500_000_000
DEFAULT_CLIP = ClipSpec(max_tweets=100, max_hours=5.0)


@dataclass(frozen=True)
class RegimeConfig:
    name: str
    n_news: int = 400
    cascade_count_mean: float = 3.0
    cascade_count_dispersion: float = 2.0
    branching: float = 1.5
    time_scale_s: float = 600.0
    fake_shift: dict = field(default_factory=dict)
    mention_prob: float = 0.1
    private_prob: float = 0.1
    label_balance: float = 0.5
    max_tweets: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.n_news < 8:
            raise DegenerateRegime(f"n_news must be >= 8, got {self.n_news}")
        if not 0.0 < self.label_balance < 1.0:
            raise DegenerateRegime("label_balance must lie in (0, 1)")
        if self.cascade_count_mean < 1.0 or self.max_tweets < 1:
            raise DegenerateRegime("expected cascade size is zero")
        if self.branching < 0 or self.time_scale_s <= 0 or self.cascade_count_dispersion <= 0:
            raise DegenerateRegime("branching >= 0, time_scale_s > 0 and dispersion > 0 required")
        unknown = set(self.fake_shift) - set(SHIFTABLE)
        if unknown:
            raise DegenerateRegime(f"unknown fake_shift features: {sorted(unknown)}")
        moved = sum(1 for v in self.fake_shift.values() if v != 0)
        if 0 < moved < 3:
            raise DegenerateRegime("a nonzero fake_shift must move at least 3 features")

    def to_dict(self) -> dict:
        return asdict(self)


def default_regimes() -> tuple[RegimeConfig, RegimeConfig]:
    """Regime A: few deep cascades, fast reposting. Regime B: many shallow cascades, slow reposting.

    B moves A's fake-marking user features the other way, so a model fitted
    to one regime misreads the other. B also marks fakes on features that A
    leaves alone (favourites, friends, account age), which gives a single
    model room to serve both regimes.
    """
    a = RegimeConfig(
        name="A", n_news=400, cascade_count_mean=3.0, cascade_count_dispersion=2.0, branching=1.5,
        time_scale_s=600.0, mention_prob=0.15, seed=101,
        fake_shift={"followers": -1.0, "lists": -1.0, "statuses": 0.8, "verified": -0.08, "time_gap": -0.5},
    )
    b = RegimeConfig(
        name="B", n_news=400, cascade_count_mean=12.0, cascade_count_dispersion=4.0, branching=0.3,
        time_scale_s=900.0, mention_prob=0.15, seed=202,
        fake_shift={"followers": 0.9, "lists": 0.9, "statuses": -0.7, "favourites": 1.4, "friends": -1.0,
                    "created_months": -30.0, "time_gap": 0.5},
    )
    return a, b


def _user(rng: np.random.Generator, uid: str, shift: dict) -> UserProfile:
    counts = {}
    for name in COUNT_FEATURES:
        mu, sd = _BASE_LOG[name]
        counts[name] = int(np.exp(rng.normal(mu + shift.get(name, 0.0), sd)))
    created = int(max(0.0, round(rng.normal(_BASE_CREATED[0] + shift.get("created_months", 0.0), _BASE_CREATED[1]))))
    p_ver = float(np.clip(_BASE_VERIFIED + shift.get("verified", 0.0), 0.0, 1.0))
    return UserProfile(uid, bool(rng.random() < p_ver), created, **counts)


def _news_item(cfg: RegimeConfig, index: int) -> tuple[int, list[TweetRecord], list[UserProfile], list[Timeline]]:
    rng = np.random.default_rng([cfg.seed, index])
    news_id = f"{cfg.name}-{index:05d}"
    label = int(rng.random() < cfg.label_balance)
    shift = cfg.fake_shift if label == 1 else {}
    gap = cfg.time_scale_s * float(np.exp(shift.get("time_gap", 0.0)))

    extra = 0
    if cfg.cascade_count_mean > 1.0:
        k = cfg.cascade_count_dispersion
        m = cfg.cascade_count_mean - 1.0
        extra = int(rng.negative_binomial(k, k / (k + m)))
    n_roots = 1 + extra

    # event queue of (time, seq, parent_seq, root_seq); released in time order
    heap: list[tuple[int, int, int, int]] = []
    seq = 0
    for _ in range(n_roots):
        heapq.heappush(heap, (int(rng.exponential(gap)), seq, -1, seq))
        seq += 1
    released: list[tuple[int, int, int, int]] = []
    while heap and len(released) < cfg.max_tweets:
        ev = heapq.heappop(heap)
        released.append(ev)
        t, s, _, root = ev
        for _ in range(rng.poisson(cfg.branching)):
            heapq.heappush(heap, (t + 1 + int(rng.exponential(gap)), seq, s, root))
            seq += 1

    users, uid_of, mentions = [], {}, {}
    for t, s, parent, root in released:
        uid = f"{news_id}-u{s}"
        uid_of[s] = uid
        users.append(_user(rng, uid, shift))
        mentions[s] = set()
    for t, s, parent, root in released:
        if parent >= 0 and rng.random() < cfg.mention_prob:
            mentions[parent].add(uid_of[s])

    tweets = []
    for t, s, parent, root in released:
        tweets.append(TweetRecord(
            tweet_id=f"{news_id}-t{s}",
            news_id=news_id,
            user_id=uid_of[s],
            timestamp_s=_NEWS_T0 + t,
            root_tweet_id=None if parent < 0 else f"{news_id}-t{root}",
            mentioned_user_ids=frozenset(mentions[s]),
            is_public=bool(rng.random() >= cfg.private_prob),
        ))

    # timeline mentions among the item's users
    ids = [u.user_id for u in users]
    rate = max(0.0, _BASE_MENTION_RATE + shift.get("mentions", 0.0))
    timelines = []
    for u in ids:
        count = int(min(200, rng.poisson(60)))
        k = int(rng.poisson(rate)) if len(ids) > 1 else 0
        picks = [ids[int(j)] for j in rng.integers(0, len(ids), size=k)]
        timelines.append(Timeline(u, tuple((p,) for p in picks if p != u), count))
    return label, tweets, users, timelines


def generate_records(cfg: RegimeConfig) -> RawRecords:
    cfg.validate()
    out = RawRecords([], {}, {}, {})
    for i in range(cfg.n_news):
        label, tweets, users, timelines = _news_item(cfg, i)
        out.labels[tweets[0].news_id] = label
        out.tweets.extend(tweets)
        out.users.update((u.user_id, u) for u in users)
        out.timelines.update((t.user_id, t) for t in timelines)
    return out


def generate(cfg: RegimeConfig, *, mode: FeatureMode = FeatureMode.PROFILE, clip: ClipSpec | None = DEFAULT_CLIP,
             time_window_h: float = 5.0) -> tuple[GraphDataset, dict, RawRecords]:
    """Generate records, build graphs through the standard pipeline, and summarize."""
    records = generate_records(cfg)
    ds = build_dataset(records.tweets, records.users, records.labels, clip=clip, time_window_h=time_window_h,
                       mode=mode, timelines=records.timelines, strict=True)
    manifest = {"regime": cfg.to_dict(), "statistics": ds.stats()}
    return ds, manifest, records


def write_regime(cfg: RegimeConfig, directory: str | Path, **build_kw) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds, manifest, rec = generate(cfg, **build_kw)
    write_jsonl(directory / "tweets.jsonl", (tweet_to_dict(t) for t in rec.tweets))
    write_jsonl(directory / "users.jsonl", (user_to_dict(rec.users[k]) for k in sorted(rec.users)))
    write_jsonl(directory / "timelines.jsonl", (timeline_to_dict(rec.timelines[k]) for k in sorted(rec.timelines)))
    write_jsonl(directory / "labels.jsonl", ({"news_id": k, "label": v} for k, v in sorted(rec.labels.items())))
    (directory / "gen-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    save_archive(ds, directory)
    return manifest
