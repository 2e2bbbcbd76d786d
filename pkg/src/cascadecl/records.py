"""Raw social records and their line-delimited JSON readers/writers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ParseError

TIMELINE_CAP = 200


@dataclass(frozen=True)
class TweetRecord:
    tweet_id: str
    news_id: str
    user_id: str
    timestamp_s: int
    root_tweet_id: str | None = None
    mentioned_user_ids: frozenset[str] = frozenset()
    is_public: bool = True

    def __post_init__(self):
        if self.timestamp_s < 0:
            raise ValueError(f"tweet {self.tweet_id}: negative timestamp")

    @property
    def is_root(self) -> bool:
        return self.root_tweet_id is None

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.timestamp_s, self.tweet_id)


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    verified: bool = False
    created_months: int = 0
    followers: int = 0
    friends: int = 0
    lists: int = 0
    favourites: int = 0
    statuses: int = 0
    follows: frozenset[str] = frozenset()

    def __post_init__(self):
        for name in ("created_months", "followers", "friends", "lists", "favourites", "statuses"):
            if getattr(self, name) < 0:
                raise ValueError(f"user {self.user_id}: {name} must be >= 0")


@dataclass(frozen=True)
class Timeline:
    user_id: str
    mentions: tuple[tuple[str, ...], ...] = ()
    timeline_count: int = 0


def parse_timestamp(value) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean is not a timestamp")
    if isinstance(value, (int, float)):
        return int(value)
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _ids(value) -> frozenset[str]:
    return frozenset(str(v) for v in (value or ()))


def tweet_from_dict(d: dict) -> TweetRecord:
    root = d.get("root_tweet_id")
    return TweetRecord(
        tweet_id=str(d["tweet_id"]),
        news_id=str(d["news_id"]),
        user_id=str(d["user_id"]),
        timestamp_s=parse_timestamp(d["timestamp_s"] if "timestamp_s" in d else d["timestamp"]),
        root_tweet_id=None if root in (None, "") else str(root),
        mentioned_user_ids=_ids(d.get("mentioned_user_ids")),
        is_public=bool(d.get("is_public", True)),
    )


def tweet_to_dict(t: TweetRecord) -> dict:
    return {
        "tweet_id": t.tweet_id,
        "news_id": t.news_id,
        "user_id": t.user_id,
        "timestamp_s": t.timestamp_s,
        "root_tweet_id": t.root_tweet_id,
        "mentioned_user_ids": sorted(t.mentioned_user_ids),
        "is_public": t.is_public,
    }


def user_from_dict(d: dict) -> UserProfile:
    return UserProfile(
        user_id=str(d["user_id"]),
        verified=bool(d.get("verified", False)),
        created_months=int(d.get("created_months", 0)),
        followers=int(d.get("followers", 0)),
        friends=int(d.get("friends", 0)),
        lists=int(d.get("lists", 0)),
        favourites=int(d.get("favourites", 0)),
        statuses=int(d.get("statuses", 0)),
        follows=_ids(d.get("follows")),
    )


def user_to_dict(u: UserProfile) -> dict:
    return {
        "user_id": u.user_id,
        "verified": u.verified,
        "created_months": u.created_months,
        "followers": u.followers,
        "friends": u.friends,
        "lists": u.lists,
        "favourites": u.favourites,
        "statuses": u.statuses,
        "follows": sorted(u.follows),
    }


def timeline_from_dict(d: dict) -> Timeline:
    mentions = tuple(tuple(str(m) for m in tweet) for tweet in d.get("mentions", ()))
    count = int(d.get("timeline_count", len(mentions)))
    return Timeline(str(d["user_id"]), mentions, min(count, TIMELINE_CAP))


def timeline_to_dict(t: Timeline) -> dict:
    return {"user_id": t.user_id, "mentions": [list(m) for m in t.mentions], "timeline_count": t.timeline_count}


def label_from_dict(d: dict) -> tuple[str, int]:
    raw = d["label"]
    if isinstance(raw, str):
        key = raw.strip().lower()
        if key in ("fake", "1"):
            return str(d["news_id"]), 1
        if key in ("real", "0"):
            return str(d["news_id"]), 0
        raise ValueError(f"unknown label {raw!r}")
    if raw not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {raw!r}")
    return str(d["news_id"]), int(raw)


def iter_jsonl(path: str | Path, parse) -> Iterator:
    """Yield ``parse(obj)`` for every non-blank line; malformed lines raise :class:`ParseError`."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield parse(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(str(path), line_no, f"{type(exc).__name__}: {exc}") from None


def load_tweets(path) -> list[TweetRecord]:
    return list(iter_jsonl(path, tweet_from_dict))


def load_users(path) -> dict[str, UserProfile]:
    return {u.user_id: u for u in iter_jsonl(path, user_from_dict)}


def load_timelines(path) -> dict[str, Timeline]:
    return {t.user_id: t for t in iter_jsonl(path, timeline_from_dict)}


def load_labels(path) -> dict[str, int]:
    return dict(iter_jsonl(path, label_from_dict))


@dataclass
class RawRecords:
    """Everything needed to (re)build a dataset: tweets, users, timelines and labels."""

    tweets: list[TweetRecord]
    users: dict[str, UserProfile]
    timelines: dict[str, Timeline]
    labels: dict[str, int]


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
