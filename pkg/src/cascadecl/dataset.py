"""Dataset construction from raw records and the on-disk archive format.

An archive is a directory holding ``graphs.bin`` and ``manifest.json``.
``graphs.bin`` layout (little endian)::

    b"PGV1" | u32 graph_count | u32 d
    per graph: u32 id_len | news_id utf-8 | u32 n | u8 label | u32 m
               | m * (u32 src, u32 dst) | n*d float64 row-major features
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cascade import (DEFAULT_WINDOW_H, ClipSpec, PropagationGraph, assemble_graph, clip_graph, drop_orphans,
                      group_cascades, infer_edges)
from .errors import DataError, EmptyResult, OrphanRetweet
from .features import FeatureMode, assemble_features, build_mention_graph, profile_features, timeline_features
from .records import Timeline, TweetRecord, UserProfile

log = logging.getLogger(__name__)

MAGIC = b"PGV1"
FORMAT_VERSION = 1


@dataclass
class GraphDataset:
    graphs: list[PropagationGraph]
    mode: FeatureMode = FeatureMode.PROFILE
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    @property
    def d(self) -> int:
        if self.graphs:
            return self.graphs[0].d
        return FeatureMode(self.mode).dim

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=int)

    def subset(self, idx: Sequence[int]) -> "GraphDataset":
        return GraphDataset([self.graphs[i] for i in idx], self.mode, dict(self.info))

    def stats(self) -> dict:
        n = [g.n for g in self.graphs]
        m = [len(g.edges) for g in self.graphs]
        y = self.labels
        return {
            "graphs": len(self.graphs),
            "fake": int((y == 1).sum()),
            "real": int((y == 0).sum()),
            "mean_nodes": float(np.mean(n)) if n else 0.0,
            "mean_edges": float(np.mean(m)) if m else 0.0,
            "max_nodes": int(max(n)) if n else 0,
        }


def build_graph(news_id: str, label: int, tweets: Sequence[TweetRecord], users: Mapping[str, UserProfile],
                *, clip: ClipSpec | None = None, time_window_h: float = DEFAULT_WINDOW_H, use_follow: bool = False,
                mode: FeatureMode = FeatureMode.PROFILE,
                timelines: Mapping[str, Timeline] | None = None) -> tuple[PropagationGraph, int]:
    """Full pipeline for one news item. Returns the graph and its missing-timeline row count."""
    mode = FeatureMode(mode)
    ordered = sorted(tweets, key=lambda t: t.sort_key)
    if clip is not None:
        # orphans in the input are errors; those created by the clip are not
        if len(drop_orphans(ordered)) != len(ordered):
            group_cascades(ordered)
        ordered = drop_orphans(clip_graph(ordered, clip))
    cascades = group_cascades(ordered)
    edge_sets = [infer_edges(c, users, time_window_h, use_follow) for c in cascades]
    t0 = ordered[0].timestamp_s
    node_order = sorted((t for c in cascades for t in c.tweets), key=lambda t: t.sort_key)

    profile_rows = [profile_features(users[t.user_id], t, t0) for t in node_order]
    timeline_rows = None
    if mode is not FeatureMode.PROFILE:
        timelines = timelines or {}
        present = {t.user_id for t in node_order}
        graph = build_mention_graph({u: timelines[u].mentions for u in sorted(present) if u in timelines})
        timeline_rows = [timeline_features(graph, t.user_id, timelines[t.user_id].timeline_count)
                         if t.user_id in timelines else None for t in node_order]
    feats, missing = assemble_features(mode, profile_rows, timeline_rows)
    rows = {t.tweet_id: feats[k + 1] for k, t in enumerate(node_order)}
    return assemble_graph(news_id, label, cascades, edge_sets, rows), missing


def build_dataset(tweets: Sequence[TweetRecord], users: Mapping[str, UserProfile], labels: Mapping[str, int], *,
                  clip: ClipSpec | None = None, time_window_h: float = DEFAULT_WINDOW_H, use_follow: bool = False,
                  mode: FeatureMode = FeatureMode.PROFILE, timelines: Mapping[str, Timeline] | None = None,
                  strict: bool = False) -> GraphDataset:
    mode = FeatureMode(mode)
    by_news: dict[str, list[TweetRecord]] = defaultdict(list)
    for t in tweets:
        by_news[t.news_id].append(t)
    graphs = []
    dropped_empty = skipped_orphans = unlabeled = missing_timeline = 0
    for news_id in sorted(by_news):
        if news_id not in labels:
            unlabeled += 1
            log.warning("news %s has no label, skipped", news_id)
            continue
        try:
            g, missing = build_graph(news_id, labels[news_id], by_news[news_id], users, clip=clip,
                                     time_window_h=time_window_h, use_follow=use_follow, mode=mode,
                                     timelines=timelines)
        except EmptyResult:
            dropped_empty += 1
            continue
        except OrphanRetweet as exc:
            if strict:
                raise
            skipped_orphans += 1
            log.warning("news %s skipped: %s", news_id, exc)
            continue
        graphs.append(g)
        missing_timeline += missing
    if not graphs:
        raise DataError("no news items")
    info = {
        "mode": mode.value,
        "d": mode.dim,
        "clip": clip.to_dict() if clip else None,
        "time_window_h": time_window_h,
        "use_follow": use_follow,
        "dropped_empty": dropped_empty,
        "skipped_orphans": skipped_orphans,
        "unlabeled": unlabeled,
        "missing_timeline_rows": missing_timeline,
    }
    return GraphDataset(graphs, mode, info)


# -- archive IO ---------------------------------------------------------------


def encode_graphs(graphs: Sequence[PropagationGraph], d: int) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", len(graphs), d))
    for g in graphs:
        if g.d != d:
            raise DataError(f"graph {g.news_id} has d={g.d}, archive d={d}")
        nid = g.news_id.encode("utf-8")
        buf.write(struct.pack("<I", len(nid)))
        buf.write(nid)
        buf.write(struct.pack("<IBI", g.n, g.label, len(g.edges)))
        if g.edges:
            buf.write(np.asarray(g.edges, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(g.features, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_graphs(data: bytes) -> tuple[list[PropagationGraph], int]:
    if data[:4] != MAGIC:
        raise DataError("graphs.bin: bad magic")
    count, d = struct.unpack_from("<II", data, 4)
    pos = 12
    graphs = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        news_id = data[pos:pos + ln].decode("utf-8")
        pos += ln
        n, label, m = struct.unpack_from("<IBI", data, pos)
        pos += 9
        edges = np.frombuffer(data, dtype="<u4", count=2 * m, offset=pos).reshape(m, 2)
        pos += 8 * m
        feats = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d).copy()
        pos += 8 * n * d
        graphs.append(PropagationGraph(news_id, n, tuple((int(s), int(t)) for s, t in edges), feats, int(label)))
    if pos != len(data):
        raise DataError("graphs.bin: trailing bytes")
    return graphs, d


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    """Write via a temp file in the same directory and rename over the target."""
    path = Path(path)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(ds: GraphDataset, directory: str | Path, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write(directory / "graphs.bin", encode_graphs(ds.graphs, ds.d))
    manifest = {"format": "PGV1", "version": FORMAT_VERSION, **ds.info, **ds.stats()}
    manifest["mode"] = FeatureMode(ds.mode).value
    manifest["d"] = ds.d
    if extra:
        manifest.update(extra)
    atomic_write(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_archive(directory: str | Path) -> GraphDataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        data = (directory / "graphs.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"not a dataset archive: {exc.filename} missing") from None
    graphs, d = decode_graphs(data)
    mode = FeatureMode(manifest.get("mode", "profile"))
    return GraphDataset(graphs, mode, manifest)
