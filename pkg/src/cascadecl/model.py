"""DiffPool graph classifier over dense per-graph adjacency."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamVector, Tape, Tensor
from .cascade import PropagationGraph
from .errors import ArchitectureMismatch, ConfigError, DataError, EmptyGraph, IncompatibleCheckpoint, ShapeMismatch
from .features import NormStats

CKPT_MAGIC = b"DPCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 8
    pool_layers: int = 3
    hidden_dim: int = 16
    embed_dim: int = 16
    pool_ratio: float = 0.25
    max_nodes: int = 101
    classes: int = 2
    aux_link_weight: float = 0.1
    aux_entropy_weight: float = 0.1
    directed: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.pool_layers <= 4:
            raise ConfigError(f"pool_layers must be 2-4, got {self.pool_layers}")
        for name in ("hidden_dim", "embed_dim"):
            v = getattr(self, name)
            if not 16 <= v <= 128:
                raise ConfigError(f"{name} must be 16-128, got {v}")
        if not 0.0 < self.pool_ratio < 1.0:
            raise ConfigError(f"pool_ratio must lie in (0, 1), got {self.pool_ratio}")
        if self.input_dim < 1 or self.max_nodes < 2:
            raise ConfigError("input_dim >= 1 and max_nodes >= 2 required")
        if self.classes != 2:
            raise ConfigError("only binary classification is supported")
        if self.aux_link_weight < 0 or self.aux_entropy_weight < 0:
            raise ConfigError("auxiliary loss weights must be >= 0")

    def cluster_caps(self) -> list[int]:
        """Width of each level's assignment matrix, sized for a ``max_nodes`` graph."""
        caps, n = [], self.max_nodes
        for _ in range(self.pool_layers):
            n = max(1, math.ceil(self.pool_ratio * n))
            caps.append(n)
        return caps

    def architecture(self) -> dict:
        d = asdict(self)
        d.pop("seed")
        d.pop("aux_link_weight")
        d.pop("aux_entropy_weight")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def next_size(n: int, ratio: float) -> int:
    return max(1, math.ceil(ratio * n))


def normalize_adjacency(A: np.ndarray, directed: bool = False) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` of the symmetrized 0/1 adjacency (or of ``A`` itself when directed)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"adjacency must be square, got {A.shape}")
    if not directed:
        A = np.maximum(A, A.T)
    return ad.gcn_normalize(Tensor(A)).data


def propagate(norm_adj: Tensor, H: Tensor, W: Tensor) -> Tensor:
    return ad.relu(ad.matmul(ad.matmul(norm_adj, H), W))


@dataclass
class LevelOutput:
    adj: Tensor
    emb: Tensor
    link_loss: Tensor
    entropy_loss: Tensor


def diffpool_level(A: Tensor, Z: Tensor, S_logits: Tensor) -> LevelOutput:
    """Coarsen ``(A, Z)`` with the soft assignment ``row_softmax(S_logits)``."""
    n = A.rows
    if Z.rows != n or S_logits.rows != n:
        raise ShapeMismatch(f"diffpool_level: A {A.shape}, Z {Z.shape}, S {S_logits.shape}")
    S = ad.row_softmax(S_logits)
    St = ad.transpose(S)
    A_next = ad.matmul(St, ad.matmul(A, S))
    H_next = ad.matmul(St, Z)
    resid = ad.add(A, ad.scale(ad.matmul(S, St), -1.0))
    link = ad.scale(ad.frobenius_sq(resid), 1.0 / (n * n))
    ent = ad.mean_row_entropy(S_logits)
    return LevelOutput(A_next, H_next, link, ent)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def graph_adjacency(graph: PropagationGraph, directed: bool) -> np.ndarray:
    cache = graph.__dict__.setdefault("_adj_cache", {})
    if directed not in cache:
        A = graph.adjacency()
        cache[directed] = A if directed else np.maximum(A, A.T)
    return cache[directed]


class DiffPoolModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        named = []
        in_dim = config.input_dim
        h, e = config.hidden_dim, config.embed_dim
        for k, cap in enumerate(config.cluster_caps()):
            named += [
                (f"level{k}.embed1", Tensor(_glorot(rng, in_dim, h), True)),
                (f"level{k}.embed2", Tensor(_glorot(rng, h, e), True)),
                (f"level{k}.pool1", Tensor(_glorot(rng, in_dim, h), True)),
                (f"level{k}.pool2", Tensor(_glorot(rng, h, cap), True)),
            ]
            in_dim = e
        named += [
            ("head.weight", Tensor(_glorot(rng, e, config.classes), True)),
            ("head.bias", Tensor(np.zeros((1, config.classes)), True)),
        ]
        self.params = ParamVector(named)
        self._by_name = dict(named)

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def clone(self) -> "DiffPoolModel":
        other = DiffPoolModel(self.config)
        other.params.unflatten(self.params.flatten())
        return other

    def forward(self, graph: PropagationGraph) -> tuple[Tensor, Tensor]:
        """Logits (1 x 2) and the weighted sum of auxiliary pooling losses (1 x 1)."""
        self._check(graph)
        A = Tensor(graph_adjacency(graph, self.config.directed), _check=False)
        return self._forward(A, Tensor(graph.features, _check=False))

    def forward_stack(self, graphs: Sequence[PropagationGraph]) -> tuple[Tensor, Tensor]:
        """:meth:`forward` for graphs of one size at once: stacks of logits and auxiliary losses."""
        n = {g.n for g in graphs}
        if len(n) != 1:
            raise ShapeMismatch(f"forward_stack needs graphs of one size, got sizes {sorted(n)}")
        for g in graphs:
            self._check(g)
        A = np.stack([graph_adjacency(g, self.config.directed) for g in graphs])
        H = np.stack([g.features for g in graphs])
        return self._forward(Tensor(A, _check=False), Tensor(H, _check=False))

    def _check(self, graph: PropagationGraph) -> None:
        if graph.n == 0:
            raise EmptyGraph(f"graph {graph.news_id} has no nodes")
        if graph.d != self.config.input_dim:
            raise ArchitectureMismatch(f"graph feature dim {graph.d} != model input_dim {self.config.input_dim}")

    def _forward(self, A: Tensor, H: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.config
        aux = None
        for k, cap in enumerate(cfg.cluster_caps()):
            n = A.rows
            N = ad.gcn_normalize(A)
            NH = ad.matmul(N, H)
            Z = propagate(N, ad.relu(ad.matmul(NH, self[f"level{k}.embed1"])), self[f"level{k}.embed2"])
            P = ad.relu(ad.matmul(NH, self[f"level{k}.pool1"]))
            width = min(cap, next_size(n, cfg.pool_ratio))
            S_logits = ad.matmul(ad.matmul(N, P), ad.slice_cols(self[f"level{k}.pool2"], width))
            out = diffpool_level(N, Z, S_logits)
            term = ad.add(ad.scale(out.link_loss, cfg.aux_link_weight), ad.scale(out.entropy_loss, cfg.aux_entropy_weight))
            aux = term if aux is None else ad.add(aux, term)
            A, H = out.adj, out.emb
        readout = ad.mean_rows(H)
        logits = ad.add(ad.matmul(readout, self["head.weight"]), self["head.bias"])
        return logits, aux

    def logits(self, graph: PropagationGraph) -> np.ndarray:
        return self.forward(graph)[0].data[0].copy()

    def predict(self, graphs: Sequence[PropagationGraph]) -> np.ndarray:
        out = np.zeros(len(graphs), dtype=int)
        for idx in size_groups(graphs):
            logits, _ = self.forward_stack([graphs[i] for i in idx])
            out[idx] = np.argmax(logits.data[:, 0, :], axis=1)
        return out


STACK_LIMIT = 64


def size_groups(graphs: Sequence[PropagationGraph], limit: int = STACK_LIMIT) -> list[np.ndarray]:
    """Indices of ``graphs`` grouped by node count (ascending), in chunks of at most ``limit``."""
    by_n: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        by_n.setdefault(g.n, []).append(i)
    out = []
    for n in sorted(by_n):
        idx = by_n[n]
        out += [np.array(idx[k:k + limit]) for k in range(0, len(idx), limit)]
    return out


def loss(model: DiffPoolModel, graph: PropagationGraph) -> Tensor:
    if graph.label not in (0, 1):
        raise DataError(f"graph {graph.news_id}: label must be 0 or 1")
    logits, aux = model.forward(graph)
    return ad.add(ad.cross_entropy(logits, graph.label), aux)


def stacked_loss(model: DiffPoolModel, graphs: Sequence[PropagationGraph]) -> Tensor:
    """Summed loss of equally sized graphs, evaluated as one stack (1 x 1)."""
    labels = [g.label for g in graphs]
    if any(y not in (0, 1) for y in labels):
        raise DataError("labels must be 0 or 1")
    logits, aux = model.forward_stack(graphs)
    return ad.batch_sum(ad.add(ad.cross_entropy(logits, labels), aux))


def total_loss(model: DiffPoolModel, graphs: Sequence[PropagationGraph]) -> Tensor | None:
    """Sum of per-graph losses over ``graphs`` (any sizes); record under a tape to differentiate."""
    total = None
    for idx in size_groups(graphs):
        part = stacked_loss(model, [graphs[i] for i in idx])
        total = part if total is None else ad.add(total, part)
    return total


def loss_and_grad(model: DiffPoolModel, graphs: Sequence[PropagationGraph]) -> tuple[float, np.ndarray]:
    """Mean loss over ``graphs`` and its gradient as a flat vector."""
    total = 0.0
    grad = np.zeros(len(model.params))
    for idx in size_groups(graphs):
        with Tape() as tape:
            value = stacked_loss(model, [graphs[i] for i in idx])
        total += value.item()
        grad += ad.backward(tape, value, model.params)
    m = max(len(graphs), 1)
    return total / m, grad / m


def mean_loss(model: DiffPoolModel, graphs: Sequence[PropagationGraph]) -> float:
    if not graphs:
        return 0.0
    return sum(stacked_loss(model, [graphs[i] for i in idx]).item() for idx in size_groups(graphs)) / len(graphs)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, model: DiffPoolModel, opt_state: AdamState | None = None,
                    norm: NormStats | None = None, extra: dict | None = None) -> None:
    """``DPCK | u32 version | u32 header_len | header json | params f8 | adam t (u64) | m f8 | v f8``."""
    from .dataset import atomic_write

    header = {
        "config": asdict(model.config),
        "param_names": model.params.names,
        "param_count": len(model.params),
        "norm": norm.to_dict() if norm is not None else None,
        "has_optimizer": opt_state is not None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hb)), hb,
             model.params.flatten().astype("<f8").tobytes()]
    if opt_state is not None:
        parts += [struct.pack("<Q", opt_state.t), opt_state.m.astype("<f8").tobytes(),
                  opt_state.v.astype("<f8").tobytes()]
    atomic_write(path, b"".join(parts))


@dataclass
class Checkpoint:
    model: DiffPoolModel
    opt_state: AdamState | None
    norm: NormStats | None
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise IncompatibleCheckpoint(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    model = DiffPoolModel(ModelConfig.from_dict(header["config"]))
    size = len(model.params)
    if size != header["param_count"]:
        raise IncompatibleCheckpoint(f"{path}: parameter count {header['param_count']} != {size}")
    pos = 12 + hlen
    model.params.unflatten(np.frombuffer(data, dtype="<f8", count=size, offset=pos))
    pos += 8 * size
    opt = None
    if header["has_optimizer"]:
        (t,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        m = np.frombuffer(data, dtype="<f8", count=size, offset=pos).copy()
        pos += 8 * size
        v = np.frombuffer(data, dtype="<f8", count=size, offset=pos).copy()
        opt = AdamState(m, v, int(t))
    norm = NormStats.from_dict(header["norm"]) if header["norm"] else None
    return Checkpoint(model, opt, norm, header.get("extra", {}))
