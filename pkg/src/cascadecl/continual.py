"""Incremental training on a second dataset: naive fine-tuning, GEM and EWC."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .cascade import PropagationGraph
from .errors import ArchitectureMismatch, EmptySamples, SizeExceedsDataset
from .model import DiffPoolModel, loss_and_grad, mean_loss, total_loss
from .training import TrainConfig, batches, fit

log = logging.getLogger(__name__)

DEFAULT_MEMORY_SIZES = (100, 200, 300)
LAMBDA_GRID = (1.0, 3.0, 10.0, 30.0, 1e2, 3e2, 1e3, 3e3, 1e4, 3e4, 1e5)
ZERO_GRAD_NORM = 1e-12
MEMORY_SLACK = 1e-6


class Method(str, enum.Enum):
    NAIVE = "naive"
    GEM = "gem"
    EWC = "ewc"


# -- GEM ----------------------------------------------------------------------


@dataclass
class EpisodicMemory:
    samples: list[PropagationGraph]
    indices: list[int]
    ref_loss: float
    # (theta, memory gradient at theta) left by the last accepted step's loss check
    cached_grad: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    def gradient(self, model: DiffPoolModel) -> np.ndarray:
        theta = model.params.flatten()
        if self.cached_grad is not None and np.array_equal(self.cached_grad[0], theta):
            return self.cached_grad[1]
        return loss_and_grad(model, self.samples)[1]


def memory_indices(n: int, size: int, seed: int) -> list[int]:
    if size > n:
        raise SizeExceedsDataset(f"memory size {size} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=size, replace=False))


def sample_memory(dataset: Sequence[PropagationGraph], size: int, seed: int, model: DiffPoolModel) -> EpisodicMemory:
    """Uniform sample without replacement; ``ref_loss`` is frozen at the model's current parameters."""
    idx = memory_indices(len(dataset), size, seed)
    samples = [dataset[i] for i in idx]
    return EpisodicMemory(samples, idx, mean_loss(model, samples))


def project_gradient(g: np.ndarray, g_mem: np.ndarray, margin: float = 0.0) -> tuple[np.ndarray, bool]:
    """Closest vector to ``g`` (in L2) whose inner product with ``g_mem`` is nonnegative.

    Only conflicting gradients (negative inner product) are touched. A
    positive ``margin`` moves them further, onto the plane where the inner
    product equals ``margin * |g| * |g_mem|``.
    """
    dot = float(g @ g_mem)
    if dot >= 0.0:
        return g, False
    target = margin * float(np.linalg.norm(g) * np.linalg.norm(g_mem)) if margin else 0.0
    return g + ((target - dot) / float(g_mem @ g_mem)) * g_mem, True


@dataclass
class GemAudit:
    steps: int = 0
    accepted: int = 0
    rejected: int = 0
    projected: int = 0
    zero_memory_grad: int = 0
    worst_excess: float = -np.inf
    # per accepted step: memory mean loss after the step
    memory_losses: list[float] = field(default_factory=list)


def gem_step(model: DiffPoolModel, batch: Sequence[PropagationGraph], memory: EpisodicMemory, lr: float,
             audit: GemAudit | None = None, *, state: AdamState | None = None, enforce: bool = True,
             backtrack: int = 4, margin: float = 0.0, max_norm: float | None = None) -> bool:
    """One projected update. Returns whether a step was kept.

    Without ``state`` the update is plain SGD on the projected gradient, which
    cannot raise the memory loss to first order; with an :class:`AdamState`
    the projected gradient is fed to Adam instead. ``max_norm`` rescales
    long SGD steps without changing their direction. With ``enforce`` the step
    is retried at halved step sizes (``backtrack`` times) and finally
    dropped if the mean memory loss would exceed ``ref_loss + 1e-6``.
    """
    audit = audit if audit is not None else GemAudit()
    audit.steps += 1
    _, g = loss_and_grad(model, batch)
    g_mem = memory.gradient(model)
    if float(np.sqrt(g_mem @ g_mem)) < ZERO_GRAD_NORM:
        audit.zero_memory_grad += 1
        log.info("memory gradient vanished; applying the batch gradient unprojected")
        g_tilde, projected = g, False
    else:
        g_tilde, projected = project_gradient(g, g_mem, margin)
    audit.projected += int(projected)

    before = model.params.flatten()
    saved = (state.m.copy(), state.v.copy(), state.t) if state is not None else None
    step_lr = lr
    if state is None and max_norm is not None:
        norm = float(np.linalg.norm(g_tilde))
        if norm > max_norm:
            step_lr = lr * max_norm / norm
    for attempt in range(backtrack + 1 if enforce else 1):
        if state is None:
            model.params.unflatten(before - step_lr * g_tilde)
        else:
            adam_step(model.params, g_tilde, state, lr=step_lr)
        if not enforce:
            audit.accepted += 1
            return True
        # the gradient comes almost for free with the loss and is reused by the next step
        mem, g_next = loss_and_grad(model, memory.samples)
        excess = mem - memory.ref_loss
        if excess <= MEMORY_SLACK:
            memory.cached_grad = (model.params.flatten(), g_next)
            audit.accepted += 1
            audit.worst_excess = max(audit.worst_excess, excess)
            audit.memory_losses.append(mem)
            return True
        model.params.unflatten(before)
        if saved is not None:
            state.m, state.v, state.t = saved[0].copy(), saved[1].copy(), saved[2]
        step_lr *= 0.5
    audit.rejected += 1
    return False


# -- EWC ----------------------------------------------------------------------


@dataclass
class FisherState:
    theta_star: np.ndarray
    fisher_diag: np.ndarray
    lam: float

    def penalty_value(self, theta: np.ndarray) -> float:
        return 0.5 * self.lam * float(np.sum(self.fisher_diag * (theta - self.theta_star) ** 2))


def estimate_fisher(model: DiffPoolModel, samples: Sequence[PropagationGraph], seed: int = 0,
                    empirical: bool = False) -> np.ndarray:
    """Diagonal Fisher: mean squared gradient of ``log p(y | graph)``.

    ``y`` is drawn from the model's predictive distribution, or taken from
    the data when ``empirical`` is set.
    """
    if not samples:
        raise EmptySamples("Fisher estimate needs at least one sample")
    rng = np.random.default_rng(seed)
    acc = np.zeros(len(model.params))
    for g in samples:
        with Tape() as tape:
            logits, _ = model.forward(g)
            if empirical:
                y = g.label
            else:
                z = logits.data[0]
                p = np.exp(z - z.max())
                p /= p.sum()
                y = int(rng.choice(len(p), p=p))
            nll = ad.cross_entropy(logits, y)
        grad = ad.backward(tape, nll, model.params)
        acc += grad * grad
    return acc / len(samples)


def _penalty(model: DiffPoolModel, fs: FisherState) -> Tensor:
    total = None
    for name, t in zip(model.params.names, model.params.tensors):
        start, shape = model.params.offsets[name]
        size = t.data.size
        star = fs.theta_star[start:start + size].reshape(shape)
        root_f = np.sqrt(fs.fisher_diag[start:start + size]).reshape(shape)
        diff = ad.add(t, Tensor(-star, _check=False))
        term = ad.frobenius_sq(ad.hadamard(diff, Tensor(root_f, _check=False)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 0.5 * fs.lam)


def ewc_loss(model: DiffPoolModel, batch: Sequence[PropagationGraph], fs: FisherState) -> Tensor:
    """Mean batch loss plus ``lam/2 * sum F (theta - theta*)^2``; record under a :class:`Tape` to differentiate."""
    penalty = _penalty(model, fs)
    if not batch:
        return penalty
    return ad.add(ad.scale(total_loss(model, batch), 1.0 / len(batch)), penalty)


def ewc_grad_fn(fs: FisherState):
    def grad_fn(model, batch):
        with Tape() as tape:
            value = ewc_loss(model, batch, fs)
        return value.item(), ad.backward(tape, value, model.params)

    return grad_fn


# -- incremental training -----------------------------------------------------


@dataclass(frozen=True)
class ContinualParams:
    method: Method = Method.NAIVE
    mem_size: int = 300
    lam: float = 1e4
    fisher_samples: int = 300
    empirical_fisher: bool = False
    enforce_memory: bool = True
    gem_optimizer: str = "sgd"
    gem_lr: float = 0.1
    gem_margin: float = 0.5
    gem_max_norm: float | None = 1.0
    gem_backtrack: int = 8
    ewc_patience: int = 5
    ewc_val_frac: float = 0.1


@dataclass
class IncrementalResult:
    model: DiffPoolModel
    history: list[dict]
    memory: EpisodicMemory | None = None
    fisher: FisherState | None = None
    audit: GemAudit | None = None
    epochs_run: int = 0


EvalFn = Callable[[DiffPoolModel], dict]


def train_incremental(model: DiffPoolModel, d2_train: Sequence[PropagationGraph], params: ContinualParams,
                      train_cfg: TrainConfig, *, d1_train: Sequence[PropagationGraph] = (),
                      evaluate: EvalFn | None = None, d1_val: Sequence[PropagationGraph] = (),
                      d2_val: Sequence[PropagationGraph] = (), opt_state: AdamState | None = None) -> IncrementalResult:
    """Continue training ``model`` (in place) on the second dataset.

    ``d1_train`` supplies GEM memory and EWC Fisher samples. ``evaluate`` is
    called after every epoch and its dict is appended to the history.
    ``d1_val``/``d2_val`` drive EWC's early stopping on the harmonic mean of
    the two validation accuracies.
    """
    method = Method(params.method)
    if d2_train and d2_train[0].d != model.config.input_dim:
        raise ArchitectureMismatch(f"dataset feature dim {d2_train[0].d} != model input_dim "
                                   f"{model.config.input_dim}")
    history: list[dict] = []
    result = IncrementalResult(model, history)
    state = opt_state if opt_state is not None else AdamState.zeros(len(model.params))

    def record(epoch: int, train_loss: float, violations: int = 0) -> None:
        row = {"epoch": epoch, "train_loss": train_loss, "constraint_violations": violations}
        if evaluate is not None:
            row.update(evaluate(model))
        history.append(row)

    if train_cfg.epochs == 0:
        return result

    if method is Method.NAIVE:
        def on_epoch(epoch, value):
            record(epoch, value)

        _, losses = fit(model, d2_train, train_cfg, opt_state=state, on_epoch=on_epoch)
        result.epochs_run = len(losses)
        return result

    if method is Method.GEM:
        memory = sample_memory(d1_train, params.mem_size, train_cfg.seed, model)
        audit = GemAudit()
        result.memory, result.audit = memory, audit
        rng = np.random.default_rng(train_cfg.seed)
        for epoch in range(train_cfg.epochs):
            rejected_before = audit.rejected
            for idx in batches(len(d2_train), train_cfg.batch_size, rng):
                gem_step(model, [d2_train[i] for i in idx], memory, params.gem_lr, audit,
                         state=state if params.gem_optimizer == "adam" else None,
                         enforce=params.enforce_memory, margin=params.gem_margin,
                         max_norm=params.gem_max_norm, backtrack=params.gem_backtrack)
            mem = mean_loss(model, memory.samples)
            violations = int(mem > memory.ref_loss + MEMORY_SLACK)
            if violations:
                log.warning("epoch %d: memory loss %.6f exceeds reference %.6f", epoch, mem, memory.ref_loss)
            record(epoch, mean_loss(model, d2_train), violations)
            history[-1]["memory_loss"] = mem
            history[-1]["rejected_steps"] = audit.rejected - rejected_before
        result.epochs_run = train_cfg.epochs
        return result

    # EWC
    rng = np.random.default_rng(train_cfg.seed)
    n_fisher = min(params.fisher_samples, len(d1_train))
    if n_fisher == 0:
        raise EmptySamples("EWC needs samples from the first dataset")
    fisher_idx = sorted(int(i) for i in rng.choice(len(d1_train), size=n_fisher, replace=False))
    fs = FisherState(model.params.flatten(),
                     estimate_fisher(model, [d1_train[i] for i in fisher_idx], train_cfg.seed,
                                     params.empirical_fisher),
                     params.lam)
    result.fisher = fs
    best = {"score": -np.inf, "theta": model.params.flatten(), "epoch": -1}

    def harmonic_val() -> float:
        a1 = _accuracy(model, d1_val) if d1_val else None
        a2 = _accuracy(model, d2_val) if d2_val else None
        if a1 is None or a2 is None:
            return -np.inf
        return 0.0 if a1 + a2 == 0 else 2 * a1 * a2 / (a1 + a2)

    def on_epoch(epoch, value):
        record(epoch, value)
        score = harmonic_val()
        history[-1]["val_harmonic"] = score
        if score > best["score"]:
            best.update(score=score, theta=model.params.flatten(), epoch=epoch)
        elif epoch - best["epoch"] >= params.ewc_patience:
            return True
        return False

    stop_cfg = TrainConfig(train_cfg.epochs, train_cfg.batch_size, train_cfg.lr, train_cfg.epochs + 1, train_cfg.seed)
    _, losses = fit(model, d2_train, stop_cfg, grad_fn=ewc_grad_fn(fs), opt_state=state, on_epoch=on_epoch)
    result.epochs_run = len(losses)
    if np.isfinite(best["score"]):
        model.params.unflatten(best["theta"])
    return result


def _accuracy(model: DiffPoolModel, graphs: Sequence[PropagationGraph]) -> float:
    labels = np.array([g.label for g in graphs])
    return float(np.mean(model.predict(graphs) == labels))


def parameter_drift(model: DiffPoolModel, theta_star: np.ndarray) -> float:
    return float(np.linalg.norm(model.params.flatten() - theta_star))
