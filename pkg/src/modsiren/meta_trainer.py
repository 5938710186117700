"""Meta-learning of the shared field: batched inner loops, AdamW outer updates."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import _kernels
from ._parallel import chunks, map_ordered, serial
from .errors import ConfigError, NumericalError, UsageError
from .field_model import ModelConfig, SharedParams, init_shared
from .gradient_engine import ContextSet, meta_step, reduced_size, sample_indices

log = logging.getLogger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainConfig:
    B: int = 64
    total_iters: int = 1000
    G: int = 10
    alpha: float = 1e-2
    beta: float = 3e-6
    gamma: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 500
    H: int = 20
    lr_schedule: str = "cosine"  # or "constant"
    val_fraction: float = 0.05
    first_order: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError(f"B must be >= 1, got {self.B}")
        if self.G < 1:
            raise ConfigError(f"G must be >= 1, got {self.G}")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError("alpha and beta must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "OptimizerState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0)


@dataclass
class Checkpoint:
    shared: SharedParams  # latest parameters, used to resume
    optimizer: OptimizerState
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int
    rng_state: bytes
    best_flat: np.ndarray | None = None
    best_iteration: int = -1
    best_val_psnr: float = float("-inf")
    extra: dict = field(default_factory=dict)

    @property
    def best_shared(self) -> SharedParams:
        """Parameters with the best validation score (latest if never validated)."""
        if self.best_flat is None:
            return self.shared
        return SharedParams.from_flat(self.model_config, self.best_flat, self.shared.schedule)


def cosine_lr(step: int, total: int, beta: float) -> float:
    """Cosine annealing from ``beta`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return float(beta)
    if step > total:
        log.warning("cosine_lr: step %d beyond total %d, clamping to 0", step, total)
        return 0.0
    return max(0.0, beta * 0.5 * (1.0 + math.cos(math.pi * step / total)))


def adamw_update(theta, grad, state: OptimizerState, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
    """One AdamW step with decoupled weight decay.

    Works on numpy arrays or torch tensors alike.  Returns the new parameters
    and a new state; inputs are not modified.
    """
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise UsageError("theta, grad and optimizer moments must have equal length")
    finite = torch.isfinite(grad).all() if isinstance(grad, torch.Tensor) else np.isfinite(grad).all()
    if not bool(finite):
        raise NumericalError("non-finite entries in the meta-gradient")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta = theta - lr * (m_hat / (v_hat ** 0.5 + eps) + weight_decay * theta)
    return theta, OptimizerState(m, v, t)


def reduce_context(context: ContextSet, gamma: float, rng: np.random.Generator | None) -> ContextSet:
    """Random subset of ``ceil(gamma * M)`` distinct pairs; identity when gamma = 1."""
    idx = sample_indices(context.M, gamma, rng)
    return context if idx is None else context.subset(idx)


def split_validation(n: int, fraction: float, seed: int):
    """Deterministic (train_idx, val_idx) split; validation is empty for tiny sets."""
    n_val = int(math.floor(n * fraction))
    if n_val == 0 or n - n_val < 1:
        return np.arange(n), np.arange(0)
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batch_rng(seed, it):
    return np.random.default_rng([seed, it, 0])


def _signal_rng(seed, it, slot):
    return np.random.default_rng([seed, it, 1, slot])


class _Stacked:
    """Dataset grouped into dense (N_M, M, C) tensors per point count M."""

    def __init__(self, dataset, dtype):
        self.where = []
        self.groups = {}
        for i, c in enumerate(dataset):
            members = self.groups.setdefault(c.M, [])
            self.where.append((c.M, len(members)))
            members.append(c)
        self.tensors = {
            M: (torch.from_numpy(np.stack([c.coords for c in cs]).astype(dtype)),
                torch.from_numpy(np.stack([c.values for c in cs]).astype(dtype)))
            for M, cs in self.groups.items()
        }

    def batch(self, idx):
        """Yields (positions in batch, X, Y) per point count, in sorted M order."""
        by_m = {}
        for pos, i in enumerate(idx):
            M, j = self.where[i]
            by_m.setdefault(M, []).append((pos, j))
        for M in sorted(by_m):
            pos = [p for p, _ in by_m[M]]
            rows = torch.tensor([j for _, j in by_m[M]])
            X, Y = self.tensors[M]
            yield pos, X[rows], Y[rows]


def _state_bytes(seed, iteration) -> bytes:
    return json.dumps({"seed": int(seed), "next_iteration": int(iteration)}).encode()


def evaluate_psnr(shared: SharedParams, contexts, H: int, alpha: float) -> float:
    """Mean per-signal PSNR after H test-time steps (raw outputs, peak 1)."""
    from .adaptation import fit_latents_batch
    from .signal_io import psnr

    _, losses = fit_latents_batch(shared, contexts, H, alpha)
    return float(np.mean([psnr(l) for l in losses]))


@serial
def train(dataset, model_config: ModelConfig, train_config: TrainConfig,
          resume: Checkpoint | None = None, on_record=None, stop_at: int | None = None):
    """Run outer iterations until ``total_iters`` (or ``stop_at``).

    Returns (checkpoint, log records).  ``on_record`` is called with every
    record as soon as it is produced.
    """
    dataset = list(dataset)
    if not dataset:
        raise UsageError("training needs a non-empty dataset")
    cfg = train_config
    for c in dataset:
        if c.coords.shape[1] != model_config.C or c.values.shape[1] != model_config.D:
            raise UsageError("dataset signals do not match the model's C/D")
        reduced_size(c.M, cfg.gamma)
    dtype = DTYPES[cfg.dtype]

    if resume is None:
        shared = init_shared(model_config, cfg.seed, dtype=dtype)
        opt = OptimizerState.zeros(shared.flat().size, dtype=dtype)
        start = 0
        best = (None, -1, float("-inf"))
    else:
        if resume.model_config != model_config or resume.train_config != cfg:
            raise ConfigError("resume checkpoint was produced with a different configuration")
        shared, opt, start = resume.shared, resume.optimizer, resume.iteration
        best = (resume.best_flat, resume.best_iteration, resume.best_val_psnr)

    train_idx, val_idx = split_validation(len(dataset), cfg.val_fraction, cfg.seed)
    val_set = [dataset[i] for i in val_idx]
    stacked = _Stacked([dataset[i] for i in train_idx], dtype)
    n_train = len(train_idx)
    schedule = shared.schedule

    theta = torch.from_numpy(np.array(shared.flat()))
    state = OptimizerState(torch.from_numpy(np.array(opt.m)), torch.from_numpy(np.array(opt.v)),
                           opt.step)
    records = []
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)

    def snapshot(iteration, theta, state):
        sp = SharedParams.from_flat(model_config, theta.numpy(), schedule)
        return Checkpoint(
            shared=sp,
            optimizer=OptimizerState(state.m.numpy().copy(), state.v.numpy().copy(), state.step),
            model_config=model_config, train_config=cfg, iteration=iteration,
            rng_state=_state_bytes(cfg.seed, iteration),
            best_flat=None if best[0] is None else np.array(best[0]),
            best_iteration=best[1], best_val_psnr=best[2])

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    t0 = time.perf_counter()
    for it in range(start, end):
        brng = _batch_rng(cfg.seed, it)
        idx = brng.choice(n_train, size=cfg.B, replace=n_train < cfg.B)
        net = _kernels.TorchNet.from_flat(model_config, theta, schedule.values)
        units = [(pos[a:b], X[a:b], Y[a:b]) for pos, X, Y in stacked.batch(idx)
                 for a, b in chunks(len(pos))]

        def work(unit):
            pos, X, Y = unit
            rngs = [_signal_rng(cfg.seed, it, p) for p in pos]
            losses, g, _ = meta_step(net, X, Y, cfg.G, cfg.alpha, cfg.gamma, rngs,
                                     first_order=cfg.first_order, scale=1.0 / cfg.B)
            return float(losses.sum()), g

        loss, grad = 0.0, None
        for unit_loss, g in map_ordered(work, units):
            loss += unit_loss / cfg.B
            grad = g if grad is None else grad + g
        if not math.isfinite(loss):
            raise NumericalError(f"meta-loss became non-finite at iteration {it}",
                                 snapshot(it, theta, state))
        lr = cosine_lr(it, cfg.total_iters, cfg.beta) if cfg.lr_schedule == "cosine" else cfg.beta
        try:
            theta_new, state_new = adamw_update(theta, grad, state, lr,
                                                (cfg.adam_beta1, cfg.adam_beta2),
                                                cfg.adam_eps, cfg.weight_decay)
        except NumericalError as exc:
            raise NumericalError(f"{exc} at iteration {it}", snapshot(it, theta, state)) from None
        theta, state = theta_new, state_new
        rec = {"iter": it, "meta_loss": loss, "lr": lr}
        done = it + 1
        if val_set and cfg.eval_every > 0 and (done % cfg.eval_every == 0 or done == cfg.total_iters):
            current = SharedParams.from_flat(model_config, theta.numpy(), schedule)
            score = evaluate_psnr(current, val_set, cfg.H, cfg.alpha)
            rec["val_psnr"] = score
            if score > best[2]:
                best = (theta.numpy().copy(), done, score)
        rec["secs"] = time.perf_counter() - t0
        emit(rec)
    return snapshot(end, theta, state), records
