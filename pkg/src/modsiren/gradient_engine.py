"""Losses, latent/shared gradients and the unrolled second-order meta-gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels
from ._parallel import chunks, map_ordered, serial
from .errors import ConfigError, UsageError
from .field_model import Latent, SharedParams, _check_latent


@dataclass(frozen=True, eq=False)
class ContextSet:
    coords: np.ndarray  # (M, C), inside [-1, 1]
    values: np.ndarray  # (M, D)

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if coords.shape[0] != values.shape[0]:
            raise UsageError(
                f"coords and values disagree on M: {coords.shape[0]} vs {values.shape[0]}")
        if coords.shape[0] < 1:
            raise UsageError("context set is empty")
        if np.any(np.abs(coords) > 1.0):
            raise UsageError("coordinates must lie in [-1, 1]")
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(values))):
            raise UsageError("context set has non-finite entries")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.coords.shape[0]

    def subset(self, idx) -> "ContextSet":
        return ContextSet(self.coords[idx], self.values[idx])


@dataclass
class GradReport:
    loss: float
    grad_phi: np.ndarray | None = None
    grad_theta: np.ndarray | None = None


def reduced_size(M: int, gamma: float) -> int:
    """``ceil(gamma * M)``, robust to binary rounding of ``gamma``."""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    return min(M, max(1, math.ceil(round(gamma * M, 9))))


def sample_indices(M: int, gamma: float, rng: np.random.Generator | None) -> np.ndarray | None:
    """Indices of a reduced context, or None when the full set is used.

    ``Generator.choice`` without replacement runs a partial Fisher-Yates
    shuffle for populations of this size.
    """
    m = reduced_size(M, gamma)
    if m == M:
        return None
    if rng is None:
        raise UsageError("an rng is required when gamma < 1")
    return rng.choice(M, size=m, replace=False)


def _check_context(shared: SharedParams, context: ContextSet):
    cfg = shared.config
    if context.coords.shape[1] != cfg.C or context.values.shape[1] != cfg.D:
        raise UsageError(
            f"context has C={context.coords.shape[1]}, D={context.values.shape[1]}; "
            f"model expects C={cfg.C}, D={cfg.D}")


def _tensors(shared: SharedParams, contexts):
    dt = shared.dtype
    X = torch.from_numpy(np.stack([c.coords for c in contexts]).astype(dt))
    Y = torch.from_numpy(np.stack([c.values for c in contexts]).astype(dt))
    return X, Y


def _phi_tensor(shared, latent, B=1):
    if latent is None:
        return torch.from_numpy(np.zeros((B, shared.config.P), dtype=shared.dtype))
    phi = _check_latent(shared, latent)
    return torch.from_numpy(np.ascontiguousarray(phi, dtype=shared.dtype))[None]


@serial
def mse_loss(shared: SharedParams, latent: Latent, context: ContextSet) -> float:
    """Mean over points of the squared L2 error across output channels."""
    _check_context(shared, context)
    net = _kernels.TorchNet.from_shared(shared)
    X, Y = _tensors(shared, [context])
    out, _ = _kernels.forward(net, X, _phi_tensor(shared, latent))
    losses, _ = _kernels._residual(out, Y, None)
    return float(losses[0])


@serial
def grad_latent(shared: SharedParams, latent: Latent, context: ContextSet) -> np.ndarray:
    _check_context(shared, context)
    net = _kernels.TorchNet.from_shared(shared)
    X, Y = _tensors(shared, [context])
    _, gphi, _ = _kernels.loss_and_grad_phi(net, X, Y, _phi_tensor(shared, latent))
    return gphi[0].numpy()


@serial
def gradients(shared: SharedParams, latent: Latent, context: ContextSet) -> GradReport:
    """Loss together with the gradients w.r.t. the latent and all shared weights."""
    _check_context(shared, context)
    net = _kernels.TorchNet.from_shared(shared)
    X, Y = _tensors(shared, [context])
    losses, gphi, gtheta = _kernels.loss_and_grad_full(net, X, Y, _phi_tensor(shared, latent))
    return GradReport(float(losses[0]), gphi[0].numpy(), gtheta.numpy())


@serial
def inner_adapt(shared: SharedParams, context: ContextSet, G: int, alpha: float,
                gamma: float = 1.0, rng: np.random.Generator | None = None):
    """G SGD steps on the latent from zero, each on a freshly drawn reduced context.

    Returns the final latent and the list of the G iterates phi_1..phi_G.
    """
    if G < 1:
        raise ConfigError(f"G must be >= 1, got {G}")
    _check_context(shared, context)
    reduced_size(context.M, gamma)
    net = _kernels.TorchNet.from_shared(shared)
    X, Y = _tensors(shared, [context])
    phi = _phi_tensor(shared, None)
    trajectory = []
    for _ in range(G):
        idx = sample_indices(context.M, gamma, rng)
        Xg, Yg = (X, Y) if idx is None else (X[:, idx], Y[:, idx])
        _, gphi, _ = _kernels.loss_and_grad_phi(net, Xg, Yg, phi)
        phi = phi - alpha * gphi
        trajectory.append(Latent(phi[0].numpy().copy()))
    return trajectory[-1], trajectory


def meta_step(net: _kernels.TorchNet, X, Y, G: int, alpha: float, gamma: float, rngs,
              first_order: bool = False, scale: float = 1.0, record=None):
    """Meta-gradient for signals sharing one point count M.

    ``X`` is (B, M, C), ``Y`` is (B, M, D).  The inner loop runs on reduced
    contexts, the outer loss on all M points.  Each signal's outer loss is
    weighted by ``scale``.  Returns (per-signal outer losses, flat gradient,
    adapted latents).  ``record``, if a list, receives the number of points
    supervising each inner step and the outer loss.
    """
    B, M = X.shape[0], X.shape[1]
    P = net.A[0].shape[1]
    phi = torch.zeros((B, P), dtype=X.dtype)
    rows = torch.arange(B)[:, None]
    tape = []
    for _ in range(G):
        idx = [sample_indices(M, gamma, r) for r in rngs]
        if idx[0] is None:
            Xg, Yg = X, Y
        else:
            it = torch.from_numpy(np.stack(idx))
            Xg, Yg = X[rows, it], Y[rows, it]
        if record is not None:
            record.append(("inner", Xg.shape[1]))
        _, gphi, cache = _kernels.loss_and_grad_phi(net, Xg, Yg, phi)
        tape.append((Xg, phi, cache))
        phi = phi - alpha * gphi
    scale_t = torch.full((B,), float(scale), dtype=X.dtype)
    if record is not None:
        record.append(("outer", X.shape[1]))
    losses, lam, gtheta = _kernels.loss_and_grad_full(net, X, Y, phi, scale_t)
    if not first_order:
        for Xg, phi_g, cache in reversed(tape):
            hphi, htheta = _kernels.hvp_phi(net, Xg, phi_g, lam, cache)
            gtheta = gtheta - alpha * htheta
            lam = lam - alpha * hphi
    return losses, gtheta, phi


def _signal_rngs(rng, B):
    if rng is None:
        return [None] * B
    if isinstance(rng, np.random.Generator):
        return rng.spawn(B)
    rngs = list(rng)
    if len(rngs) != B:
        raise UsageError(f"expected {B} per-signal generators, got {len(rngs)}")
    return rngs


def meta_loss_and_gradient(shared: SharedParams, contexts, G: int, alpha: float,
                           gamma: float = 1.0, rng=None, first_order: bool = False,
                           record=None):
    """Mean outer loss over the batch and its exact gradient w.r.t. theta.

    ``rng`` is one Generator (spawned into per-signal streams) or a sequence
    with one Generator per signal.
    """
    contexts = list(contexts)
    if not contexts:
        raise UsageError("meta-gradient needs at least one context set")
    if G < 0:
        raise ConfigError(f"G must be >= 0, got {G}")
    for c in contexts:
        _check_context(shared, c)
        reduced_size(c.M, gamma)
    B = len(contexts)
    rngs = _signal_rngs(rng, B)
    net = _kernels.TorchNet.from_shared(shared)
    groups: dict = {}
    for i, c in enumerate(contexts):
        groups.setdefault(c.M, []).append(i)
    units = []
    for M in sorted(groups):
        members = groups[M]
        units += [members[a:b] for a, b in chunks(len(members))]

    def work(members):
        X, Y = _tensors(shared, [contexts[i] for i in members])
        steps = []
        losses, g, _ = meta_step(net, X, Y, G, alpha, gamma, [rngs[i] for i in members],
                                 first_order=first_order, scale=1.0 / B, record=steps)
        return float(losses.sum()), g, steps

    total_loss = 0.0
    grad = None
    for loss, g, steps in map_ordered(work, units):
        total_loss += loss / B
        grad = g if grad is None else grad + g
        if record is not None:
            record.extend(steps)
    return total_loss, grad.numpy()


def meta_gradient(shared: SharedParams, contexts, G: int, alpha: float,
                  gamma: float = 1.0, rng=None, first_order: bool = False) -> np.ndarray:
    return meta_loss_and_gradient(shared, contexts, G, alpha, gamma, rng, first_order)[1]


def lr_for_omega(tau_m: float, omega_m: float, omega_n: float) -> float:
    """Learning rate that makes a layer at ``omega_n`` track one at ``omega_m``."""
    return tau_m * (omega_m / omega_n) ** 2


def omega_lr_equivalence(omega_m: float, omega_n: float, tau_m: float, T: int,
                         dims=(16, 4), seed: int = 0, scaled: bool = True,
                         n_points: int = 32) -> dict:
    """Train two single sinusoidal layers in lockstep and compare them.

    Both start from one base draw divided by their own omega.  With
    ``scaled`` the second layer's learning rate is ``tau_m (omega_m /
    omega_n)^2``, otherwise ``tau_m``.  The deviation at step t is
    ``max|omega_m P_m - omega_n P_n| / max|omega_m P_m|`` over weights and
    biases jointly.

    The probe loss is the mean squared error over all ``n_points * p``
    output entries.  Averaging over outputs keeps the effective step
    ``tau * omega**2`` below the stability limit of plain SGD, so rounding
    differences between the two runs are damped instead of amplified.
    """
    if not (omega_m > 0 and omega_n > 0 and tau_m > 0):
        raise ConfigError("frequencies and learning rate must be positive")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    p, d = dims
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d)
    W0 = rng.uniform(-bound, bound, size=(p, d))
    b0 = rng.uniform(-bound, bound, size=p)
    x = rng.uniform(-1.0, 1.0, size=(n_points, d))
    target = rng.uniform(-1.0, 1.0, size=(n_points, p))
    tau_n = lr_for_omega(tau_m, omega_m, omega_n) if scaled else tau_m

    def sgd_step(W, b, omega, tau):
        u = omega * (x @ W.T + b)
        r = np.sin(u) - target
        dz = (2.0 / (n_points * p)) * r * np.cos(u) * omega
        return W - tau * (dz.T @ x), b - tau * dz.sum(axis=0)

    Wm, bm = W0 / omega_m, b0 / omega_m
    Wn, bn = W0 / omega_n, b0 / omega_n

    def deviation():
        a = np.concatenate([(omega_m * Wm).ravel(), omega_m * bm])
        c = np.concatenate([(omega_n * Wn).ravel(), omega_n * bn])
        return float(np.max(np.abs(a - c)) / np.max(np.abs(a)))

    devs = [deviation()]
    for _ in range(T):
        Wm, bm = sgd_step(Wm, bm, omega_m, tau_m)
        Wn, bn = sgd_step(Wn, bn, omega_n, tau_n)
        devs.append(deviation())
    return {
        "omega_m": float(omega_m), "omega_n": float(omega_n),
        "tau_m": float(tau_m), "tau_n": float(tau_n), "steps": int(T),
        "scaled": bool(scaled), "max_rel_deviation": max(devs),
        "deviation_trace": devs,
    }
