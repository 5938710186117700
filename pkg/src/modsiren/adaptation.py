"""Test-time fitting of latents with the shared weights frozen."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels
from ._parallel import chunks, map_ordered, serial
from .field_model import Latent, SharedParams, forward
from .gradient_engine import ContextSet, _check_context

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LatentDataset:
    latents: np.ndarray  # (N, P); failed rows hold NaN
    labels: np.ndarray | None
    checkpoint_id: str
    H: int
    alpha: float
    failed: tuple = ()

    def __post_init__(self):
        if self.latents.ndim != 2 or self.latents.shape[0] < 1:
            raise ValueError("latent dataset needs at least one row")
        if not self.checkpoint_id:
            raise ValueError("checkpoint_id must be non-empty")
        if self.labels is not None and len(self.labels) != self.latents.shape[0]:
            raise ValueError("labels and latents disagree on N")

    def __len__(self):
        return self.latents.shape[0]


def _fit_group(net, X, Y, H, alpha):
    B = X.shape[0]
    phi = torch.zeros((B, net.A[0].shape[1]), dtype=X.dtype)
    history = []
    for _ in range(H):
        losses, gphi, _ = _kernels.loss_and_grad_phi(net, X, Y, phi)
        history.append(losses)
        phi = phi - alpha * gphi
    out, _ = _kernels.forward(net, X, phi)
    final, _ = _kernels._residual(out, Y, None)
    history.append(final)
    return phi, torch.stack(history, dim=1)


@serial
def fit_latent(shared: SharedParams, context: ContextSet, H: int, alpha: float,
               return_losses: bool = False):
    """H full-context SGD steps on the latent, starting at zero.

    With ``return_losses`` also returns the H+1 losses phi_0..phi_H.
    """
    if H < 0:
        raise ValueError(f"H must be >= 0, got {H}")
    _check_context(shared, context)
    net = _kernels.TorchNet.from_shared(shared)
    dt = shared.dtype
    X = torch.from_numpy(context.coords.astype(dt))[None]
    Y = torch.from_numpy(context.values.astype(dt))[None]
    phi, hist = _fit_group(net, X, Y, H, alpha)
    latent = Latent(phi[0].numpy().copy())
    if return_losses:
        return latent, hist[0].numpy().copy()
    return latent


def fit_latents_batch(shared: SharedParams, contexts, H: int, alpha: float):
    """Vectorized fitting of many signals at once.

    Returns (latents (N, P), final losses (N,)).  Signals are grouped by
    point count; results are in input order.
    """
    contexts = list(contexts)
    net = _kernels.TorchNet.from_shared(shared)
    dt = shared.dtype
    latents = np.zeros((len(contexts), shared.config.P), dtype=dt)
    losses = np.zeros(len(contexts))
    groups: dict = {}
    for i, c in enumerate(contexts):
        groups.setdefault(c.M, []).append(i)
    units = [members[a:b] for members in groups.values() for a, b in chunks(len(members))]

    def work(members):
        X = torch.from_numpy(np.stack([contexts[i].coords for i in members]).astype(dt))
        Y = torch.from_numpy(np.stack([contexts[i].values for i in members]).astype(dt))
        return _fit_group(net, X, Y, H, alpha)

    for members, (phi, hist) in zip(units, map_ordered(work, units)):
        latents[members] = phi.numpy()
        losses[members] = hist[:, -1].numpy()
    return latents, losses


def encode_dataset(shared: SharedParams, signals, H: int, alpha: float,
                   labels=None) -> LatentDataset:
    """Fit one latent per signal; a failing signal yields a NaN row and is flagged."""
    contexts = list(signals)
    if not contexts:
        raise ValueError("encode_dataset needs at least one signal")
    for ctx in contexts:
        _check_context(shared, ctx)

    def work(ctx):
        try:
            return fit_latent(shared, ctx, H, alpha).phi
        except Exception as exc:  # noqa: BLE001 - keep encoding the rest
            return exc

    rows, failed = [], []
    for i, phi in enumerate(map_ordered(work, contexts)):
        if isinstance(phi, Exception):
            log.warning("signal %d failed to fit: %s", i, phi)
            phi = np.full(shared.config.P, np.nan, dtype=shared.dtype)
            failed.append(i)
        rows.append(phi)
    return LatentDataset(
        latents=np.stack(rows),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        checkpoint_id=shared.content_hash(), H=H, alpha=alpha, failed=tuple(failed))


def reconstruct(shared: SharedParams, latent: Latent, grid_shape):
    """Evaluate the field on a normalized lattice; raw (unclamped) values.

    Returns a GridSignal-like pair ``(shape, values (prod(shape), D))``.
    """
    from .signal_io import grid_coords

    grid_shape = tuple(int(s) for s in grid_shape)
    if len(grid_shape) != shared.config.C:
        raise ValueError(f"grid has {len(grid_shape)} axes, model expects {shared.config.C}")
    values = forward(shared, latent, grid_coords(grid_shape))
    return grid_shape, values
