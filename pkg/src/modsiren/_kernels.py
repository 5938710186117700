"""Batched forward/backward/second-order kernels for the modulated SIREN.

All derivatives are written out by hand.  Shapes use ``B`` signals, ``M``
points per signal, ``n = K - 1`` sinusoidal layers indexed ``0..n-1``.
Hidden layer ``i >= 1`` carries the modulation ``A[i-1]``.

The loss of signal ``b`` is ``scale[b] * mean_j ||f(x_bj) - y_bj||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field_model import SharedParams, param_layout


@dataclass
class TorchNet:
    W: list
    b: list
    A: list
    omega: list
    config: object

    @classmethod
    def from_flat(cls, config, flat: torch.Tensor, omega) -> "TorchNet":
        arrays, offset = {}, 0
        for name, shape in param_layout(config):
            size = int(np.prod(shape))
            arrays[name] = flat[offset:offset + size].view(shape)
            offset += size
        K = config.K
        return cls(
            W=[arrays[f"W{k}"] for k in range(1, K + 1)],
            b=[arrays[f"b{k}"] for k in range(1, K + 1)],
            A=[arrays[f"A{k}"] for k in range(2, K)],
            omega=[float(w) for w in omega],
            config=config,
        )

    @classmethod
    def from_shared(cls, shared: SharedParams) -> "TorchNet":
        flat = torch.from_numpy(np.array(shared.flat()))
        return cls.from_flat(shared.config, flat, shared.schedule.values)

    def flatten_grads(self, gW, gb, gA) -> torch.Tensor:
        parts = []
        for w, b in zip(gW, gb):
            parts += [w.reshape(-1), b.reshape(-1)]
        parts += [a.reshape(-1) for a in gA]
        return torch.cat(parts)


@dataclass
class Cache:
    hs: list  # sin activations per sinusoidal layer, (B, M, L)
    cs: list  # cos of the same arguments
    dhs: list = None  # dL/dh per sinusoidal layer (index 0 unused)
    d_out: torch.Tensor = None
    scale: torch.Tensor = None


def _shift(phi, A):
    return (phi @ A.T)[:, None, :]


def forward(net: TorchNet, X, phi, keep=False):
    """Returns the output (B, M, D) and, if ``keep``, the activation cache."""
    n = len(net.omega)
    hs, cs = [], []
    z = X @ net.W[0].T + net.b[0]
    for i in range(n):
        if i > 0:
            z = hs[-1] @ net.W[i].T + net.b[i]
            if phi is not None:
                z = z + _shift(phi, net.A[i - 1])
        u = net.omega[i] * z
        hs.append(torch.sin(u))
        if keep:
            cs.append(torch.cos(u))
        elif i > 0:
            hs.pop(0)
    out = hs[-1] @ net.W[-1].T + net.b[-1]
    return out, (Cache(hs, cs) if keep else None)


def _residual(out, Y, scale):
    M = out.shape[1]
    r = out - Y
    per_signal = (r * r).sum(dim=(1, 2)) / M
    d_out = r * (2.0 / M)
    if scale is not None:
        d_out = d_out * scale[:, None, None]
    return per_signal, d_out


def loss_and_grad_phi(net: TorchNet, X, Y, phi, scale=None):
    """Per-signal losses and d(loss_b)/d(phi_b), stopping above layer 0."""
    out, cache = forward(net, X, phi, keep=True)
    losses, d_out = _residual(out, Y, scale)
    n = len(net.omega)
    dhs = [None] * n
    dh = d_out @ net.W[-1]
    gphi = torch.zeros_like(phi)
    for i in range(n - 1, 0, -1):
        dhs[i] = dh
        s = (dh * cache.cs[i]).sum(dim=1) * net.omega[i]
        gphi = gphi + s @ net.A[i - 1]
        if i > 1:
            dh = (dh * cache.cs[i] * net.omega[i]) @ net.W[i]
    cache.dhs, cache.d_out, cache.scale = dhs, d_out, scale
    return losses, gphi, cache


def loss_and_grad_full(net: TorchNet, X, Y, phi, scale=None):
    """Per-signal losses, per-signal d/dphi and summed d/dtheta (flat)."""
    out, cache = forward(net, X, phi, keep=True)
    losses, d_out = _residual(out, Y, scale)
    n = len(net.omega)
    B = X.shape[0]
    D = d_out.shape[-1]
    L = cache.hs[0].shape[-1]
    gW = [None] * (n + 1)
    gb = [None] * (n + 1)
    gA = [None] * (n - 1)
    gW[n] = d_out.reshape(-1, D).T @ cache.hs[-1].reshape(-1, L)
    gb[n] = d_out.sum(dim=(0, 1))
    gphi = torch.zeros((B, net.A[0].shape[1]), dtype=X.dtype) if phi is None else torch.zeros_like(phi)
    dh = d_out @ net.W[-1]
    for i in range(n - 1, -1, -1):
        dz = dh * cache.cs[i] * net.omega[i]
        prev = cache.hs[i - 1] if i > 0 else X
        gW[i] = dz.reshape(-1, L).T @ prev.reshape(-1, prev.shape[-1])
        s = dz.sum(dim=1)
        gb[i] = s.sum(dim=0)
        if i > 0:
            if phi is None:
                gA[i - 1] = torch.zeros_like(net.A[i - 1])
            else:
                gA[i - 1] = s.T @ phi
                gphi = gphi + s @ net.A[i - 1]
            dh = dz @ net.W[i]
    return losses, gphi, net.flatten_grads(gW, gb, gA)


def hvp_phi(net: TorchNet, X, phi, v, cache: Cache):
    """Second-order products of the loss in latent direction ``v``.

    Returns ``(H_phiphi v, sum_b H_theta,phi_b v_b)``: the directional
    derivative of the full gradient when only ``phi`` moves along ``v``.
    ``cache`` must come from ``loss_and_grad_phi`` at the same point.
    """
    n = len(net.omega)
    hs, cs, dhs = cache.hs, cache.cs, cache.dhs
    B, M = X.shape[0], X.shape[1]
    L = hs[0].shape[-1]
    D = cache.d_out.shape[-1]

    # tangent forward pass; layer 0 has no latent dependence
    hdots, udots = [None] * n, [None] * n
    hdot = None
    for i in range(1, n):
        zdot = _shift(v, net.A[i - 1])
        if hdot is not None:
            zdot = zdot + hdot @ net.W[i].T
        udots[i] = net.omega[i] * zdot
        hdot = cs[i] * udots[i]
        hdots[i] = hdot
    outdot = hdot @ net.W[-1].T

    ddot = outdot * (2.0 / M)
    if cache.scale is not None:
        ddot = ddot * cache.scale[:, None, None]

    gW = [None] * (n + 1)
    gb = [None] * (n + 1)
    gA = [None] * (n - 1)
    gW[n] = (ddot.reshape(-1, D).T @ hs[-1].reshape(-1, L)
             + cache.d_out.reshape(-1, D).T @ hdots[-1].reshape(-1, L))
    gb[n] = ddot.sum(dim=(0, 1))
    gphi_dot = torch.zeros_like(phi)
    dhdot = ddot @ net.W[-1]
    for i in range(n - 1, -1, -1):
        w = net.omega[i]
        if i > 0:
            dh = dhs[i]
            dzdot = (dhdot * cs[i] - dh * hs[i] * udots[i]) * w
            dz = dh * cs[i] * w
        else:
            dzdot = dhdot * cs[i] * w
        prev = hs[i - 1] if i > 0 else X
        gW[i] = dzdot.reshape(-1, L).T @ prev.reshape(-1, prev.shape[-1])
        if i > 1:
            gW[i] = gW[i] + dz.reshape(-1, L).T @ hdots[i - 1].reshape(-1, L)
        sdot = dzdot.sum(dim=1)
        gb[i] = sdot.sum(dim=0)
        if i > 0:
            s = dz.sum(dim=1)
            gA[i - 1] = sdot.T @ phi + s.T @ v
            gphi_dot = gphi_dot + sdot @ net.A[i - 1]
            dhdot = dzdot @ net.W[i]
    return gphi_dot, net.flatten_grads(gW, gb, gA)
