"""Modulated SIREN neural field shared across a dataset of signals.

Every sinusoidal layer ``k`` computes ``sin(omega_k * (W_k h + b_k + A_k phi))``
where ``A_k phi`` is a latent-dependent shift (absent in the first layer).
The final layer is linear.  ``omega_k`` grows linearly with depth.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class ModelConfig:
    K: int  # total layer count, including the linear output layer
    L: int  # hidden width
    P: int  # latent dimension
    C: int = 1  # coordinate dimension
    D: int = 1  # output channels
    omega_first: float = 20.0
    omega_last: float = 200.0

    def __post_init__(self):
        for name in ("K", "L", "P", "C", "D"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.K < 3:
            raise ConfigError(f"K must be >= 3, got {self.K}")
        if min(self.L, self.P, self.C, self.D) < 1:
            raise ConfigError("L, P, C and D must all be >= 1")
        if not (self.omega_first > 0 and self.omega_last > 0):
            raise ConfigError("omega values must be positive")

    def to_dict(self) -> dict:
        return {
            "K": int(self.K), "L": int(self.L), "P": int(self.P),
            "C": int(self.C), "D": int(self.D),
            "omega_first": float(self.omega_first),
            "omega_last": float(self.omega_last),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class OmegaSchedule:
    """One frequency per sinusoidal layer (layers 1..K-1)."""

    values: tuple

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


@dataclass(frozen=True, eq=False)
class LayerParams:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass(frozen=True, eq=False)
class ModulationMap:
    map: np.ndarray  # (L, P), no bias


@dataclass(frozen=True, eq=False)
class Latent:
    phi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi)
        if phi.ndim != 1:
            raise UsageError(f"latent must be a vector, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise UsageError("latent has non-finite entries")
        object.__setattr__(self, "phi", phi)

    @classmethod
    def zeros(cls, P: int, dtype=np.float64) -> "Latent":
        return cls(np.zeros(P, dtype=dtype))


def build_omega_schedule(omega_first: float, omega_last: float, K: int) -> OmegaSchedule:
    """Linearly spaced frequencies for the K-1 sinusoidal layers.

    Both endpoints are reproduced exactly.

    >>> build_omega_schedule(20, 200, 8).values
    (20.0, 50.0, 80.0, 110.0, 140.0, 170.0, 200.0)
    """
    if not (omega_first > 0 and omega_last > 0):
        raise ConfigError("omega values must be positive")
    if K < 3:
        raise ConfigError(f"K must be >= 3, got {K}")
    values = np.linspace(float(omega_first), float(omega_last), K - 1)
    values[0], values[-1] = float(omega_first), float(omega_last)
    return OmegaSchedule(tuple(float(v) for v in values))


def param_layout(config: ModelConfig) -> list:
    """(name, shape) for every entry of the flat parameter vector, in order."""
    K, L, P, C, D = config.K, config.L, config.P, config.C, config.D
    layout = [("W1", (L, C)), ("b1", (L,))]
    for k in range(2, K):
        layout += [(f"W{k}", (L, L)), (f"b{k}", (L,))]
    layout += [(f"W{K}", (D, L)), (f"b{K}", (D,))]
    layout += [(f"A{k}", (L, P)) for k in range(2, K)]
    return layout


def n_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(config))


@dataclass(frozen=True, eq=False)
class SharedParams:
    config: ModelConfig
    first: LayerParams
    hidden: tuple
    output: LayerParams
    modulations: tuple
    schedule: OmegaSchedule
    _flat: np.ndarray = field(repr=False, default=None)

    @property
    def dtype(self):
        return self._flat.dtype

    def flat(self) -> np.ndarray:
        """Read-only flat view over every trainable entry (see ``param_layout``)."""
        return self._flat

    def layers(self) -> list:
        return [self.first, *self.hidden, self.output]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.config.to_dict()).encode())
        h.update(np.asarray(self.schedule.values, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self._flat).tobytes())
        return h.hexdigest()

    @classmethod
    def from_flat(cls, config: ModelConfig, vec: np.ndarray,
                  schedule: OmegaSchedule | None = None) -> "SharedParams":
        vec = np.array(vec, copy=True)
        if vec.ndim != 1 or vec.size != n_params(config):
            raise UsageError(
                f"flat parameter vector has {vec.size} entries, expected {n_params(config)}")
        if schedule is None:
            schedule = build_omega_schedule(config.omega_first, config.omega_last, config.K)
        vec.flags.writeable = False
        arrays, offset = {}, 0
        for name, shape in param_layout(config):
            size = int(np.prod(shape))
            arrays[name] = vec[offset:offset + size].reshape(shape)
            offset += size
        K = config.K
        return cls(
            config=config,
            first=LayerParams(arrays["W1"], arrays["b1"]),
            hidden=tuple(LayerParams(arrays[f"W{k}"], arrays[f"b{k}"]) for k in range(2, K)),
            output=LayerParams(arrays[f"W{K}"], arrays[f"b{K}"]),
            modulations=tuple(ModulationMap(arrays[f"A{k}"]) for k in range(2, K)),
            schedule=schedule,
            _flat=vec,
        )


def init_bounds(config: ModelConfig, schedule: OmegaSchedule | None = None) -> dict:
    """Half-width of the uniform init interval for every named parameter block."""
    if schedule is None:
        schedule = build_omega_schedule(config.omega_first, config.omega_last, config.K)
    K, L = config.K, config.L
    bounds = {"W1": 1.0 / config.C, "b1": 1.0 / config.C}
    for k in range(2, K):
        bounds[f"W{k}"] = bounds[f"b{k}"] = np.sqrt(6.0 / L) / schedule[k - 1]
    # output layer borrows the last sinusoidal frequency
    bounds[f"W{K}"] = bounds[f"b{K}"] = np.sqrt(6.0 / L) / schedule[K - 2]
    for k in range(2, K):
        bounds[f"A{k}"] = 1.0 / np.sqrt(config.P)
    return bounds


def init_shared(config: ModelConfig, seed: int, dtype=np.float64) -> SharedParams:
    schedule = build_omega_schedule(config.omega_first, config.omega_last, config.K)
    bounds = init_bounds(config, schedule)
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in param_layout(config):
        bound = bounds[name]
        chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
    vec = np.concatenate(chunks).astype(dtype)
    return SharedParams.from_flat(config, vec, schedule)


def modulate(shared: SharedParams, latent: Latent, layer_index: int) -> np.ndarray:
    """Shift vector ``A_k phi`` for hidden layer ``layer_index`` (2..K-1)."""
    K = shared.config.K
    if not 2 <= layer_index <= K - 1:
        raise UsageError(f"layer_index must be in 2..{K - 1}, got {layer_index}")
    phi = _check_latent(shared, latent)
    return shared.modulations[layer_index - 2].map @ phi


def _check_latent(shared: SharedParams, latent: Latent) -> np.ndarray:
    phi = latent.phi if isinstance(latent, Latent) else np.asarray(latent)
    if phi.shape != (shared.config.P,):
        raise UsageError(f"latent has shape {phi.shape}, expected ({shared.config.P},)")
    return phi


def forward(shared: SharedParams, latent: Latent | None, coords: np.ndarray) -> np.ndarray:
    """Evaluate the field at a batch of coordinates, shape (M, C) -> (M, D).

    ``latent=None`` evaluates the unmodulated base network.
    """
    import torch

    from . import _kernels
    from ._parallel import serial_torch

    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != shared.config.C:
        raise UsageError(
            f"coords must have shape (M, {shared.config.C}), got {coords.shape}")
    net = _kernels.TorchNet.from_shared(shared)
    X = torch.from_numpy(np.ascontiguousarray(coords, dtype=shared.dtype))[None]
    phi = None
    if latent is not None:
        phi = torch.from_numpy(
            np.ascontiguousarray(_check_latent(shared, latent), dtype=shared.dtype))[None]
    with serial_torch():
        out, _ = _kernels.forward(net, X, phi)
    return out[0].numpy()
