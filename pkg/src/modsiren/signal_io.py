"""Grid signals, synthetic datasets, quality metrics and the binary container format.

Container layout (all integers little-endian)::

    magic       4 bytes   b"MFSG" | b"MFCK" | b"MFLD"
    version     u32
    header_len  u64
    header      UTF-8 JSON, ``header_len`` bytes
    payload     concatenated arrays listed in header["arrays"]

Each array entry is ``{"name", "shape", "dtype"}`` with dtype ``"<f4"`` or
``"<f8"``.  Signals are stored as float32; checkpoints and latents keep the
precision they were computed in so that reloading is lossless.
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import DataFormatError, UsageError
from .gradient_engine import ContextSet

VERSION = 1
MAGIC_SIGNALS = b"MFSG"
MAGIC_CHECKPOINT = b"MFCK"
MAGIC_LATENTS = b"MFLD"
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass(frozen=True, eq=False)
class GridSignal:
    shape: tuple  # per-axis sizes, length C
    values: np.ndarray  # (prod(shape), D), float32 in [0, 1]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != math.prod(shape) or any(s < 1 for s in shape):
            raise UsageError(f"{values.shape[0]} values do not fill grid {shape}")
        if not np.all(np.isfinite(values)):
            raise UsageError("grid signal has non-finite values")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def as_array(self) -> np.ndarray:
        """Values reshaped to (*shape, D)."""
        return self.values.reshape(*self.shape, self.channels)


def grid_coords(shape) -> np.ndarray:
    """Row-major lattice of normalized coordinates, shape (prod(shape), C)."""
    axes = [-1.0 + 2.0 * np.arange(s) / (s - 1) if s > 1 else np.zeros(1) for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def to_context(grid: GridSignal) -> ContextSet:
    return ContextSet(grid_coords(grid.shape), grid.values.astype(np.float64))


def _rescale01(x):
    lo, hi = x.min(), x.max()
    if hi - lo == 0:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def synth_1d(n_signals: int, length: int, seed: int) -> list:
    """Sums of three random sinusoids (at most 8 cycles), rescaled to [0, 1]."""
    if length < 8:
        raise UsageError(f"length must be >= 8, got {length}")
    if n_signals < 1:
        raise UsageError("n_signals must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    out = []
    for _ in range(n_signals):
        amp = rng.uniform(0.1, 0.3, size=3)
        freq = rng.uniform(1.0, 8.0, size=3)
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        s = (amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t + phase[:, None])).sum(0)
        out.append(GridSignal((length,), _rescale01(s)))
    return out


def _width_range(c, n_classes):
    # class 0 gets broad bumps, the last class narrow ones
    frac = c / max(1, n_classes - 1)
    lo = 0.22 - 0.14 * frac
    return lo, lo + 0.05


def synth_2d(n_signals: int, side: int, n_classes: int, seed: int):
    """Images made of ``c + 1`` Gaussian bumps for class ``c``.

    Bump widths are drawn from a class-specific range, so both the count and
    the scale of the structures carry the label.  Returns (signals, labels).
    """
    if side < 16:
        raise UsageError(f"side must be >= 16, got {side}")
    if n_classes < 2:
        raise UsageError(f"n_classes must be >= 2, got {n_classes}")
    if n_signals < 1:
        raise UsageError("n_signals must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_signals) % n_classes)
    ax = np.linspace(0.0, 1.0, side)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    signals = []
    for c in labels:
        lo, hi = _width_range(int(c), n_classes)
        img = np.zeros((side, side))
        for _ in range(int(c) + 1):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            width = rng.uniform(lo, hi)
            amp = rng.uniform(0.6, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        img = img / img.max()
        signals.append(GridSignal((side, side), np.clip(img, 0.0, 1.0).ravel()))
    return signals, labels.astype(np.int64)


def psnr(mse: float, peak: float = 1.0) -> float:
    if mse < 0:
        raise UsageError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size, sigma):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _ssim_channel(a, b, win, sigma, k1, k2, data_range):
    kernel = np.ones([1] * a.ndim)
    for axis, s in enumerate(a.shape):
        w = min(win, s if s % 2 else s - 1)
        shape = [1] * a.ndim
        shape[axis] = w
        kernel = kernel * _gaussian_window(w, sigma).reshape(shape)

    def filt(x):
        return sps.correlate(x, kernel, mode="valid", method="direct")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: GridSignal, b: GridSignal, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM over valid windows, averaged over channels."""
    if a.shape != b.shape or a.channels != b.channels:
        raise UsageError(f"SSIM needs equal shapes, got {a.shape}x{a.channels} "
                         f"and {b.shape}x{b.channels}")
    xa = a.as_array().astype(np.float64)
    xb = b.as_array().astype(np.float64)
    vals = [_ssim_channel(xa[..., d], xb[..., d], win, sigma, k1, k2, data_range)
            for d in range(a.channels)]
    return float(np.mean(vals))


# --- container files -------------------------------------------------------

def write_container(path, magic: bytes, header: dict, arrays: dict) -> None:
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "<f8" if arr.dtype == np.float64 else "<f4"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.tobytes())
    header = dict(header, arrays=entries)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(magic, VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path, expected_magic: bytes):
    """Parse and validate a container; returns (header, {name: array})."""
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise DataFormatError(f"file too short for container preamble ({len(data)} bytes)",
                              offset=len(data))
    magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"bad magic: expected {expected_magic.decode()!r}, found {magic!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported container version {version}", offset=4)
    start = _PREAMBLE.size
    if start + hlen > len(data):
        raise DataFormatError(f"header of {hlen} bytes is truncated", offset=len(data))
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"header is not valid UTF-8 JSON: {exc}", offset=start) from None
    offset = start + hlen
    arrays = {}
    for entry in header.get("arrays", []):
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise DataFormatError(f"unknown dtype {entry.get('dtype')!r} for {entry.get('name')}",
                                  offset=offset)
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = math.prod(shape) * dtype.itemsize
        if offset + nbytes > len(data):
            have = (len(data) - offset) // dtype.itemsize
            raise DataFormatError(
                f"payload truncated: array {entry['name']!r} declares {math.prod(shape)} values "
                f"but only {have} remain", offset=len(data))
        arrays[entry["name"]] = np.frombuffer(data, dtype=dtype, count=math.prod(shape),
                                              offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise DataFormatError(f"{len(data) - offset} unexpected trailing bytes", offset=offset)
    return header, arrays


def save_signals(path, signals, labels=None) -> None:
    signals = list(signals)
    if not signals:
        raise UsageError("refusing to write an empty signal collection")
    header = {"kind": "signals", "count": len(signals),
              "shapes": [list(s.shape) for s in signals],
              "channels": [s.channels for s in signals]}
    if labels is not None:
        header["labels"] = [int(l) for l in labels]
    arrays = {f"s{i}": s.values for i, s in enumerate(signals)}
    write_container(path, MAGIC_SIGNALS, header, arrays)


def load_signals(path):
    """Returns (signals, labels or None)."""
    header, arrays = read_container(path, MAGIC_SIGNALS)
    signals = []
    for i, (shape, ch) in enumerate(zip(header["shapes"], header["channels"])):
        arr = arrays.get(f"s{i}")
        if arr is None or arr.shape != (math.prod(shape), ch):
            raise DataFormatError(f"signal {i} payload does not match declared shape {shape}x{ch}")
        signals.append(GridSignal(tuple(shape), arr))
    labels = header.get("labels")
    return signals, (None if labels is None else np.asarray(labels, dtype=np.int64))


def save_checkpoint(path, ckpt) -> None:
    arrays = {"theta": ckpt.shared.flat(), "adam_m": ckpt.optimizer.m, "adam_v": ckpt.optimizer.v}
    if ckpt.best_flat is not None:
        arrays["best_theta"] = ckpt.best_flat
    header = {
        "kind": "checkpoint",
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "schedule": list(ckpt.shared.schedule.values),
        "iteration": int(ckpt.iteration),
        "optimizer_step": int(ckpt.optimizer.step),
        "rng_state": ckpt.rng_state.hex(),
        "best_iteration": int(ckpt.best_iteration),
        "best_val_psnr": None if not math.isfinite(ckpt.best_val_psnr) else ckpt.best_val_psnr,
        "extra": ckpt.extra,
    }
    write_container(path, MAGIC_CHECKPOINT, header, arrays)


def load_checkpoint(path):
    from .field_model import ModelConfig, OmegaSchedule, SharedParams
    from .meta_trainer import Checkpoint, OptimizerState, TrainConfig

    header, arrays = read_container(path, MAGIC_CHECKPOINT)
    try:
        mc = ModelConfig.from_dict(header["model_config"])
        tc = TrainConfig.from_dict(header["train_config"])
        schedule = OmegaSchedule(tuple(float(v) for v in header["schedule"]))
        shared = SharedParams.from_flat(mc, arrays["theta"], schedule)
        opt = OptimizerState(arrays["adam_m"], arrays["adam_v"], int(header["optimizer_step"]))
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"checkpoint header is missing or has a bad field: {exc}") from None
    best = header.get("best_val_psnr")
    return Checkpoint(
        shared=shared, optimizer=opt, model_config=mc, train_config=tc,
        iteration=int(header["iteration"]), rng_state=bytes.fromhex(header["rng_state"]),
        best_flat=arrays.get("best_theta"), best_iteration=int(header["best_iteration"]),
        best_val_psnr=float("-inf") if best is None else float(best),
        extra=header.get("extra", {}))


def save_latents(path, dataset) -> None:
    header = {"kind": "latents", "checkpoint_id": dataset.checkpoint_id,
              "H": int(dataset.H), "alpha": float(dataset.alpha),
              "failed": [int(i) for i in dataset.failed]}
    if dataset.labels is not None:
        header["labels"] = [int(l) for l in dataset.labels]
    write_container(path, MAGIC_LATENTS, header, {"latents": dataset.latents})


def load_latents(path):
    from .adaptation import LatentDataset

    header, arrays = read_container(path, MAGIC_LATENTS)
    if "latents" not in arrays or arrays["latents"].ndim != 2:
        raise DataFormatError("latent dataset has no 2-D 'latents' array")
    labels = header.get("labels")
    return LatentDataset(
        latents=arrays["latents"],
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        checkpoint_id=header["checkpoint_id"], H=int(header["H"]), alpha=float(header["alpha"]),
        failed=tuple(header.get("failed", [])))


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5, maxval 255); values are clamped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise UsageError(f"PGM export needs a 2-D image, got shape {image.shape}")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise DataFormatError("not a binary PGM file", offset=0)
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(data, dtype=np.uint8, count=min(w * h, len(data) - m.end()),
                           offset=m.end())
    if pixels.size != w * h:
        raise DataFormatError("PGM pixel data truncated", offset=len(data))
    return pixels.reshape(h, w).astype(np.float64) / maxval
