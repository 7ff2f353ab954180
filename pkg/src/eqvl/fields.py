"""Periodic grid fields, the discrete stress-divergence operator and error metrics.

Axis convention: arrays are stored row-major as ``(H, W)``. The first spatial
coordinate ``x1`` runs along the width (last axis) and ``x2`` along the height
(second to last axis), so ``d/dx1`` differences along ``axis=-1``.

Stress arrays carry the channels ``(s11, s22, s12)`` on the axis in front of
the two spatial axes. All operators here accept leading batch axes, which the
training code relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataIntegrityError, DimensionError

S11, S22, S12 = 0, 1, 2


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataIntegrityError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ScalarField2D:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"scalar field must be 2D, got shape {v.shape}")
        _check_finite(v, "scalar field")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class StressField:
    """Plane stress state on a periodic grid, ``data`` has shape ``(3, H, W)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[0] != 3:
            raise DimensionError(f"stress field must have shape (3, H, W), got {d.shape}")
        _check_finite(d, "stress field")
        object.__setattr__(self, "data", d)

    @classmethod
    def from_components(cls, s11, s22, s12) -> StressField:
        comps = [np.asarray(c, dtype=np.float64) for c in (s11, s22, s12)]
        if not (comps[0].shape == comps[1].shape == comps[2].shape):
            raise DimensionError("stress components must share one shape")
        return cls(np.stack(comps))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    @property
    def s11(self) -> ScalarField2D:
        return ScalarField2D(self.data[S11])

    @property
    def s22(self) -> ScalarField2D:
        return ScalarField2D(self.data[S22])

    @property
    def s12(self) -> ScalarField2D:
        return ScalarField2D(self.data[S12])

    def __add__(self, other):
        if isinstance(other, StressField):
            return StressField(self.data + other.data)
        return StressField(self.data + other)

    def __mul__(self, k):
        return StressField(self.data * k)

    __rmul__ = __mul__


@dataclass(frozen=True)
class DivergenceField:
    """Components ``(K1, K2)`` of the discrete stress divergence, shape ``(2, H, W)``."""

    data: np.ndarray

    @property
    def k1(self) -> ScalarField2D:
        return ScalarField2D(self.data[0])

    @property
    def k2(self) -> ScalarField2D:
        return ScalarField2D(self.data[1])


@dataclass(frozen=True)
class MetricPair:
    mse_sigma: float
    mse_equil: float

    def __post_init__(self):
        for name in ("mse_sigma", "mse_equil"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise DataIntegrityError(f"{name} must be finite and >= 0, got {v}")


def central_diff(f: np.ndarray, axis: int, spacing: float = 1.0) -> np.ndarray:
    """Second-order central difference with periodic wraparound."""
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * spacing)


def divergence_array(stress: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Divergence of stress arrays shaped ``(..., 3, H, W)`` -> ``(..., 2, H, W)``."""
    if stress.ndim < 3 or stress.shape[-3] != 3:
        raise DimensionError(f"expected (..., 3, H, W) stress array, got {stress.shape}")
    s11 = stress[..., S11, :, :]
    s22 = stress[..., S22, :, :]
    s12 = stress[..., S12, :, :]
    k1 = central_diff(s11, -1, spacing) + central_diff(s12, -2, spacing)
    k2 = central_diff(s12, -1, spacing) + central_diff(s22, -2, spacing)
    return np.stack([k1, k2], axis=-3)


def _as_array(stress) -> np.ndarray:
    return stress.data if isinstance(stress, StressField) else np.asarray(stress, dtype=np.float64)


def divergence(stress: StressField, spacing: float = 1.0) -> DivergenceField:
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    arr = _as_array(stress)
    _check_finite(arr, "stress field")
    return DivergenceField(divergence_array(arr, spacing))


def _same_shape(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")


def mse_sigma(pred, target) -> float:
    p, t = _as_array(pred), _as_array(target)
    _same_shape(p, t)
    return float(np.mean((p - t) ** 2))


def mse_equil(pred, target, spacing: float = 1.0) -> float:
    """MSE between the divergence fields of ``pred`` and ``target``.

    Measured against the target's own (small, nonzero) residual rather than
    against exact equilibrium.
    """
    p, t = _as_array(pred), _as_array(target)
    _same_shape(p, t)
    dk = divergence_array(p - t, spacing)  # linear operator
    return float(np.mean(dk ** 2))


def rms_divergence(stress, spacing: float = 1.0) -> float:
    arr = _as_array(stress)
    _check_finite(arr, "stress field")
    return float(np.sqrt(np.mean(divergence_array(arr, spacing) ** 2)))


def per_image_metrics(pred: np.ndarray, target: np.ndarray, spacing: float = 1.0):
    """Per-sample ``(mse_sigma, mse_equil)`` arrays for batches ``(N, 3, H, W)``."""
    _same_shape(pred, target)
    diff = pred - target
    ms = np.mean(diff ** 2, axis=(1, 2, 3))
    me = np.mean(divergence_array(diff, spacing) ** 2, axis=(1, 2, 3))
    return ms, me


def high_freq_energy_ratio(field, cutoff_fraction: float = 0.5) -> float:
    """Share of non-DC spectral power above ``cutoff_fraction`` x Nyquist (radially)."""
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError("cutoff_fraction must lie in (0, 1)")
    v = field.values if isinstance(field, ScalarField2D) else np.asarray(field, dtype=np.float64)
    _check_finite(v, "scalar field")
    power = np.abs(np.fft.fft2(v)) ** 2
    dc = power[0, 0]
    power[0, 0] = 0.0
    total = power.sum()
    # rounding leaves ~1e-30 relative power in the bins of a constant field
    if total <= 1e-24 * (dc + total) or total == 0.0:
        return 0.0
    f2 = np.fft.fftfreq(v.shape[0])[:, None]
    f1 = np.fft.fftfreq(v.shape[1])[None, :]
    radius = np.sqrt(f1 ** 2 + f2 ** 2)
    high = power[radius > cutoff_fraction * 0.5].sum()
    return float(min(max(high / total, 0.0), 1.0))
