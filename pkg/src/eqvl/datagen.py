"""Synthetic two-phase microstructures and their linear-elastic equilibrium stress.

The solver is the basic fixed-point (Moulinec-Suquet) Lippmann-Schwinger scheme
with a plane-strain isotropic reference medium. Its Green operator is built on
the modified wave vector ``sin(2 pi k / N) / h`` of the periodic central
difference, so the fixed point is equilibrated exactly in the sense measured
by :func:`eqvl.fields.divergence`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    GenerationError,
    MalformedHeaderError,
    NormalizationError,
    ShapeMismatchError,
    SolverError,
    TruncatedPayloadError,
)
from .fields import ScalarField2D, StressField, divergence_array

SPLITS = ("train", "validation", "test")

MAGIC = b"EQVD"
FORMAT_VERSION = 1
# magic, version, H, W, count, split tag, seed, E_soft, contrast, nu, E11, E22, E12
_HEADER = struct.Struct("<4sHIIIBQ6d")
_TRAILER = struct.Struct("<d")


@dataclass(frozen=True)
class Microstructure:
    phase: ScalarField2D

    def __post_init__(self):
        v = self.phase.values
        if not np.all((v == 0.0) | (v == 1.0)):
            raise GenerationError("phase indicator must contain only 0 and 1")
        if v.min() == v.max():
            raise GenerationError("microstructure must contain both phases")

    @classmethod
    def from_array(cls, phase: np.ndarray) -> Microstructure:
        return cls(ScalarField2D(np.asarray(phase, dtype=np.float64)))

    @property
    def volume_fraction(self) -> float:
        return float(self.phase.values.mean())

    @property
    def shape(self) -> tuple[int, int]:
        return self.phase.shape


@dataclass(frozen=True)
class ElasticSpec:
    young_modulus_soft: float = 1.0
    contrast: float = 10.0
    poisson_ratio: float = 0.3
    applied_strain: tuple[float, float, float] = (0.0, 0.01, 0.0)

    def __post_init__(self):
        if not self.young_modulus_soft > 0:
            raise ValueError("young_modulus_soft must be positive")
        if not self.contrast >= 1:
            raise ValueError("contrast must be >= 1")
        if not 0 < self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must lie in (0, 0.5)")
        object.__setattr__(self, "applied_strain", tuple(float(e) for e in self.applied_strain))
        if len(self.applied_strain) != 3:
            raise ValueError("applied_strain must have 3 components (E11, E22, E12)")

    def lame(self, young: float) -> tuple[float, float]:
        nu = self.poisson_ratio
        lam = young * nu / ((1 + nu) * (1 - 2 * nu))
        mu = young / (2 * (1 + nu))
        return lam, mu

    @property
    def young_modulus_hard(self) -> float:
        return self.contrast * self.young_modulus_soft

    def as_tuple(self) -> tuple[float, ...]:
        return (self.young_modulus_soft, self.contrast, self.poisson_ratio, *self.applied_strain)


@dataclass(frozen=True)
class SamplePair:
    input: Microstructure
    target: StressField
    norm_scale: float


@dataclass
class Dataset:
    pairs: list[SamplePair]
    split: str
    generation_seed: int
    elastic_spec: ElasticSpec
    norm_scale: float = field(default=1.0)

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("dataset must contain at least one pair")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        shape = self.pairs[0].input.shape
        for p in self.pairs:
            if p.input.shape != shape or p.target.shape != shape:
                raise ValueError("all pairs must share one grid shape")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pairs[0].input.shape

    def inputs(self) -> np.ndarray:
        """Phase indicators as an ``(N, 1, H, W)`` array."""
        return np.stack([p.input.phase.values for p in self.pairs])[:, None]

    def targets(self) -> np.ndarray:
        """Normalized targets as an ``(N, 3, H, W)`` array."""
        return np.stack([p.target.data for p in self.pairs])


# ---------------------------------------------------------------- microstructure


def gaussian_random_field(rng: np.random.Generator, size: int, correlation_length: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    f2 = np.fft.fftfreq(size)[:, None]
    f1 = np.fft.fftfreq(size)[None, :]
    kernel = np.exp(-2.0 * np.pi ** 2 * correlation_length ** 2 * (f1 ** 2 + f2 ** 2))
    return np.fft.ifft2(np.fft.fft2(noise) * kernel).real


def threshold_to_fraction(values: np.ndarray, target_vf: float) -> np.ndarray:
    n = values.size
    k = int(round(target_vf * n))
    if k <= 0 or k >= n:
        raise GenerationError(f"volume fraction {target_vf} unreachable on a {values.shape} grid")
    flat = np.sort(values, axis=None)
    cut = flat[n - k]
    if flat[n - k - 1] == cut:
        raise GenerationError("degenerate field: ties at the volume-fraction threshold")
    return (values >= cut).astype(np.float64)


def generate_microstructure(seed: int, size: int, correlation_length: float, target_vf: float) -> Microstructure:
    """Threshold a Gaussian-filtered white-noise field at the ``target_vf`` quantile."""
    if size < 8:
        raise ValueError("size must be >= 8")
    if not 0 < correlation_length < size / 2:
        raise ValueError("correlation_length must lie in (0, size/2)")
    if not 0 < target_vf < 1:
        raise ValueError("target_vf must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    grf = gaussian_random_field(rng, size, correlation_length)
    phase = threshold_to_fraction(grf, target_vf)
    if abs(phase.mean() - target_vf) > 0.02:
        raise GenerationError(f"achieved volume fraction {phase.mean():.3f} misses target {target_vf}")
    return Microstructure.from_array(phase)


# ---------------------------------------------------------------- elasticity


def plane_strain_stress(strain: np.ndarray, lam, mu) -> np.ndarray:
    """Isotropic plane-strain Hooke's law; ``strain`` is ``(3, ...)`` = (e11, e22, e12)."""
    e11, e22, e12 = strain
    tr = e11 + e22
    return np.stack([lam * tr + 2 * mu * e11, lam * tr + 2 * mu * e22, 2 * mu * e12])


def _wave_vectors(shape: tuple[int, int], spacing: float):
    h, w = shape
    xi2 = (np.sin(2 * np.pi * np.fft.fftfreq(h)) / spacing)[:, None]
    xi1 = (np.sin(2 * np.pi * np.fft.fftfreq(w)) / spacing)[None, :]
    xi1, xi2 = np.broadcast_arrays(xi1, xi2)
    return xi1, xi2


def _green_apply(tau_hat: np.ndarray, xi1, xi2, q2, active, lam0: float, mu0: float) -> np.ndarray:
    """Return Gamma0 : tau_hat, zero on modes where the discrete wave vector vanishes."""
    t11, t22, t12 = tau_hat
    t1 = t11 * xi1 + t12 * xi2
    t2 = t12 * xi1 + t22 * xi2
    alpha = (lam0 + mu0) / (lam0 + 2 * mu0)
    q2s = np.where(active, q2, 1.0)
    xt = (xi1 * t1 + xi2 * t2) / q2s
    u1 = (t1 - alpha * xi1 * xt) / (mu0 * q2s)
    u2 = (t2 - alpha * xi2 * xt) / (mu0 * q2s)
    out = np.stack([xi1 * u1, xi2 * u2, 0.5 * (xi1 * u2 + xi2 * u1)])
    out[:, ~active] = 0.0
    return out


def equilibrium_residual(stress: np.ndarray, spacing: float = 1.0) -> float:
    """RMS(div sigma) / RMS(sigma); zero for an identically zero field."""
    scale = np.sqrt(np.mean(stress ** 2))
    if scale == 0.0:
        return 0.0
    return float(np.sqrt(np.mean(divergence_array(stress, spacing) ** 2)) / scale)


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float


def solve_elasticity(
    micro,
    spec: ElasticSpec,
    tolerance: float = 1e-4,
    max_iters: int = 1000,
    spacing: float = 1.0,
    full_output: bool = False,
):
    """Equilibrium stress of a two-phase periodic composite under a mean strain.

    ``micro`` may be a :class:`Microstructure` or a raw 0/1 array (the latter
    admits single-phase grids). Phase 0 is soft, phase 1 is ``contrast`` times
    stiffer. Returns a :class:`StressField`, or ``(stress, SolveInfo)`` when
    ``full_output`` is set.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    phase = micro.phase.values if isinstance(micro, Microstructure) else np.asarray(micro, dtype=np.float64)
    lam_s, mu_s = spec.lame(spec.young_modulus_soft)
    lam_h, mu_h = spec.lame(spec.young_modulus_hard)
    lam = np.where(phase > 0.5, lam_h, lam_s)
    mu = np.where(phase > 0.5, mu_h, mu_s)
    lam0, mu0 = 0.5 * (lam_s + lam_h), 0.5 * (mu_s + mu_h)

    xi1, xi2 = _wave_vectors(phase.shape, spacing)
    q2 = xi1 ** 2 + xi2 ** 2
    active = q2 > 1e-14 * q2.max() if q2.max() > 0 else np.zeros_like(q2, dtype=bool)
    mean_strain = np.asarray(spec.applied_strain, dtype=np.float64)

    strain = np.broadcast_to(mean_strain[:, None, None], (3, *phase.shape)).copy()
    best = np.inf
    residual = np.inf
    for it in range(max_iters + 1):
        stress = plane_strain_stress(strain, lam, mu)
        if not np.all(np.isfinite(stress)):
            raise SolverError("iteration produced non-finite stress", residual, it)
        residual = equilibrium_residual(stress, spacing)
        if residual < tolerance:
            result = StressField(stress)
            return (result, SolveInfo(it, residual)) if full_output else result
        if residual > 1e6 * min(best, 1.0):
            raise SolverError("fixed-point iteration diverged", residual, it)
        best = min(best, residual)
        if it == max_iters:
            break
        tau_hat = np.fft.fft2(stress - plane_strain_stress(strain, lam0, mu0))
        eps_hat = -_green_apply(tau_hat, xi1, xi2, q2, active, lam0, mu0)
        strain = np.fft.ifft2(eps_hat).real + mean_strain[:, None, None]
    raise SolverError("no convergence within max_iters", residual, max_iters)


# ---------------------------------------------------------------- datasets


def normalize_dataset(
    raw,
    split: str = "train",
    generation_seed: int = 0,
    elastic_spec: ElasticSpec | None = None,
    scale: float | None = None,
) -> Dataset:
    """Divide every target by one global scale (max |stress| over ``raw`` by default)."""
    raw = list(raw)
    if not raw:
        raise NormalizationError("cannot normalize an empty collection")
    if scale is None:
        scale = max(float(np.max(np.abs(s.data))) for _, s in raw)
    if not scale > 0 or not np.isfinite(scale):
        raise NormalizationError("stress fields are identically zero; no normalization scale")
    pairs = [SamplePair(m, StressField(s.data / scale), float(scale)) for m, s in raw]
    return Dataset(pairs, split, generation_seed, elastic_spec or ElasticSpec(), float(scale))


def denormalize(stress: StressField, norm_scale: float) -> StressField:
    return StressField(stress.data * norm_scale)


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 64-bit seed."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class GenerationParams:
    size: int = 32
    correlation_length: tuple[float, float] = (1.5, 3.5)
    volume_fraction: tuple[float, float] = (0.35, 0.65)
    tolerance: float = 1e-4
    max_iters: int = 2000


@dataclass
class RawSample:
    micro: Microstructure
    stress: StressField
    info: SolveInfo
    seed: int


def generate_raw(generation_seed: int, count: int, spec: ElasticSpec, params: GenerationParams) -> list[RawSample]:
    """Microstructure/solution pairs; pair ``i`` depends only on ``(generation_seed, i)``."""
    out = []
    for i in range(count):
        pair_seed = derive_seed(generation_seed, i)
        rng = np.random.default_rng(pair_seed)
        lo, hi = params.correlation_length
        corr = float(rng.uniform(lo, hi))
        lo, hi = params.volume_fraction
        vf = float(rng.uniform(lo, hi))
        micro = generate_microstructure(derive_seed(pair_seed, 1), params.size, corr, vf)
        stress, info = solve_elasticity(micro, spec, params.tolerance, params.max_iters, full_output=True)
        out.append(RawSample(micro, stress, info, pair_seed))
    return out


# ---------------------------------------------------------------- file format


def dataset_nbytes(height: int, width: int, count: int) -> int:
    return _HEADER.size + count * 4 * height * width * 8 + _TRAILER.size


def write_dataset(ds: Dataset, path) -> None:
    h, w = ds.shape
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, h, w, len(ds), SPLITS.index(ds.split),
        int(ds.generation_seed) & 0xFFFFFFFFFFFFFFFF, *ds.elastic_spec.as_tuple(),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for p in ds.pairs:
            fh.write(p.input.phase.values.astype("<f8").tobytes())
            fh.write(p.target.data.astype("<f8").tobytes())
        fh.write(_TRAILER.pack(ds.norm_scale))


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, h, w, count, tag, seed, *spec_vals = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if tag >= len(SPLITS):
        raise MalformedHeaderError(f"{path}: unknown split tag {tag}")
    if h == 0 or w == 0 or count == 0:
        raise ShapeMismatchError(f"{path}: empty shape H={h} W={w} count={count}")
    expected = dataset_nbytes(h, w, count)
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise ShapeMismatchError(f"{path}: {len(blob) - expected} bytes beyond the declared {count}x{h}x{w} payload")
    try:
        spec = ElasticSpec(spec_vals[0], spec_vals[1], spec_vals[2], tuple(spec_vals[3:6]))
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: invalid elastic spec: {exc}") from exc
    payload = np.frombuffer(blob, dtype="<f8", count=count * 4 * h * w, offset=_HEADER.size)
    payload = payload.reshape(count, 4, h, w).astype(np.float64)
    (scale,) = _TRAILER.unpack_from(blob, expected - _TRAILER.size)
    pairs = []
    for i in range(count):
        try:
            micro = Microstructure.from_array(payload[i, 0])
        except GenerationError as exc:
            raise ShapeMismatchError(f"{path}: pair {i} phase block is not a valid indicator") from exc
        pairs.append(SamplePair(micro, StressField(payload[i, 1:]), scale))
    return Dataset(pairs, SPLITS[tag], seed, spec, scale)
