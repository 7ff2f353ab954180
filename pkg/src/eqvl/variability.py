"""Cross-session statistics: per-method summaries, baseline ratios,
best/median/worst sessions and bootstrap variability curves.

All standard deviations use the n-1 denominator.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError
from .trainer import SessionRecord

# Tuned so bootstrap curves of ~30 Gaussian sessions flatten near 15 sessions.
DEFAULT_REL_EPSILON = 0.00125
DEFAULT_WINDOW = 3
DEFAULT_RESAMPLES = 10_000

METRICS = ("mse_sigma", "mse_equil", "iteration")


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_sessions: int
    mse_sigma_mean: float
    mse_sigma_std: float
    iteration_mean: float
    iteration_std: float
    mse_equil_mean: float
    mse_equil_std: float
    n_aborted: int = 0


def _completed(records) -> list[SessionRecord]:
    return [r for r in records if r.completed and r.best is not None]


def metric_values(records, metric: str) -> np.ndarray:
    """Per-session best-iteration values of ``metric`` for completed sessions."""
    return np.array([float(getattr(r.best, metric)) for r in _completed(records)])


def summarize_method(records, method: str | None = None) -> MethodSummary:
    done = _completed(records)
    if len(done) < 2:
        raise InsufficientDataError(f"need >= 2 completed sessions, have {len(done)}")
    method = method or done[0].method

    def ms(metric):
        v = metric_values(done, metric)
        return float(v.mean()), float(v.std(ddof=1))

    s_mean, s_std = ms("mse_sigma")
    i_mean, i_std = ms("iteration")
    e_mean, e_std = ms("mse_equil")
    return MethodSummary(method, len(done), s_mean, s_std, i_mean, i_std, e_mean, e_std,
                         n_aborted=len(list(records)) - len(done))


@dataclass(frozen=True)
class NormalizedRow:
    method: str
    mse_sigma_ratio: float
    mse_equil_ratio: float

    def display(self) -> tuple[str, str]:
        return f"{self.mse_sigma_ratio:.2f}", f"{self.mse_equil_ratio:.2f}"


def normalize_to_baseline(summaries, baseline: MethodSummary) -> list[NormalizedRow]:
    """Method means divided by the baseline means (full precision kept)."""
    if baseline.mse_sigma_mean == 0 or baseline.mse_equil_mean == 0:
        raise ZeroDivisionError("baseline mean error is zero; ratios undefined")
    rows = []
    for s in summaries:
        if s.method == baseline.method:
            continue
        rows.append(NormalizedRow(s.method, s.mse_sigma_mean / baseline.mse_sigma_mean,
                                  s.mse_equil_mean / baseline.mse_equil_mean))
    return rows


@dataclass(frozen=True)
class BMWRow:
    rank: str
    session_seed: int
    iteration: int
    mse_sigma: float
    mse_sigma_std: float
    mse_equil: float
    mse_equil_std: float


def best_median_worst(records) -> list[BMWRow]:
    """Best, median and worst sessions by best-iteration MSE_sigma.

    With an even count the better of the two middle sessions is reported.
    """
    done = _completed(records)
    if len(done) < 3:
        raise InsufficientDataError(f"need >= 3 completed sessions, have {len(done)}")
    ordered = sorted(enumerate(done), key=lambda p: (p[1].best.mse_sigma, p[0]))
    picks = {"best": ordered[0][1], "median": ordered[(len(ordered) - 1) // 2][1], "worst": ordered[-1][1]}
    rows = []
    for rank, rec in picks.items():
        ck = next((c for c in rec.checkpoints if c.iteration == rec.best.iteration), None)
        rows.append(BMWRow(
            rank, rec.session_seed, rec.best.iteration, rec.best.mse_sigma,
            ck.mse_sigma_std if ck else float("nan"), rec.best.mse_equil,
            ck.mse_equil_std if ck else float("nan"),
        ))
    return rows


# ---------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class BootstrapCurve:
    metric: str
    sample_sizes: tuple[int, ...]
    avg_std: tuple[float, ...]
    derivative: tuple[float, ...]
    resamples: int
    rng_seed: int
    converged_at: int | None = None

    def rows(self):
        """(size, avg_std, derivative) rows; the forward difference of the last size is blank."""
        for i, s in enumerate(self.sample_sizes):
            yield s, self.avg_std[i], self.derivative[i] if i < len(self.derivative) else None


def resample_indices(rng_seed: int, population: int, resamples: int, max_size: int) -> np.ndarray:
    """Index draws from a counter-based (Philox) stream keyed by ``rng_seed``.

    Every sample size uses the leading columns of the same ``(resamples,
    max_size)`` block, so adjacent sizes share draws and their difference is
    not swamped by resampling noise. Any size can be recomputed on its own.
    """
    bitgen = np.random.Philox(key=int(rng_seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(bitgen).integers(0, population, size=(resamples, max_size))


def _multiset_std(draws: np.ndarray) -> np.ndarray:
    if draws.shape[1] < 2:
        return np.zeros(draws.shape[0])
    std = draws.std(axis=1, ddof=1)
    std[draws.max(axis=1) == draws.min(axis=1)] = 0.0
    return std


def bootstrap_variation(values, sample_sizes=None, resamples: int = DEFAULT_RESAMPLES,
                        rng_seed: int = 0, metric: str = "value") -> BootstrapCurve:
    """Mean resampled standard deviation for each sample size (draws with replacement)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise InsufficientDataError("bootstrap needs at least 2 values")
    if not np.all(np.isfinite(values)):
        raise ValueError("bootstrap values must be finite")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    sizes = tuple(range(2, len(values) + 1)) if sample_sizes is None else tuple(int(s) for s in sample_sizes)
    if not sizes or min(sizes) < 1:
        raise ValueError("sample sizes must be positive")
    idx = resample_indices(rng_seed, len(values), resamples, max(sizes))
    drawn = values[idx]
    avg = np.array([_multiset_std(drawn[:, :s]).mean() for s in sizes])
    deriv = np.diff(avg)
    return BootstrapCurve(metric, sizes, tuple(map(float, avg)), tuple(map(float, deriv)), resamples, int(rng_seed))


def convergence_index(curve: BootstrapCurve, epsilon: float | None = None, window: int = DEFAULT_WINDOW,
                      rel_epsilon: float = DEFAULT_REL_EPSILON) -> int | None:
    """Smallest size starting ``window`` consecutive |forward differences| below ``epsilon``.

    ``epsilon`` defaults to ``rel_epsilon`` x max(avg_std). Returns ``None`` if
    the curve never flattens within its range.
    """
    if epsilon is None:
        epsilon = rel_epsilon * max(curve.avg_std) if curve.avg_std else 0.0
    d = np.abs(np.asarray(curve.derivative))
    ok = d < epsilon
    for i in range(len(d) - window + 1):
        if ok[i:i + window].all():
            return curve.sample_sizes[i]
    return None


def with_convergence(curve: BootstrapCurve, **kwargs) -> BootstrapCurve:
    from dataclasses import replace

    return replace(curve, converged_at=convergence_index(curve, **kwargs))


# ---------------------------------------------------------------- study comparison


def compare_studies(first: MethodSummary, second: MethodSummary) -> dict:
    """Percent change of the mean metrics from ``first`` to ``second``."""
    def pct(a, b):
        return 100.0 * (b - a) / a if a else None

    return {
        "n_first": first.n_sessions,
        "n_second": second.n_sessions,
        "mse_sigma": [first.mse_sigma_mean, second.mse_sigma_mean, pct(first.mse_sigma_mean, second.mse_sigma_mean)],
        "mse_equil": [first.mse_equil_mean, second.mse_equil_mean, pct(first.mse_equil_mean, second.mse_equil_mean)],
        "iteration": [first.iteration_mean, second.iteration_mean, pct(first.iteration_mean, second.iteration_mean)],
    }


# ---------------------------------------------------------------- report files


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def build_report(records_by_method: dict[str, list[SessionRecord]], resamples: int = DEFAULT_RESAMPLES,
                 rng_seed: int = 0, rel_epsilon: float = DEFAULT_REL_EPSILON, window: int = DEFAULT_WINDOW,
                 baseline: str = "baseline", compare_first: int = 10) -> dict:
    """Assemble every table and curve into one JSON-serializable document."""
    summaries = {m: summarize_method(recs, m) for m, recs in records_by_method.items()}
    report: dict = {
        "std_convention": "sample standard deviation (n-1)",
        "bootstrap": {"resamples": resamples, "rng_seed": rng_seed, "rel_epsilon": rel_epsilon, "window": window},
        "summary": {m: asdict(s) for m, s in summaries.items()},
        "best_median_worst": {},
        "curves": {},
        "notes": [],
    }
    if baseline in summaries and len(summaries) > 1:
        rows = normalize_to_baseline(summaries.values(), summaries[baseline])
        report["normalized"] = {r.method: {"mse_sigma": r.mse_sigma_ratio, "mse_equil": r.mse_equil_ratio,
                                           "display": list(r.display())} for r in rows}
    else:
        report["normalized"] = None
        reason = "no other method to compare" if baseline in summaries else f"no '{baseline}' method in study"
        report["notes"].append(f"{reason}; normalized table omitted")
    for m, recs in records_by_method.items():
        done = _completed(recs)
        if len(done) >= 3:
            report["best_median_worst"][m] = [asdict(r) for r in best_median_worst(done)]
        report["curves"][m] = {}
        for k, metric in enumerate(METRICS):
            curve = bootstrap_variation(metric_values(done, metric), resamples=resamples,
                                        rng_seed=rng_seed + k, metric=metric)
            curve = with_convergence(curve, rel_epsilon=rel_epsilon, window=window)
            report["curves"][m][metric] = asdict(curve)
    report["study_comparison"] = {}
    for m, recs in records_by_method.items():
        done = _completed(recs)
        if compare_first >= 2 and len(done) > compare_first:
            report["study_comparison"][m] = compare_studies(summarize_method(done[:compare_first], m), summaries[m])
    return json.loads(json.dumps(report))  # tuples -> lists, as read back from disk


def write_report(report: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    put("summary.csv", _csv(
        [[s["method"], s["n_sessions"], s["mse_sigma_mean"], s["mse_sigma_std"], s["iteration_mean"],
          s["iteration_std"], s["mse_equil_mean"], s["mse_equil_std"]] for s in report["summary"].values()],
        ["method", "n_sessions", "mse_sigma_mean", "mse_sigma_std", "iteration_mean", "iteration_std",
         "mse_equil_mean", "mse_equil_std"]))
    if report.get("normalized"):
        put("normalized.csv", _csv(
            [[m, r["mse_sigma"], r["mse_equil"], *r["display"]] for m, r in report["normalized"].items()],
            ["method", "mse_sigma_ratio", "mse_equil_ratio", "mse_sigma_display", "mse_equil_display"]))
    elif (out / "normalized.csv").exists():
        (out / "normalized.csv").unlink()
    put("bmw.csv", _csv(
        [[m, r["rank"], r["session_seed"], r["iteration"], r["mse_sigma"], r["mse_sigma_std"], r["mse_equil"],
          r["mse_equil_std"]] for m, rows in report["best_median_worst"].items() for r in rows],
        ["method", "rank", "session_seed", "iteration", "mse_sigma", "mse_sigma_std", "mse_equil",
         "mse_equil_std"]))
    for metric in METRICS:
        rows = []
        for m, curves in report["curves"].items():
            c = curves[metric]
            for i, s in enumerate(c["sample_sizes"]):
                d = c["derivative"][i] if i < len(c["derivative"]) else None
                rows.append([m, s, c["avg_std"][i], d])
        put(f"bootstrap_{metric}.csv", _csv(rows, ["method", "size", "avg_std", "derivative"]))
    put("report.json", json.dumps(report, indent=2, sort_keys=True))
    return written
