"""Training sessions and multi-session studies.

Session directory layout::

    <root>/runs/<method>/<seed>/checkpoints/iter-<k>.eqck
    <root>/runs/<method>/<seed>/metrics.csv
    <root>/runs/<method>/<seed>/session.json
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, derive_seed
from .errors import NonFiniteError, UsageError
from .fields import MetricPair, per_image_metrics
from .losses import LossConfig, Method, RunningMean, discriminator_loss, generator_loss, rms_divergence_np
from .nn import Adam, Tensor, no_grad, save_networks, seed_all

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "mse_sigma_mean", "mse_sigma_std", "mse_equil_mean", "mse_equil_std")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    total_iterations: int = 4000
    checkpoint_every: int = 200
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    session_seed: int = 0
    width: int = 16
    zero_final_layer: bool = False
    spacing: float = 1.0
    save_checkpoints: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        for name in ("total_iterations", "checkpoint_every", "batch_size", "width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_iterations % self.checkpoint_every:
            raise ValueError("checkpoint_every must divide total_iterations")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"]["method"] = self.loss.method.value
        return d


@dataclass(frozen=True)
class CheckpointMetrics:
    iteration: int
    mse_sigma_mean: float
    mse_sigma_std: float
    mse_equil_mean: float
    mse_equil_std: float


@dataclass(frozen=True)
class BestSummary:
    iteration: int
    mse_sigma: float
    mse_equil: float


@dataclass
class SessionRecord:
    session_seed: int
    method: str
    checkpoints: list[CheckpointMetrics] = field(default_factory=list)
    best: BestSummary | None = None
    status: str = "complete"
    abort_iteration: int | None = None
    error: str | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def completed(self) -> bool:
        return self.status == "complete"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SessionRecord:
        d = dict(d)
        d["checkpoints"] = [CheckpointMetrics(**c) for c in d.get("checkpoints", [])]
        d["best"] = BestSummary(**d["best"]) if d.get("best") else None
        return cls(**d)


def select_best_iteration(record: SessionRecord) -> tuple[int, MetricPair]:
    """Checkpoint with the lowest mean test MSE_sigma; ties go to the earliest."""
    if not record.checkpoints:
        raise UsageError(f"session {record.session_seed} has no checkpoints")
    best = min(record.checkpoints, key=lambda c: (c.mse_sigma_mean, c.iteration))
    return best.iteration, MetricPair(best.mse_sigma_mean, best.mse_equil_mean)


def predict(gen, inputs: np.ndarray, chunk: int = 64) -> np.ndarray:
    with no_grad():
        outs = [gen(Tensor(inputs[i:i + chunk])).data for i in range(0, len(inputs), chunk)]
    return np.concatenate(outs)


def evaluate(gen, dataset: Dataset, spacing: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-image (mse_sigma, mse_equil) of ``gen`` over ``dataset``."""
    pred = predict(gen, dataset.inputs())
    return per_image_metrics(pred, dataset.targets(), spacing)


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def metrics_csv(checkpoints) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for c in checkpoints:
        w.writerow([c.iteration] + [repr(float(getattr(c, k))) for k in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def session_dir(root, method, seed: int) -> Path:
    return Path(root) / "runs" / str(Method(method)) / str(seed)


def _set_trainable(module, flag: bool) -> None:
    for p in module.params.values():
        p.requires_grad = flag


def train_session(config: TrainConfig, data, out_dir=None) -> SessionRecord:
    """Run one seeded session; ``data`` is ``(train, validation, test)``.

    Non-finite losses or gradients end the session early with
    ``status="aborted"``; the record is returned, not raised.
    """
    train, _validation, test = data
    if train.shape != test.shape:
        raise ValueError(f"train {train.shape} and test {test.shape} grids differ")
    cfg = config.loss
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    gen, disc, order_rng = seed_all(config.session_seed, config.width, config.zero_final_layer)
    opt_g = Adam(gen.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    opt_d = Adam(disc.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    x_all, y_all = train.inputs(), train.targets()
    rms_all = rms_divergence_np(y_all, config.spacing)
    n = len(x_all)
    bs = min(config.batch_size, n)
    r_ref = RunningMean(cfg.ema_decay)

    record = SessionRecord(config.session_seed, cfg.method.value)
    order = order_rng.permutation(n)
    pos = 0
    it = 0
    try:
        for it in range(1, config.total_iterations + 1):
            if pos + bs > n:
                order = order_rng.permutation(n)
                pos = 0
            idx = order[pos:pos + bs]
            pos += bs
            x, y = Tensor(x_all[idx]), Tensor(y_all[idx])
            ref = r_ref.update(rms_all[idx].mean())

            pred = gen(x)

            disc.zero_grad()
            discriminator_loss(cfg, disc, x, y, pred.detach(), ref, config.spacing).backward()
            opt_d.step()

            _set_trainable(disc, False)
            gen.zero_grad()
            logits = disc(x, pred)
            generator_loss(cfg, pred, y, logits, ref, config.spacing).backward()
            _set_trainable(disc, True)
            opt_g.step()

            if it % config.checkpoint_every == 0:
                ms, me = evaluate(gen, test, config.spacing)
                record.checkpoints.append(CheckpointMetrics(
                    it, float(ms.mean()), _std(ms), float(me.mean()), _std(me)))
                if out is not None:
                    if config.save_checkpoints:
                        save_networks(out / "checkpoints" / f"iter-{it}.eqck", it, gen, disc)
                    (out / "metrics.csv").write_text(metrics_csv(record.checkpoints))
    except NonFiniteError as exc:
        record.status = "aborted"
        record.abort_iteration = it
        record.error = f"{type(exc).__name__}({exc.where}): {exc}"
        log.warning("session %s aborted at iteration %d: %s", config.session_seed, it, record.error)

    if record.checkpoints:
        b_it, pair = select_best_iteration(record)
        record.best = BestSummary(b_it, pair.mse_sigma, pair.mse_equil)
    record.wall_time = time.perf_counter() - t0
    if out is not None:
        if not record.checkpoints:
            (out / "metrics.csv").write_text(metrics_csv([]))
        write_session_json(out / "session.json", config, record)
    return record


def write_session_json(path, config: TrainConfig, record: SessionRecord) -> None:
    doc = {"config": config.to_dict(), "record": record.to_dict(), "status": record.status}
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(path)


def load_session_json(path) -> tuple[dict, SessionRecord]:
    doc = json.loads(Path(path).read_text())
    return doc["config"], SessionRecord.from_dict(doc["record"])


def session_seeds(master_seed: int, n: int) -> list[int]:
    """Per-session seeds; the first k seeds do not depend on ``n``."""
    return [derive_seed(master_seed, i) for i in range(n)]


_worker_data = None


def _init_worker(data):
    global _worker_data
    _worker_data = data


def _run_one(args):
    config, out_dir = args
    return train_session(config, _worker_data, out_dir)


def run_study(base_config: TrainConfig, n_sessions: int, seed_stream, data,
              out_root=None, workers: int = 1, resume: bool = True) -> list[SessionRecord]:
    """Train ``n_sessions`` sessions with seeds ``seed_stream[:n_sessions]``.

    Results are ordered by seed index whatever the execution order. With
    ``resume`` and an ``out_root``, sessions whose ``session.json`` already
    exists with a matching config are loaded instead of retrained.
    """
    if n_sessions < 2:
        raise ValueError("a study needs at least 2 sessions")
    seeds = list(seed_stream)[:n_sessions]
    if len(seeds) < n_sessions:
        raise ValueError(f"seed stream provides {len(seeds)} seeds, need {n_sessions}")
    configs = [dataclasses.replace(base_config, session_seed=int(s)) for s in seeds]
    results: list[SessionRecord | None] = [None] * n_sessions
    todo = []
    for i, cfg in enumerate(configs):
        out_dir = session_dir(out_root, cfg.loss.method, cfg.session_seed) if out_root is not None else None
        if resume and out_dir is not None and (out_dir / "session.json").exists():
            stored_cfg, rec = load_session_json(out_dir / "session.json")
            if stored_cfg == json.loads(json.dumps(cfg.to_dict())):
                results[i] = rec
                continue
        todo.append((i, cfg, out_dir))

    if workers <= 1 or len(todo) <= 1:
        for i, cfg, out_dir in todo:
            results[i] = train_session(cfg, data, out_dir)
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(data,)) as pool:
            for (i, _, _), rec in zip(todo, pool.map(_run_one, [(c, o) for _, c, o in todo])):
                results[i] = rec
    aborted = sum(not r.completed for r in results)
    if aborted:
        log.warning("%d of %d sessions aborted; they are kept but excluded from analysis", aborted, n_sessions)
    return results
