"""Training, temperature calibration, evaluation and experiment orchestration."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as tt
from .config import ConfigError, RunConfig
from .metrics import (
    N_BINS,
    BinTable,
    PerturbationTable,
    auroc_aupr,
    calibration_bins,
    eigen_perturbation_experiment,
    eigen_spectrum_report,
    energy_score,
    nll_and_accuracy,
    predictive_entropy,
)
from .model import (
    ClassStates,
    FewShotModel,
    NonFiniteLossError,
    baseline_temperature_scale,
    mahalanobis_logits,
    squared_distances,
    tune_energy_temperature,
)
from .optim import Adam
from .tasks import Task, TaskConfig, expanded_box, ood_query_grid, sample_task

logger = logging.getLogger(__name__)

MAX_BAD_EPISODES = 3
RUNNING_WINDOW = 100

SUITES = ("moons", "circles", "gaussians")
MODEL_GRID = (
    ("Protonet", "protonet", 0),
    ("Protonet-SN", "protonet_sn", 0),
    ("Shrinkage (per-class)", "shrinkage_class", 0),
    ("Shrinkage (shared)", "shrinkage_shared", 0),
    ("Ours (Diag)", "mahalanobis", 0),
    ("Ours (Rank-1)", "mahalanobis", 1),
    ("Ours (Rank-2)", "mahalanobis", 2),
    ("Ours (Rank-4)", "mahalanobis", 4),
)
REPORT_METRICS = ("accuracy", "nll", "ece", "ood_ece", "aupr", "auroc")


class TrainingAborted(FloatingPointError):
    """Too many consecutive episodes produced a non-finite loss."""


# ---------------------------------------------------------------------------
# seeding and construction
# ---------------------------------------------------------------------------


STREAMS = ("init", "train", "val", "eval", "mc", "ood", "plot")


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose, derived from one integer seed.

    Streams depend on the seed only, so every head trained with the same
    seed sees the same training, validation and evaluation tasks.
    """
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def task_config(cfg: RunConfig) -> TaskConfig:
    return TaskConfig(cfg.dataset, pool_per_class=cfg.pool_per_class, query_per_class=cfg.query_per_class,
                      normalize=bool(cfg.normalize))


def build_model(cfg: RunConfig, rng: np.random.Generator | None = None) -> FewShotModel:
    rng = rng if rng is not None else seed_streams(cfg.seed)["init"]
    return FewShotModel(
        cfg.head, cfg.rank, rng,
        feature_dim=cfg.feature_dim, depth=cfg.depth, spectral_bound=cfg.spectral_bound,
        encoder_hidden=cfg.encoder_hidden, encoder_heads=cfg.encoder_heads,
        encoder_blocks=cfg.encoder_blocks, factor_gain=cfg.factor_gain, eps=cfg.eps,
    )


def learning_rate(cfg: RunConfig, episode: int) -> float:
    if cfg.lr_schedule == "cosine" and cfg.train_episodes > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * episode / cfg.train_episodes))
    return cfg.lr


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FewShotModel
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    seconds: float = 0.0

    def final_accuracy(self, window: int = 500) -> float:
        return float(np.mean(self.accuracies[-window:])) if self.accuracies else float("nan")


def train(
    cfg: RunConfig,
    log_path: str | Path | None = None,
    on_episode: Callable[[int, FewShotModel], None] | None = None,
    calibrate_after: bool = True,
) -> TrainResult:
    """Episodic training followed by temperature calibration on fresh validation tasks."""
    streams = seed_streams(cfg.seed)
    model = build_model(cfg, streams["init"])
    model.train()
    opt = Adam(model.parameters(), lr=cfg.lr)
    tcfg = task_config(cfg)
    result = TrainResult(model)
    bad_run = 0
    start = time.perf_counter()
    log_fh = open(log_path, "w", newline="") if log_path else None
    try:
        writer = csv.writer(log_fh) if log_fh else None
        if writer:
            writer.writerow(["episode", "loss", "accuracy", "running_accuracy"])
        for episode in range(cfg.train_episodes):
            task = sample_task(streams["train"], tcfg)
            opt.lr = learning_rate(cfg, episode)
            opt.zero_grad()
            try:
                loss, acc = model.loss(task)
            except NonFiniteLossError as err:
                bad_run += 1
                logger.warning("episode %d: %s (%d in a row)", episode, err, bad_run)
                if bad_run >= MAX_BAD_EPISODES:
                    raise TrainingAborted(
                        f"aborting at episode {episode}: {bad_run} consecutive non-finite losses; "
                        f"last error: {err}; lr={opt.lr:.3g}"
                    ) from err
                continue
            bad_run = 0
            tt.backward(loss)
            opt.step()
            result.losses.append(loss.item())
            result.accuracies.append(acc)
            if writer:
                running = float(np.mean(result.accuracies[-RUNNING_WINDOW:]))
                writer.writerow([episode, repr(loss.item()), repr(acc), repr(running)])
            if on_episode is not None:
                on_episode(episode, model)
    finally:
        if log_fh:
            log_fh.close()
    result.skipped_steps = opt.skipped
    model.eval()
    if calibrate_after and cfg.train_episodes > 0:
        calibrate(model, cfg, streams)
    result.seconds = time.perf_counter() - start
    return result


def calibrate(model: FewShotModel, cfg: RunConfig, streams: dict | None = None) -> None:
    """Tune T (energy heads) or the logit temperature (baselines) on validation tasks."""
    streams = streams or seed_streams(cfg.seed)
    tcfg = task_config(cfg)
    logits, dists, labels = [], [], []
    with tt.no_grad():
        for _ in range(cfg.val_episodes):
            task = sample_task(streams["val"], tcfg)
            states = model.class_states(task.support_x, task.support_y, task.n_classes)
            z = model.extractor(task.query_x)
            logits.append(mahalanobis_logits(states, z).data)
            dists.append(squared_distances(states, z).data)
            labels.append(task.query_y)
    if model.uses_energy:
        episodes = list(zip(logits, dists, labels))
        model.temperature = tune_energy_temperature(episodes, cfg.mc_samples, streams["mc"], cfg.eps, cfg.t_max)
    else:
        model.logit_temperature = baseline_temperature_scale(np.concatenate(logits), np.concatenate(labels))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_run(model: FewShotModel, cfg: RunConfig, path: str | Path) -> None:
    """Write the checkpoint and a sidecar ``.cfg`` holding the run configuration."""
    path = Path(path)
    checkpoint.save(path, model.state_dict())
    cfg.save(path.with_suffix(".cfg"))


def load_run(path: str | Path, cfg: RunConfig | None = None) -> tuple[FewShotModel, RunConfig]:
    path = Path(path)
    if cfg is None:
        sidecar = path.with_suffix(".cfg")
        cfg = RunConfig.load(sidecar) if sidecar.exists() else RunConfig()
    state = checkpoint.load(path)
    model = build_model(cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise checkpoint.CheckpointError(f"{path}: {err}") from err
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    accuracy: float
    nll: float
    ece: float
    ood_ece: float
    aupr: float
    auroc: float
    episodes: int
    mc_samples: int
    temperature: float
    bins: BinTable
    ood_bins: BinTable
    spectra: list = field(default_factory=list)  # per-class eigenvalue arrays
    mean_spread: float = float("nan")

    def row(self) -> dict:
        return {
            "accuracy": self.accuracy, "nll": self.nll, "ece": self.ece, "ood_ece": self.ood_ece,
            "aupr": self.aupr, "auroc": self.auroc, "episodes": self.episodes,
            "mc_samples": self.mc_samples, "temperature": self.temperature, "mean_spread": self.mean_spread,
        }


def _episode_outputs(model: FewShotModel, task: Task, cfg: RunConfig, mc_rng, ood_rng):
    states = model.class_states(task.support_x, task.support_y, task.n_classes)
    id_probs, id_logits = model.predict_proba(states, task.query_x, mc_rng, cfg.mc_samples)
    box = expanded_box(task.support_x, cfg.ood_margin)
    ood_x = ood_query_grid(box, mode="random", n_samples=cfg.ood_samples, rng=ood_rng)
    ood_probs, ood_logits = model.predict_proba(states, ood_x, mc_rng, cfg.mc_samples)
    return states, id_probs, id_logits, ood_probs, ood_logits


def evaluate(model: FewShotModel, cfg: RunConfig, episodes: int | None = None) -> CalibrationReport:
    """ID and OOD calibration over fresh evaluation tasks.

    OOD queries are uniform samples from the support bounding box expanded
    about its centre; their "accuracy" target is the uniform guess ``1/C``,
    so an OOD-calibrated model has confidence near ``1/C`` there.
    """
    n = cfg.eval_episodes if episodes is None else episodes
    if n < 1:
        raise ConfigError("evaluation needs at least one episode")
    streams = seed_streams(cfg.seed)
    tcfg = task_config(cfg)
    model.eval()
    probs, labels, ood_conf, ood_target, id_energy, ood_energy, spectra = [], [], [], [], [], [], []
    with tt.no_grad():
        for _ in range(n):
            task = sample_task(streams["eval"], tcfg)
            states, p_id, l_id, p_ood, l_ood = _episode_outputs(model, task, cfg, streams["mc"], streams["ood"])
            probs.append(p_id)
            labels.append(task.query_y)
            ood_conf.append(p_ood.max(axis=1))
            ood_target.append(np.full(len(p_ood), 1.0 / task.n_classes))
            id_energy.append(energy_score(l_id))
            ood_energy.append(energy_score(l_ood))
            if states.precision is not None:
                spectra.extend(s.eigenvalues for s in eigen_spectrum_report(states.precision.data))
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    nll, acc = nll_and_accuracy(probs, labels)
    bins = calibration_bins(probs.max(axis=1), np.argmax(probs, axis=1) == labels, N_BINS)
    ood_bins = calibration_bins(np.concatenate(ood_conf), np.concatenate(ood_target), N_BINS)
    auroc, aupr = auroc_aupr(np.concatenate(id_energy), np.concatenate(ood_energy))
    spread = float(np.mean([s[0] / s[-1] for s in spectra])) if spectra else float("nan")
    temperature = float(model.temperature if model.uses_energy else model.logit_temperature)
    return CalibrationReport(
        accuracy=acc, nll=nll, ece=bins.ece, ood_ece=ood_bins.ece, aupr=aupr, auroc=auroc,
        episodes=n, mc_samples=cfg.mc_samples, temperature=temperature,
        bins=bins, ood_bins=ood_bins, spectra=spectra, mean_spread=spread,
    )


REPORT_HEADER = "# energy score = logsumexp(logits); AUPR treats in-distribution queries as the positive class"


def write_report(report: CalibrationReport, path: str | Path) -> None:
    """Report CSV plus a sibling ``*_bins.csv`` holding both bin tables."""
    path = Path(path)
    row = report.row()
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(list(row))
        writer.writerow([_fmt(v) for v in row.values()])
    with open(path.with_name(path.stem + "_bins.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set", "lower", "upper", "count", "confidence", "accuracy"])
        for name, table in (("id", report.bins), ("ood", report.ood_bins)):
            for k in range(len(table.counts)):
                writer.writerow([name, _fmt(table.edges[k]), _fmt(table.edges[k + 1]), int(table.counts[k]),
                                 _fmt(table.confidence[k]), _fmt(table.accuracy[k])])


def read_report(path: str | Path) -> dict:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    header, values = next(csv.reader(lines[:1])), next(csv.reader(lines[1:2]))
    return {k: _parse(v) for k, v in zip(header, values)}


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def _parse(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


# ---------------------------------------------------------------------------
# eigenvalue analyses on trained models
# ---------------------------------------------------------------------------


def perturbation_study(model: FewShotModel, cfg: RunConfig, episodes: int = 10) -> PerturbationTable:
    """Reset single precision eigenvalues to one and compare against the prediction."""
    if not model.uses_energy:
        raise ValueError("the eigenvalue perturbation study needs a Mahalanobis head")
    streams = seed_streams(cfg.seed)
    tcfg = task_config(cfg)
    data = []
    with tt.no_grad():
        for _ in range(episodes):
            task = sample_task(streams["eval"], tcfg)
            states = model.class_states(task.support_x, task.support_y, task.n_classes)
            z = model.extractor(task.query_x).data
            data.append((states.prototypes.data, states.precision.data.copy(), z, task.query_y))
    noise_seed = cfg.seed

    def predict_fn(prototypes, precisions, z):
        # identical Monte-Carlo draws for every variant of every episode
        rng = np.random.default_rng(noise_seed)
        probs, _ = model.predict_features(ClassStates.from_arrays(prototypes, precisions), z, rng, cfg.mc_samples)
        return probs

    return eigen_perturbation_experiment(data, predict_fn)


def entropy_growth(model: FewShotModel, cfg: RunConfig, episodes: int = 20) -> tuple[float, float]:
    """Mean predictive entropy at the expanded-box corners and at the class prototypes.

    Corners are the four corners of the support bounding box expanded by
    ``cfg.ood_margin``; the prototype entropy is evaluated directly on the
    prototype features.
    """
    streams = seed_streams(cfg.seed)
    tcfg = task_config(cfg)
    corner, proto = [], []
    with tt.no_grad():
        for _ in range(episodes):
            task = sample_task(streams["eval"], tcfg)
            states = model.class_states(task.support_x, task.support_y, task.n_classes)
            (x0, y0), (x1, y1) = expanded_box(task.support_x, cfg.ood_margin)
            corners = np.array([[x0, y0], [x0, y1], [x1, y0], [x1, y1]])
            p_corner, _ = model.predict_proba(states, corners, streams["mc"], cfg.mc_samples)
            p_proto, _ = model.predict_features(states, states.prototypes.data, streams["mc"], cfg.mc_samples)
            corner.append(predictive_entropy(p_corner).mean())
            proto.append(predictive_entropy(p_proto).mean())
    return float(np.mean(corner)), float(np.mean(proto))


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    model: str
    seed: int
    metrics: dict
    train_accuracy: float
    better_nll: float = float("nan")


def run_cell(args: tuple[str, RunConfig, int]) -> CellResult:
    label, cfg, perturb_episodes = args
    result = train(cfg)
    report = evaluate(result.model, cfg)
    cell = CellResult(label, cfg.seed, report.row(), result.final_accuracy())
    if result.model.uses_energy and perturb_episodes > 0:
        cell.better_nll = perturbation_study(result.model, cfg, perturb_episodes).better["nll"]
    logger.info("%s seed %d: acc %.4f ood_ece %.4f (%.0fs)", label, cfg.seed, report.accuracy,
                report.ood_ece, result.seconds)
    return cell


def experiment_cells(suite: str, base: RunConfig, seeds=range(5), models=None) -> list[tuple[str, RunConfig]]:
    models = MODEL_GRID if models is None else models
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; available suites: {', '.join(SUITES)}")
    return [
        (label, base.replace(dataset=suite, head=head, rank=rank, seed=int(seed)))
        for label, head, rank in models
        for seed in seeds
    ]


def worker_count() -> int:
    raw = os.environ.get("MMC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MMC_THREADS must be an integer, got {raw!r}") from None


def run_experiment(
    suite: str, base: RunConfig, seeds=range(5), models=None, perturb_episodes: int = 10,
) -> list[CellResult]:
    jobs = [(label, cfg, perturb_episodes) for label, cfg in experiment_cells(suite, base, seeds, models)]
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [run_cell(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, jobs))


def summarize(cells: list[CellResult]) -> list[dict]:
    """One row per model: mean and sample standard deviation of every metric over seeds."""
    rows = []
    for label in dict.fromkeys(c.model for c in cells):
        group = [c for c in cells if c.model == label]
        row = {"model": label, "seeds": len(group)}
        for key in REPORT_METRICS + ("mean_spread",):
            vals = np.array([c.metrics[key] for c in group], dtype=np.float64)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        better = np.array([c.better_nll for c in group])
        row["better_nll_mean"] = float(better.mean()) if np.all(np.isfinite(better)) else float("nan")
        rows.append(row)
    return rows


def write_table(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(rows[0]))
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row.values()])


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "model" else _parse(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_cells(cells: list[CellResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        keys = list(cells[0].metrics)
        writer.writerow(["model", "seed", *keys, "train_accuracy", "better_nll"])
        for c in cells:
            writer.writerow([c.model, c.seed, *(_fmt(c.metrics[k]) for k in keys),
                             _fmt(c.train_accuracy), _fmt(c.better_nll)])


def format_table(rows: list[dict]) -> str:
    """Percent-scaled ``mean ± std`` text table in the column order of the toy tables."""
    names = ("Accuracy", "NLL", "ECE", "OOD ECE", "AUPR", "AUROC")
    scale = {"nll": 1.0}
    width = max(len(r["model"]) for r in rows)
    lines = [f"{'model':<{width}}  " + "  ".join(f"{n:>14}" for n in names)]
    for r in rows:
        cells = []
        for key in REPORT_METRICS:
            s = scale.get(key, 100.0)
            cells.append(f"{r[f'{key}_mean'] * s:7.2f}±{r[f'{key}_std'] * s:<6.2f}")
        lines.append(f"{r['model']:<{width}}  " + "  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
