"""Episodic toy task distributions: meta-moons, meta-circles, meta-gaussians.

Each task draws a fresh pool of points per class, biases the support set to
one half of each class (split at the class median along a random axis),
leaves the remaining points for the query set, and normalizes both sets with
the support mean and variance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DATASETS = ("moons", "circles", "gaussians")
DEFAULT_WAYS_SHOTS = {"moons": (2, 5), "circles": (2, 5), "gaussians": (10, 10)}


@dataclass
class Task:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_classes: int
    shots: int
    norm_mean: np.ndarray
    norm_var: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.support_x.min(axis=0), self.support_x.max(axis=0)


@dataclass
class TaskConfig:
    dataset: str = "moons"
    n_classes: int | None = None
    shots: int | None = None
    pool_per_class: int = 200
    query_per_class: int = 100
    max_noise: float = 0.25
    max_circle_scale: float = 0.8
    mean_range: float = 3.0
    min_mean_separation: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        ways, shots = DEFAULT_WAYS_SHOTS[self.dataset]
        if self.n_classes is None:
            self.n_classes = ways
        if self.shots is None:
            self.shots = shots


def _half_open_uniform(rng: np.random.Generator, high: float) -> float:
    """Uniform draw on ``(0, high]``."""
    return high * (1.0 - rng.random())


# ---------------------------------------------------------------------------
# raw class pools
# ---------------------------------------------------------------------------


def moons_pools(rng: np.random.Generator, n: int, noise: float) -> list[np.ndarray]:
    t0 = rng.uniform(0.0, np.pi, n)
    t1 = rng.uniform(0.0, np.pi, n)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    return [upper + noise * rng.normal(size=upper.shape), lower + noise * rng.normal(size=lower.shape)]


def circles_pools(rng: np.random.Generator, n: int, noise: float, scale: float) -> list[np.ndarray]:
    t0 = rng.uniform(0.0, 2 * np.pi, n)
    t1 = rng.uniform(0.0, 2 * np.pi, n)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = scale * np.stack([np.cos(t1), np.sin(t1)], axis=1)
    return [outer + noise * rng.normal(size=outer.shape), inner + noise * rng.normal(size=inner.shape)]


def random_rotation(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    while True:
        m = rng.uniform(-1.0, 1.0, size=(dim, dim))
        if abs(np.linalg.det(m)) > 1e-12:
            q, _ = np.linalg.qr(m)
            return q


def separated_means(rng: np.random.Generator, n: int, half_range: float, min_sep: float) -> np.ndarray:
    means: list[np.ndarray] = []
    while len(means) < n:
        cand = rng.uniform(-half_range, half_range, size=2)
        if all(np.linalg.norm(cand - m) >= min_sep for m in means):
            means.append(cand)
    return np.array(means)


def gaussian_class_params(rng: np.random.Generator, n_classes: int, cfg: TaskConfig):
    means = separated_means(rng, n_classes, cfg.mean_range, cfg.min_mean_separation)
    covs, rotations, diags = [], [], []
    for _ in range(n_classes):
        q = random_rotation(rng)
        d = rng.uniform(0.0, 1.0, size=2)
        rotations.append(q)
        diags.append(d)
        covs.append(q @ np.diag(d) @ q.T)
    return means, np.array(covs), np.array(rotations), np.array(diags)


def gaussians_pools(rng: np.random.Generator, n: int, means, covs) -> list[np.ndarray]:
    pools = []
    for mu, cov in zip(means, covs):
        w, v = np.linalg.eigh(cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        pools.append(mu + rng.normal(size=(n, 2)) @ root.T)
    return pools


# ---------------------------------------------------------------------------
# biasing, normalization, assembly
# ---------------------------------------------------------------------------


def bias_support(
    pools: list[np.ndarray], shots: int, rng: np.random.Generator, query_per_class: int | None = None
) -> tuple[list[np.ndarray], list[np.ndarray], list[dict]]:
    """Split each class pool at its median along a random axis.

    Support points come from one randomly chosen half; every other point is
    eligible for the query set.  Returns per-class support, per-class query
    and per-class split records (axis, side, median).
    """
    supports, queries, splits = [], [], []
    for pool in pools:
        if len(pool) == 0:
            raise ValueError("bias_support: empty class pool")
        axis = int(rng.integers(2))
        side = int(rng.integers(2))
        median = float(np.median(pool[:, axis]))
        halves = [np.flatnonzero(pool[:, axis] < median), np.flatnonzero(pool[:, axis] >= median)]
        if len(halves[side]) < shots:
            side = 1 - side
        if len(halves[side]) < shots:
            raise ValueError(f"bias_support: neither half holds {shots} points")
        chosen = rng.choice(halves[side], size=shots, replace=False)
        rest = np.setdiff1d(np.arange(len(pool)), chosen)
        if query_per_class is not None and len(rest) > query_per_class:
            rest = np.sort(rng.choice(rest, size=query_per_class, replace=False))
        supports.append(pool[chosen])
        queries.append(pool[rest])
        splits.append({"axis": axis, "side": side, "median": median})
    return supports, queries, splits


def _assemble(supports, queries, label_of: np.ndarray, shots: int, info: dict, normalize: bool = True) -> Task:
    n_classes = len(supports)
    sx = np.concatenate(supports)
    sy = np.repeat(label_of, shots)
    qx = np.concatenate(queries)
    qy = np.concatenate([np.full(len(q), label_of[i]) for i, q in enumerate(queries)])
    order = np.argsort(sy, kind="stable")
    sx, sy = sx[order], sy[order]
    mean = sx.mean(axis=0)
    var = sx.var(axis=0)
    if not normalize:
        mean, var = np.zeros_like(mean), np.ones_like(var)
    scale = np.sqrt(var)
    return Task(
        support_x=(sx - mean) / scale,
        support_y=sy.astype(np.int64),
        query_x=(qx - mean) / scale,
        query_y=qy.astype(np.int64),
        n_classes=n_classes,
        shots=shots,
        norm_mean=mean,
        norm_var=var,
        info=info,
    )


def sample_moons(rng: np.random.Generator, cfg: TaskConfig | None = None, noise: float | None = None) -> Task:
    cfg = cfg or TaskConfig("moons")
    if cfg.n_classes != 2:
        raise ValueError("meta-moons tasks are 2-way")
    noise = _half_open_uniform(rng, cfg.max_noise) if noise is None else noise
    pools = moons_pools(rng, cfg.pool_per_class, noise)
    inverted = bool(rng.integers(2))
    labels = np.array([1, 0]) if inverted else np.array([0, 1])
    supports, queries, splits = bias_support(pools, cfg.shots, rng, cfg.query_per_class)
    return _assemble(supports, queries, labels, cfg.shots,
                     {"noise": noise, "inverted": inverted, "splits": splits, "raw": supports}, cfg.normalize)


def sample_circles(
    rng: np.random.Generator, cfg: TaskConfig | None = None, noise: float | None = None, scale: float | None = None
) -> Task:
    cfg = cfg or TaskConfig("circles")
    if cfg.n_classes != 2:
        raise ValueError("meta-circles tasks are 2-way")
    noise = _half_open_uniform(rng, cfg.max_noise) if noise is None else noise
    scale = _half_open_uniform(rng, cfg.max_circle_scale) if scale is None else scale
    pools = circles_pools(rng, cfg.pool_per_class, noise, scale)
    inverted = bool(rng.integers(2))
    labels = np.array([1, 0]) if inverted else np.array([0, 1])
    supports, queries, splits = bias_support(pools, cfg.shots, rng, cfg.query_per_class)
    return _assemble(supports, queries, labels, cfg.shots,
                     {"noise": noise, "scale": scale, "inverted": inverted, "splits": splits, "raw": supports}, cfg.normalize)


def sample_gaussians(rng: np.random.Generator, cfg: TaskConfig | None = None, diag=None) -> Task:
    cfg = cfg or TaskConfig("gaussians")
    means, covs, rotations, diags = gaussian_class_params(rng, cfg.n_classes, cfg)
    if diag is not None:
        diags = np.broadcast_to(np.asarray(diag, dtype=np.float64), diags.shape).copy()
        covs = np.array([q @ np.diag(d) @ q.T for q, d in zip(rotations, diags)])
    pools = gaussians_pools(rng, cfg.pool_per_class, means, covs)
    labels = rng.permutation(cfg.n_classes)
    supports, queries, splits = bias_support(pools, cfg.shots, rng, cfg.query_per_class)
    return _assemble(supports, queries, labels, cfg.shots,
                     {"means": means, "covs": covs, "rotations": rotations, "diags": diags,
                      "labels": labels, "splits": splits, "raw": supports}, cfg.normalize)


SAMPLERS: dict[str, Callable] = {
    "moons": sample_moons,
    "circles": sample_circles,
    "gaussians": sample_gaussians,
}


def sample_task(rng: np.random.Generator, cfg: TaskConfig) -> Task:
    return SAMPLERS[cfg.dataset](rng, cfg)


# ---------------------------------------------------------------------------
# OOD inputs
# ---------------------------------------------------------------------------


def expanded_box(points: np.ndarray, factor: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of ``points`` scaled by ``factor`` about its centre."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    centre, half = (lo + hi) / 2, (hi - lo) / 2
    return centre - factor * half, centre + factor * half


def ood_query_grid(
    bounds: tuple, resolution: int = 150, mode: str = "grid", n_samples: int = 500,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Points covering ``bounds``: a ``resolution``² grid or uniform samples."""
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if mode == "grid":
        if resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        axes = [np.linspace(lo[i], hi[i], resolution) for i in range(len(lo))]
        mesh = np.meshgrid(*axes, indexing="xy")
        return np.stack([m.ravel() for m in mesh], axis=1)
    if mode == "random":
        if rng is None:
            raise ValueError("random OOD sampling needs an rng")
        return rng.uniform(lo, hi, size=(n_samples, len(lo)))
    raise ValueError(f"unknown OOD mode {mode!r}")


# ---------------------------------------------------------------------------
# CSV dump
# ---------------------------------------------------------------------------


def dump_task_csv(task: Task, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "label", "split"])
        for split, xs, ys in (("support", task.support_x, task.support_y), ("query", task.query_x, task.query_y)):
            for x, y in zip(xs, ys):
                writer.writerow([repr(float(x[0])), repr(float(x[1])), int(y), split])


def load_task_csv(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rows: dict[str, list] = {"support": [], "query": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows[row["split"]].append((float(row["x0"]), float(row["x1"]), int(row["label"])))
    out = {}
    for split, items in rows.items():
        arr = np.array(items, dtype=np.float64).reshape(-1, 3)
        out[split] = (arr[:, :2], arr[:, 2].astype(np.int64))
    return out
