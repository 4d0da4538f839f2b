"""SVG figures: predictive-entropy surfaces, covariance ellipses, eigenvalue histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import tensor as tt  # noqa: E402
from .linalg import symmetric_eigen  # noqa: E402
from .metrics import predictive_entropy  # noqa: E402
from .tasks import Task, expanded_box, ood_query_grid  # noqa: E402


def entropy_surface(model, task: Task, rng: np.random.Generator, resolution: int = 150,
                    margin: float = 3.0, samples: int = 100):
    """Per-pixel entropy over the expanded support box; returns ``(xs, ys, entropy)``."""
    if task.support_x.shape[1] != 2:
        raise ValueError(f"entropy surfaces need 2-D inputs, got {task.support_x.shape[1]}-D")
    lo, hi = expanded_box(task.support_x, margin)
    grid = ood_query_grid((lo, hi), resolution=resolution, mode="grid")
    with tt.no_grad():
        states = model.class_states(task.support_x, task.support_y, task.n_classes)
        probs, _ = model.predict_proba(states, grid, rng, samples)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    return xs, ys, predictive_entropy(probs).reshape(resolution, resolution)


def ellipse_points(mean, cov, n_sigma: float = 1.0, n_points: int = 100) -> np.ndarray:
    """Points on the ``n_sigma`` contour of a 2x2 covariance centred at ``mean``."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ValueError(f"ellipse needs a 2x2 covariance, got {cov.shape}")
    vals, vecs = symmetric_eigen(cov)
    t = np.linspace(0.0, 2 * np.pi, n_points)
    circle = np.stack([np.cos(t), np.sin(t)], axis=1)
    return np.asarray(mean) + n_sigma * (circle * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def ellipse_axes(cov) -> tuple[float, float]:
    """Semi-axis lengths (major, minor) of the one-sigma ellipse."""
    vals, _ = symmetric_eigen(np.asarray(cov, dtype=np.float64))
    return float(np.sqrt(vals[0])), float(np.sqrt(max(vals[-1], 0.0)))


def feature_plane(features: np.ndarray) -> np.ndarray:
    """``(d, 2)`` orthonormal basis for the two leading principal directions of the features."""
    centered = features - features.mean(axis=0)
    _, vecs = symmetric_eigen(centered.T @ centered / max(len(features) - 1, 1))
    return vecs[:, :2]


def plot_entropy(path, xs, ys, entropy, task: Task, n_classes: int) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    mesh = ax.pcolormesh(xs, ys, entropy, shading="auto", cmap="viridis", vmin=0.0, vmax=np.log(n_classes))
    fig.colorbar(mesh, ax=ax, label="predictive entropy (nats)")
    ax.scatter(task.query_x[:, 0], task.query_x[:, 1], c=task.query_y, s=4, cmap="tab10", alpha=0.4,
               vmin=0, vmax=9)
    ax.scatter(task.support_x[:, 0], task.support_x[:, 1], c=task.support_y, s=40, marker="*",
               edgecolors="k", cmap="tab10", vmin=0, vmax=9)
    ax.set_xlim(xs[0], xs[-1])
    ax.set_ylim(ys[0], ys[-1])
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_ellipses(path, prototypes, covariances, features, labels) -> None:
    """Class covariances projected onto the leading feature plane, 1 and 2 sigma."""
    basis = feature_plane(features)
    fig, ax = plt.subplots(figsize=(5, 5))
    proj = features @ basis
    ax.scatter(proj[:, 0], proj[:, 1], c=labels, s=4, cmap="tab10", alpha=0.4, vmin=0, vmax=9)
    colors = plt.get_cmap("tab10")
    for c, (mu, cov) in enumerate(zip(prototypes, covariances)):
        mu2, cov2 = mu @ basis, basis.T @ cov @ basis
        for n_sigma, style in ((1.0, "-"), (2.0, "--")):
            pts = ellipse_points(mu2, cov2, n_sigma)
            ax.plot(pts[:, 0], pts[:, 1], style, color=colors(c % 10))
        ax.plot(*mu2, "k+")
    ax.set_aspect("equal", adjustable="datalim")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_eigenvalues(path, spectra: list[np.ndarray], bins: int = 30) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.concatenate(spectra), bins=bins, color="tab:blue", alpha=0.8)
    ax.set_xlabel("precision eigenvalue")
    ax.set_ylabel("count")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def render_all(model, task: Task, out_dir, rng: np.random.Generator, resolution: int = 150,
               margin: float = 3.0, samples: int = 100) -> list[Path]:
    """Write the entropy surface and, for covariance heads, ellipse and eigenvalue plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs, ys, ent = entropy_surface(model, task, rng, resolution, margin, samples)
    written = [out / "entropy.svg"]
    plot_entropy(written[0], xs, ys, ent, task, task.n_classes)
    with tt.no_grad():
        states = model.class_states(task.support_x, task.support_y, task.n_classes)
        features = model.extractor(np.concatenate([task.support_x, task.query_x])).data
    labels = np.concatenate([task.support_y, task.query_y])
    prototypes = states.prototypes.data
    if states.precision is not None:
        diag, factors = states.diag.data, states.factors.data
        covariances = [np.diag(lam) + phi @ phi.T for lam, phi in zip(diag, factors)]
        spectra = [symmetric_eigen(p)[0] for p in states.precision.data]
        written.append(out / "eigenvalues.svg")
        plot_eigenvalues(written[-1], spectra)
    else:
        covariances = [np.eye(prototypes.shape[1])] * len(prototypes)
    written.append(out / "ellipses.svg")
    plot_ellipses(written[-1], prototypes, covariances, features, labels)
    return written
