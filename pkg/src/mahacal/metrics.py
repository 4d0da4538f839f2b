"""Calibration, OOD-separability and precision-spectrum metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .linalg import symmetric_eigen

logger = logging.getLogger(__name__)

N_BINS = 15


@dataclass
class BinTable:
    edges: np.ndarray  # (n_bins + 1,)
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (nan when empty)
    accuracy: np.ndarray  # mean correctness per bin (nan when empty)

    @property
    def ece(self) -> float:
        used = self.counts > 0
        weights = self.counts[used] / self.counts.sum()
        return float(np.sum(weights * np.abs(self.accuracy[used] - self.confidence[used])))


def calibration_bins(confidences, correct, n_bins: int = N_BINS) -> BinTable:
    """Equal-width confidence bins ``(k/n, (k+1)/n]``; zero goes in the first bin.

    ``correct`` may be fractional: OOD queries are scored against the
    accuracy of a uniform guess, ``1/C``.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("ECE of an empty prediction set is undefined")
    if conf.shape != hit.shape:
        raise ValueError(f"confidences {conf.shape} and correctness {hit.shape} differ in length")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.bincount(idx, weights=conf, minlength=n_bins) / counts
        mean_acc = np.bincount(idx, weights=hit, minlength=n_bins) / counts
    return BinTable(edges, counts, mean_conf, mean_acc)


def ece(confidences, correct, n_bins: int = N_BINS) -> float:
    return calibration_bins(confidences, correct, n_bins).ece


def nll_and_accuracy(probabilities, labels) -> tuple[float, float]:
    """Mean negative log-likelihood and argmax accuracy (ties go to the lowest index)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    p_true = probs[np.arange(len(labels)), labels]
    clamped = int(np.sum(p_true < 1e-12))
    if clamped:
        logger.warning("%d true-label probabilities below 1e-12 clamped before log", clamped)
    nll = float(np.mean(-np.log(np.maximum(p_true, 1e-12))))
    acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    return nll, acc


def energy_score(logits) -> np.ndarray | float:
    """``log sum_c exp(logit_c)`` over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    out = np.squeeze(m, -1) + np.log(np.sum(np.exp(x - m), axis=-1))
    return float(out) if out.ndim == 0 else out


def predictive_entropy(probs) -> np.ndarray:
    """Shannon entropy in nats over the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def auroc_aupr(id_scores, ood_scores) -> tuple[float, float]:
    """Threshold-free ID-vs-OOD separability; higher score means more in-distribution.

    AUROC is the Mann-Whitney statistic with mid-ranks for ties; AUPR is
    average precision with ID as the positive class.
    """
    pos = np.asarray(id_scores, dtype=np.float64).ravel()
    neg = np.asarray(ood_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one ID and one OOD score")
    scores = np.concatenate([pos, neg])
    ranks = rankdata(scores)
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    auroc = float(u / (pos.size * neg.size))

    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], is_pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie group
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / pos.size
    aupr = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return auroc, aupr


# ---------------------------------------------------------------------------
# precision-matrix analyses
# ---------------------------------------------------------------------------


@dataclass
class Spectrum:
    eigenvalues: np.ndarray  # descending
    spread: float


def eigen_spectrum_report(states) -> list[Spectrum]:
    """Eigenvalues of each class's precision matrix with a max/min spread."""
    out = []
    for st in states.to_list() if hasattr(states, "to_list") else states:
        precision = st.covariance.inverse if hasattr(st, "covariance") else np.asarray(st)
        vals, _ = symmetric_eigen(precision)
        out.append(Spectrum(vals, float(vals[0] / vals[-1])))
    return out


@dataclass
class PerturbationTable:
    predicted: dict = field(default_factory=dict)  # mean accuracy / nll / ece
    modified: dict = field(default_factory=dict)
    better: dict = field(default_factory=dict)  # fraction of non-tied variants the predicted matrix beats
    ties: dict = field(default_factory=dict)
    n_variants: int = 0

    def rows(self) -> list[dict]:
        keys = ("accuracy", "nll", "ece")
        return [
            {"matrix": "predicted", **{k: self.predicted[k] for k in keys},
             **{f"better_{k}": self.better[k] for k in keys}},
            {"matrix": "modified", **{k: self.modified[k] for k in keys},
             **{f"better_{k}": 1.0 - self.better[k] for k in keys}},
        ]


def reset_eigenvalue(precision: np.ndarray, index: int, vals=None, vecs=None) -> np.ndarray:
    """Recompose ``Q diag(lam') Q^T`` with the ``index``-th eigenvalue set to one."""
    if vals is None:
        vals, vecs = symmetric_eigen(precision)
    vals = vals.copy()
    vals[index] = 1.0
    return (vecs * vals) @ vecs.T


def _episode_scores(probs: np.ndarray, labels: np.ndarray) -> dict:
    nll, acc = nll_and_accuracy(probs, labels)
    conf = probs.max(axis=1)
    return {"accuracy": acc, "nll": nll, "ece": ece(conf, np.argmax(probs, axis=1) == labels)}


def eigen_perturbation_experiment(
    episodes: Sequence[tuple],
    predict_fn: Callable,
    tie_tol: float = 1e-9,
) -> PerturbationTable:
    """Compare predicted precision matrices against single-eigenvalue resets.

    ``episodes`` holds ``(prototypes, precisions, query_features, labels)``
    per episode and ``predict_fn(prototypes, precisions, z)`` returns class
    probabilities.  Each class precision of each episode yields one variant
    per eigenvalue; every variant is scored on its episode's queries and
    compared with the unmodified prediction.  A variant whose score is within
    ``tie_tol`` of the prediction is a tie (resetting an eigenvalue that is
    already one changes nothing); ``better`` is the fraction of the remaining
    variants the prediction beats and is NaN when every variant ties.
    """
    higher_better = {"accuracy": True, "nll": False, "ece": False}
    pred_scores, mod_scores = [], []
    wins = {k: 0.0 for k in higher_better}
    ties = {k: 0 for k in higher_better}
    for prototypes, precisions, z, labels in episodes:
        base = _episode_scores(predict_fn(prototypes, precisions, z), labels)
        pred_scores.append(base)
        for c, precision in enumerate(precisions):
            vals, vecs = symmetric_eigen(precision)
            for i in range(len(vals)):
                variant = precisions.copy()
                variant[c] = reset_eigenvalue(precision, i, vals, vecs)
                scores = _episode_scores(predict_fn(prototypes, variant, z), labels)
                mod_scores.append(scores)
                for key, up in higher_better.items():
                    diff = base[key] - scores[key] if up else scores[key] - base[key]
                    if abs(diff) <= tie_tol:
                        ties[key] += 1
                    elif diff > 0:
                        wins[key] += 1.0
    n = len(mod_scores)
    table = PerturbationTable(n_variants=n, ties=ties)
    for key in higher_better:
        table.predicted[key] = float(np.mean([s[key] for s in pred_scores]))
        table.modified[key] = float(np.mean([s[key] for s in mod_scores])) if n else float("nan")
        decided = n - ties[key]
        table.better[key] = wins[key] / decided if decided else float("nan")
    return table
