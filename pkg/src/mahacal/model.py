"""Prototype heads: meta-learned Mahalanobis covariances and baselines.

The Mahalanobis head builds, for each class of a task, a prototype and a
covariance ``diag(lam) + Phi Phi^T`` predicted from the class's support set.
Logits are class-conditional Gaussian log-densities.  At inference the
logits become the mean of a Gaussian over logits whose standard deviation
grows with the (temperature-scaled) energy of the query, and class
probabilities are averaged over Monte-Carlo logit samples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import linalg
from . import tensor as tt
from .linalg import DIAG_FLOOR, LowRankCovariance
from .nets import FeatureExtractor, Module, SetEncoder
from .tensor import Tensor

logger = logging.getLogger(__name__)

HEAD_KINDS = ("mahalanobis", "protonet", "protonet_sn", "shrinkage_class", "shrinkage_shared")
HEAD_CODES = {kind: i for i, kind in enumerate(HEAD_KINDS)}


class NonFiniteLossError(FloatingPointError):
    """The episode loss evaluated to NaN or infinity."""


@dataclass
class ClassState:
    prototype: np.ndarray
    covariance: LowRankCovariance | None


@dataclass
class ClassStates:
    """Per-class prototypes and covariances for one task, batched over classes."""

    prototypes: Tensor  # (C, d)
    precision: Tensor | None = None  # (C, d, d)
    logdet: Tensor | None = None  # (C,)
    diag: Tensor | None = None  # (C, d)
    factors: Tensor | None = None  # (C, d, r)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def to_list(self) -> list[ClassState]:
        out = []
        for c in range(self.n_classes):
            cov = None
            if self.precision is not None:
                cov = LowRankCovariance(
                    self.diag.data[c].copy(),
                    self.factors.data[c].copy(),
                    self.precision.data[c].copy(),
                    float(self.logdet.data[c]),
                )
            out.append(ClassState(self.prototypes.data[c].copy(), cov))
        return out

    @classmethod
    def from_arrays(cls, prototypes, precision=None, logdet=None) -> "ClassStates":
        prototypes = Tensor(prototypes)
        if precision is None:
            return cls(prototypes)
        precision = np.asarray(precision, dtype=np.float64)
        if logdet is None:
            logdet = np.array([-np.linalg.slogdet(p)[1] for p in precision])
        return cls(prototypes, Tensor(precision), Tensor(logdet))


# ---------------------------------------------------------------------------
# head arithmetic
# ---------------------------------------------------------------------------


def group_by_class(features, labels, n_classes: int) -> Tensor:
    """Stack support features into ``(C, K, d)``; every class needs K items."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    if len(counts) > n_classes:
        raise ValueError(f"label {labels.max()} out of range for {n_classes} classes")
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"support set has no examples for classes {missing}")
    if np.any(counts != counts[0]):
        raise ValueError(f"support set is unbalanced: per-class counts {counts.tolist()}")
    order = np.argsort(labels, kind="stable")
    features = tt.as_tensor(features)
    grouped = tt.index_select(features, order, axis=0)
    return tt.reshape(grouped, (n_classes, int(counts[0]), features.shape[-1]))


def truncated_sigmoid(raw, floor: float = DIAG_FLOOR) -> Tensor:
    return tt.clamp_min(tt.sigmoid(raw), floor)


def squared_distances(states: ClassStates, z) -> Tensor:
    """``(Q, C)`` Mahalanobis (or squared Euclidean, without covariances) distances."""
    z = tt.as_tensor(z)
    q, d = z.shape
    delta = tt.reshape(z, (q, 1, d)) - tt.reshape(states.prototypes, (1,) + states.prototypes.shape)
    if states.precision is None:
        return tt.sum(delta * delta, axis=-1)
    # (C, Q, d) @ (C, d, d) keeps one matmul per class
    per_class = tt.transpose(delta, (1, 0, 2))
    projected = per_class @ states.precision
    return tt.transpose(tt.sum(projected * per_class, axis=-1))


def mahalanobis_logits(states: ClassStates, z) -> Tensor:
    """Gaussian log-density logits ``-maha/2 - logdet/2`` (Protonet: ``-||z - mu||^2``)."""
    dist = squared_distances(states, z)
    if states.precision is None:
        return -dist
    return dist * -0.5 - tt.reshape(states.logdet, (1, -1)) * 0.5


def energy_scale(distances, temperature: float, eps: float = 1e-3) -> np.ndarray:
    """Logit standard deviation ``max(eps, -(1/T) log sum_c exp(-dist_c))``.

    ``distances`` holds the Mahalanobis distances only; log-determinants do
    not enter the energy.
    """
    if temperature < 1:
        raise ValueError(f"temperature must be >= 1, got {temperature}")
    dist = np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=np.float64)
    m = np.min(dist, axis=-1, keepdims=True)
    lse = -m[..., 0] + np.log(np.sum(np.exp(-(dist - m)), axis=-1))
    return np.maximum(eps, -lse / temperature)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def logit_normal_probs(logit_mean: np.ndarray, scale: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Average softmax over ``logit_mean + scale * noise``; ``noise`` is ``(Q, M, C)``."""
    draws = logit_mean[:, None, :] + scale[:, None, None] * noise
    return softmax_np(draws).mean(axis=1)


@dataclass
class LogitNormalPrediction:
    logit_mean: np.ndarray  # (Q, C)
    scale: np.ndarray  # (Q,)
    temperature: int
    samples: int
    probabilities: np.ndarray  # (Q, C)


def predict(
    states: ClassStates,
    z,
    temperature: int,
    samples: int,
    rng: np.random.Generator,
    eps: float = 1e-3,
    chunk: int = 4096,
) -> LogitNormalPrediction:
    """Monte-Carlo logit-normal predictive distribution for queries ``z``."""
    if samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    logits = mahalanobis_logits(states, z).data
    scale = energy_scale(squared_distances(states, z).data, temperature, eps)
    return predict_from_logits(logits, scale, temperature, samples, rng, chunk)


def predict_from_logits(logits, scale, temperature, samples, rng, chunk: int = 4096) -> LogitNormalPrediction:
    logits = np.asarray(logits, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    q, c = logits.shape
    probs = np.empty_like(logits)
    for start in range(0, q, chunk):
        stop = min(q, start + chunk)
        noise = rng.standard_normal((stop - start, samples, c))
        probs[start:stop] = logit_normal_probs(logits[start:stop], scale[start:stop], noise)
    return LogitNormalPrediction(logits, scale, temperature, samples, probs)


def episode_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of the deterministic logits."""
    labels = np.asarray(labels)
    logp = tt.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    loss = -tt.mean(picked)
    if not np.isfinite(loss.data):
        raise NonFiniteLossError(f"episode loss is not finite ({loss.item()})")
    return loss


# ---------------------------------------------------------------------------
# temperatures
# ---------------------------------------------------------------------------


def mean_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(p, 1e-12))))


def tune_energy_temperature(
    episodes: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    samples: int,
    rng: np.random.Generator,
    eps: float = 1e-3,
    t_max: int = 1000,
) -> int:
    """Smallest integer T >= 1 whose sampled NLL does not exceed the deterministic NLL.

    ``episodes`` holds ``(logit_mean, distances, labels)`` per validation
    episode.  One set of standard-normal draws is shared by every candidate
    T, so the comparison across T is not blurred by fresh sampling noise.
    """
    if not episodes:
        raise ValueError("temperature tuning needs at least one validation episode")
    logits = np.concatenate([e[0] for e in episodes])
    dists = np.concatenate([e[1] for e in episodes])
    labels = np.concatenate([e[2] for e in episodes])
    deterministic = mean_nll(softmax_np(logits), labels)
    noise = rng.standard_normal((len(labels),) + (samples, logits.shape[1]))
    for t in range(1, t_max + 1):
        scale = energy_scale(dists, t, eps)
        sampled = mean_nll(logit_normal_probs(logits, scale, noise), labels)
        if sampled <= deterministic:
            return t
    logger.warning("energy temperature hit the cap T_max=%d without matching deterministic NLL", t_max)
    return t_max


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def baseline_temperature_scale(logits, labels, lo: float = 0.05, hi: float = 20.0, tol: float = 1e-4) -> float:
    """Logit temperature minimizing validation NLL, by golden-section search."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.arange(len(labels))

    def nll(tau: float) -> float:
        scaled = logits / tau
        m = scaled.max(axis=1)
        lse = m + np.log(np.exp(scaled - m[:, None]).sum(axis=1))
        return float(np.mean(lse - scaled[rows, labels]))

    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = nll(c), nll(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = nll(d)
    return (a + b) / 2


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class ShrinkageHead(Module):
    """Meta-learned diagonal and mixing weight for the empirical-covariance baselines."""

    def __init__(self, dim: int):
        self.delta = Tensor(np.zeros(1), requires_grad=True)
        self.diag = Tensor(np.zeros(dim), requires_grad=True)

    def covariance_parts(self, centered: Tensor, shared: bool) -> tuple[Tensor, Tensor]:
        """Diagonal ``delta*lam`` and factors ``sqrt(1-delta)*Phi`` of the shrinkage mix."""
        c, k, d = centered.shape
        mix = tt.sigmoid(self.delta)
        lam = tt.softplus(self.diag) * mix
        keep = tt.exp(tt.log(1.0 - mix) * 0.5)
        if shared:
            cols = tt.transpose(tt.reshape(centered, (c * k, d)))
            phi = tt.reshape(cols, (1, d, c * k)) * (keep / np.sqrt(c * k))
            return tt.reshape(lam, (1, d)), phi
        phi = tt.transpose(centered) * (keep / np.sqrt(k))
        return tt.broadcast_to(lam, (c, d)), phi


class FewShotModel(Module):
    """Feature extractor plus one of the prototype heads."""

    def __init__(
        self,
        head: str = "mahalanobis",
        rank: int = 0,
        rng: np.random.Generator | None = None,
        in_dim: int = 2,
        feature_dim: int = 16,
        depth: int = 3,
        spectral_bound: float = 3.0,
        encoder_hidden: int = 32,
        encoder_heads: int = 4,
        encoder_blocks: int = 2,
        factor_gain: float = 0.1,
        eps: float = 1e-3,
    ):
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head {head!r}; choose from {', '.join(HEAD_KINDS)}")
        if rank < 0:
            raise ValueError("rank must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = head
        self.rank = rank if head == "mahalanobis" else 0
        self.eps = eps
        self.temperature = 1
        self.logit_temperature = 1.0
        self.extractor = FeatureExtractor(
            rng, in_dim=in_dim, dim=feature_dim, depth=depth,
            spectral=head != "protonet", bound=spectral_bound,
        )
        self.encoder = None
        self.head = None
        if head == "mahalanobis":
            self.encoder = SetEncoder(
                rng, dim=feature_dim, rank=rank, hidden=encoder_hidden, heads=encoder_heads,
                n_blocks=encoder_blocks, factor_gain=factor_gain,
            )
        elif head.startswith("shrinkage"):
            self.head = ShrinkageHead(feature_dim)

    @property
    def uses_energy(self) -> bool:
        return self.kind == "mahalanobis"

    # -- per-task state ---------------------------------------------------
    def class_states(self, support_x, support_y, n_classes: int) -> ClassStates:
        feats = self.extractor(support_x)
        grouped = group_by_class(feats, support_y, n_classes)  # (C, K, d)
        c, k, d = grouped.shape
        prototypes = tt.mean(grouped, axis=1)
        if self.kind in ("protonet", "protonet_sn"):
            return ClassStates(prototypes)
        centered = grouped - tt.reshape(prototypes, (c, 1, d))
        if self.kind == "mahalanobis":
            # one-shot sets are left uncentred: centring would zero them out
            raw, factors = self.encoder(centered if k > 1 else grouped)
            diag = truncated_sigmoid(raw)
        else:
            diag, factors = self.head.covariance_parts(centered, shared=self.kind == "shrinkage_shared")
        precision, logdet = linalg.inverse_and_logdet(diag, factors)
        if precision.shape[0] != c:
            precision = tt.broadcast_to(precision, (c, d, d))
            logdet = tt.broadcast_to(logdet, (c,))
            diag = tt.broadcast_to(diag, (c, d))
            factors = tt.broadcast_to(factors, (c,) + factors.shape[1:])
        return ClassStates(prototypes, precision, logdet, diag, factors)

    def logits(self, states: ClassStates, query_x) -> Tensor:
        return mahalanobis_logits(states, self.extractor(query_x))

    def loss(self, task) -> tuple[Tensor, float]:
        """Training loss on one task and the query accuracy of its logits."""
        states = self.class_states(task.support_x, task.support_y, task.n_classes)
        logits = self.logits(states, task.query_x)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == task.query_y))
        return episode_loss(logits, task.query_y), acc

    # -- inference --------------------------------------------------------
    def predict_features(self, states: ClassStates, z, rng: np.random.Generator, samples: int = 100):
        """Predictive probabilities and deterministic logits for features ``z``.

        Mahalanobis heads use the Monte-Carlo logit-normal predictive; the
        baselines use ``softmax(logits / tau)``.
        """
        if self.uses_energy:
            pred = predict(states, z, self.temperature, samples, rng, self.eps)
            return pred.probabilities, pred.logit_mean
        logits = mahalanobis_logits(states, z).data / self.logit_temperature
        return softmax_np(logits), logits

    def predict_proba(self, states: ClassStates, query_x, rng: np.random.Generator, samples: int = 100):
        return self.predict_features(states, self.extractor(query_x).data, rng, samples)

    # -- persistence ------------------------------------------------------
    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = super().state_dict(prefix)
        state[f"{prefix}head.kind"] = np.array(float(HEAD_CODES[self.kind]))
        state[f"{prefix}head.rank"] = np.array(float(self.rank))
        state[f"{prefix}head.temperature"] = np.array(float(self.temperature))
        state[f"{prefix}head.logit_temperature"] = np.array(float(self.logit_temperature))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        kind = int(state.get(f"{prefix}head.kind", -1))
        if kind != HEAD_CODES[self.kind]:
            raise ValueError(f"checkpoint head code {kind} does not match model head {self.kind!r}")
        rank = int(state.get(f"{prefix}head.rank", -1))
        if rank != self.rank:
            raise ValueError(f"checkpoint rank {rank} does not match model rank {self.rank}")
        super().load_state_dict(state, prefix)
        self.temperature = int(state[f"{prefix}head.temperature"])
        self.logit_temperature = float(state[f"{prefix}head.logit_temperature"])
