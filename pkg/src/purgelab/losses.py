"""Loss functions for the joint training objective.

The centerpiece is the cluster purge loss: a per-class hinge that pulls
equivalent mutants inside their class's negative verge and pushes
non-equivalent mutants outside the positive verge, each by a margin. The
module also provides the adapted contrastive loss, a minimal triplet
baseline, stabilized two-way cross-entropy, and the joint combination, all
with analytic gradients with respect to the embeddings (and logits where
applicable).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyBatchError,
    NormalizationError,
    NumericError,
)
from .vecmath import EmaParams, as_vector, cosine_distance, cosine_distance_gradient
from .verges import VergeRegistry

_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters shared by the metric losses.

    gamma          EMA smoothing factor for verge updates (>= 1).
    alpha          exponent on the equivalent-side hinge (> 0).
    beta           exponent on the non-equivalent-side hinge (> 0).
    zeta           margin added to both hinge arguments; may be negative,
                   which carves an error zone the loss leaves alone. Also
                   used as the triplet baseline's margin.
    lam            weight of the metric loss in the joint objective.
    hinge_epsilon  floor for the hinge argument inside derivative factors
                   only, guarding fractional exponents near activation
                   onset; loss values are never clamped.
    """

    gamma: float = 12.0
    alpha: float = 2.0
    beta: float = 0.5
    zeta: float = -0.05
    lam: float = 1.15
    hinge_epsilon: float = 1e-6

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 1.0:
            raise ConfigError(f"gamma must be finite and >= 1, got {self.gamma!r}")
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ConfigError("alpha and beta must be strictly positive")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be non-negative, got {self.lam!r}")
        if not 0.0 < self.hinge_epsilon <= 1e-3:
            raise ConfigError(f"hinge_epsilon must be in (0, 1e-3], got {self.hinge_epsilon!r}")
        if not np.isfinite(self.zeta):
            raise ConfigError("zeta must be finite")

    def ema_params(self) -> EmaParams:
        return EmaParams(self.gamma)


@dataclass
class EmbeddedSample:
    """One corpus pair in embedding space.

    ``origin_embedding`` is the embedding of the class's original program,
    ``mutant_embedding`` the embedding of one of its mutants, and ``label``
    is 1 when the mutant is equivalent to the origin. Both embeddings must
    be unit-norm.
    """

    class_id: int
    origin_embedding: np.ndarray
    mutant_embedding: np.ndarray
    label: int

    def __post_init__(self):
        self.origin_embedding = as_vector(self.origin_embedding, "origin_embedding")
        self.mutant_embedding = as_vector(self.mutant_embedding, "mutant_embedding")
        if self.origin_embedding.shape != self.mutant_embedding.shape:
            raise DimensionError("origin and mutant embeddings must share a dimension")
        for name, vec in (
            ("origin_embedding", self.origin_embedding),
            ("mutant_embedding", self.mutant_embedding),
        ):
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > _UNIT_NORM_TOL:
                raise NormalizationError(f"{name} must be unit-norm, got norm {norm!r}")
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class LossOutput:
    """Loss value plus the gradients the caller needs to backpropagate.

    Batch losses fill ``origin_grads``/``mutant_grads`` (one row per sample);
    cross-entropy fills ``logit_grads``; the triplet loss fills the
    anchor/positive/negative fields. ``skipped_count`` counts samples whose
    term was dropped because the required opposite verge was uninitialized.
    """

    value: float
    skipped_count: int = 0
    origin_grads: np.ndarray | None = None
    mutant_grads: np.ndarray | None = None
    logit_grads: np.ndarray | None = None
    anchor_grad: np.ndarray | None = None
    positive_grad: np.ndarray | None = None
    negative_grad: np.ndarray | None = None


def cluster_purge_loss(
    batch: Sequence[EmbeddedSample], registry: VergeRegistry, cfg: LossConfig
) -> LossOutput:
    """Cluster purge loss over a minibatch, with gradients into both embeddings.

    Each equivalent sample pays [dist - v_minus + zeta]_+ ^ alpha for sitting
    outside its class's negative verge; each non-equivalent sample pays
    [v_plus - dist + zeta]_+ ^ beta for sitting inside the positive verge.
    The mean is over the full batch size m, so a sample whose required
    opposite verge has never formed contributes zero (and is counted in
    ``skipped_count``) without shrinking the divisor. The registry is read as
    constants: callers update it before computing the loss, and no gradient
    flows into the verges.
    """
    samples = list(batch)
    if not samples:
        raise EmptyBatchError("cluster_purge_loss needs a nonempty batch")
    m = len(samples)
    dim = samples[0].origin_embedding.shape[0]
    origin_grads = np.zeros((m, dim), dtype=np.float64)
    mutant_grads = np.zeros((m, dim), dtype=np.float64)
    total = 0.0
    skipped = 0
    for i, sample in enumerate(samples):
        state = registry.get(sample.class_id)
        verge = None
        if state is not None:
            verge = state.v_minus if sample.label == 1 else state.v_plus
        if verge is None:
            skipped += 1
            continue
        d = cosine_distance(sample.origin_embedding, sample.mutant_embedding)
        if sample.label == 1:
            arg = d - verge + cfg.zeta
            exponent = cfg.alpha
            sign = 1.0
        else:
            arg = verge - d + cfg.zeta
            exponent = cfg.beta
            sign = -1.0
        if arg <= 0.0:
            continue
        total += arg**exponent
        # Derivative factor only: the floor keeps beta < 1 bounded at onset.
        factor = exponent * max(arg, cfg.hinge_epsilon) ** (exponent - 1.0)
        d_dist = sign * factor / m
        grad_o, grad_s = cosine_distance_gradient(
            sample.origin_embedding, sample.mutant_embedding
        )
        origin_grads[i] = d_dist * grad_o
        mutant_grads[i] = d_dist * grad_s
    return LossOutput(
        value=total / m,
        skipped_count=skipped,
        origin_grads=origin_grads,
        mutant_grads=mutant_grads,
    )


def contrastive_loss(batch: Sequence[EmbeddedSample], cfg: LossConfig) -> LossOutput:
    """Adapted contrastive loss over origin-mutant pairs; class ids are unused.

    Equivalent pairs pay their raw distance, non-equivalent pairs pay
    [zeta - dist]_+, i.e. only while they sit inside the margin.
    """
    samples = list(batch)
    if not samples:
        raise EmptyBatchError("contrastive_loss needs a nonempty batch")
    m = len(samples)
    dim = samples[0].origin_embedding.shape[0]
    origin_grads = np.zeros((m, dim), dtype=np.float64)
    mutant_grads = np.zeros((m, dim), dtype=np.float64)
    total = 0.0
    for i, sample in enumerate(samples):
        d = cosine_distance(sample.origin_embedding, sample.mutant_embedding)
        if sample.label == 1:
            arg = d
            d_dist = 1.0 / m
        else:
            arg = cfg.zeta - d
            d_dist = -1.0 / m
        if arg <= 0.0:
            continue
        total += arg
        grad_o, grad_s = cosine_distance_gradient(
            sample.origin_embedding, sample.mutant_embedding
        )
        origin_grads[i] = d_dist * grad_o
        mutant_grads[i] = d_dist * grad_s
    return LossOutput(value=total / m, origin_grads=origin_grads, mutant_grads=mutant_grads)


def triplet_loss(anchor, positive, negative, margin: float) -> LossOutput:
    """Classic triplet hinge [dist(a, p) - dist(a, n) + margin]_+.

    Uses the same normalized cosine distance as the other losses so the
    baseline is comparable. Inputs must be unit-norm.
    """
    anchor = _unit_checked(anchor, "anchor")
    positive = _unit_checked(positive, "positive")
    negative = _unit_checked(negative, "negative")
    d_pos = cosine_distance(anchor, positive)
    d_neg = cosine_distance(anchor, negative)
    arg = d_pos - d_neg + margin
    zero = np.zeros_like(anchor)
    if arg <= 0.0:
        return LossOutput(value=0.0, anchor_grad=zero, positive_grad=zero.copy(), negative_grad=zero.copy())
    ga_pos, gp = cosine_distance_gradient(anchor, positive)
    ga_neg, gn = cosine_distance_gradient(anchor, negative)
    return LossOutput(
        value=arg,
        anchor_grad=ga_pos - ga_neg,
        positive_grad=gp,
        negative_grad=-gn,
    )


def cross_entropy(logits, label: int) -> LossOutput:
    """Two-way softmax cross-entropy with max-subtraction stabilization.

    Returns -log softmax(logits)[label] and the gradient softmax - one_hot.
    """
    z = as_vector(logits, "logits")
    if z.shape[0] != 2:
        raise DimensionError(f"logits must be a 2-vector, got {z.shape[0]}")
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label!r}")
    shifted = z - z.max()
    exp = np.exp(shifted)
    total = float(exp.sum())
    value = float(np.log(total) - shifted[label])
    grad = exp / total
    grad[label] -= 1.0
    return LossOutput(value=value, logit_grads=grad)


def joint_loss(metric_value: float, ce_value: float, lam: float) -> float:
    """Joint objective: metric_value * lam + ce_value."""
    if not (np.isfinite(metric_value) and np.isfinite(ce_value) and np.isfinite(lam)):
        raise NumericError("joint_loss inputs must be finite")
    if lam < 0.0:
        raise ConfigError(f"lam must be non-negative, got {lam!r}")
    return metric_value * lam + ce_value


def _unit_checked(vec, name: str) -> np.ndarray:
    v = as_vector(vec, name)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > _UNIT_NORM_TOL:
        raise NormalizationError(f"{name} must be unit-norm, got norm {norm!r}")
    return v
