"""Deterministic feed-forward encoder and pair classifier with hand-written
backpropagation.

The encoder maps hashed text features through
feature_dim -> hidden_dim -> embed_dim with a tanh between the layers and
L2-normalizes the output, so every embedding is unit-norm by construction.
The pair head consumes the symmetric block [o, s, |o - s|, o * s] built from
two embeddings and emits two logits (equivalent / non-equivalent).

Forward passes cache what the backward pass needs; each cache records the
parameter version it was computed under, and the backward functions refuse a
cache that has gone stale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateVectorError, DimensionError, StateError


@dataclass(frozen=True)
class EncoderDims:
    feature_dim: int = 256
    hidden_dim: int = 128
    embed_dim: int = 64
    pair_hidden_dim: int = 64

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "embed_dim", "pair_hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class EncoderParams:
    w1: np.ndarray  # (hidden, feature)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (embed, hidden)
    b2: np.ndarray  # (embed,)
    version: int = 0


@dataclass
class PairClassifierParams:
    w1: np.ndarray  # (pair_hidden, 4*embed)
    b1: np.ndarray  # (pair_hidden,)
    w2: np.ndarray  # (2, pair_hidden)
    b2: np.ndarray  # (2,)
    version: int = 0


def init_params(
    seed: int, dims: EncoderDims = EncoderDims()
) -> tuple[EncoderParams, PairClassifierParams]:
    """Reproducible scale-balanced initialization: Glorot weights, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(rows, cols):
        scale = np.sqrt(2.0 / (rows + cols))
        return rng.normal(0.0, scale, size=(rows, cols))

    encoder = EncoderParams(
        w1=glorot(dims.hidden_dim, dims.feature_dim),
        b1=np.zeros(dims.hidden_dim),
        w2=glorot(dims.embed_dim, dims.hidden_dim),
        b2=np.zeros(dims.embed_dim),
    )
    head = PairClassifierParams(
        w1=glorot(dims.pair_hidden_dim, 4 * dims.embed_dim),
        b1=np.zeros(dims.pair_hidden_dim),
        w2=glorot(2, dims.pair_hidden_dim),
        b2=np.zeros(2),
    )
    return encoder, head


@dataclass
class EncoderCache:
    features: np.ndarray  # (m, feature)
    hidden: np.ndarray  # (m, hidden), post-tanh
    prenorm: np.ndarray  # (m, embed), before normalization
    norms: np.ndarray  # (m, 1)
    embeddings: np.ndarray  # (m, embed), unit rows
    params_version: int


@dataclass
class EncoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    inputs: np.ndarray  # (m, feature)


def encode_batch(params: EncoderParams, features: np.ndarray) -> EncoderCache:
    """Forward pass over a batch of feature rows; embeddings are unit-norm."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.w1.shape[1]:
        raise DimensionError(
            f"features must be (m, {params.w1.shape[1]}), got {features.shape}"
        )
    hidden = np.tanh(features @ params.w1.T + params.b1)  # (m, hidden)
    prenorm = hidden @ params.w2.T + params.b2  # (m, embed)
    norms = np.linalg.norm(prenorm, axis=1, keepdims=True)  # (m, 1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("encoder produced a zero vector before normalization")
    embeddings = prenorm / norms
    return EncoderCache(
        features=features,
        hidden=hidden,
        prenorm=prenorm,
        norms=norms,
        embeddings=embeddings,
        params_version=params.version,
    )


def encode(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """Encode a single feature vector to a unit-norm embedding."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise DimensionError(f"features must be 1-D, got shape {features.shape}")
    return encode_batch(params, features[None, :]).embeddings[0]


def encoder_backward(
    params: EncoderParams, cache: EncoderCache, upstream: np.ndarray
) -> EncoderGrads:
    """Backpropagate gradients w.r.t. embeddings into parameters and inputs.

    The normalization Jacobian (I - e e^T) / ||z|| is applied first, so
    upstream gradients on the unit embeddings flow correctly into the raw
    layer outputs.
    """
    if cache.params_version != params.version:
        raise StateError(
            f"stale forward cache: params version {params.version}, "
            f"cache version {cache.params_version}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.embeddings.shape:
        raise DimensionError(
            f"upstream must match embeddings shape {cache.embeddings.shape}, got {upstream.shape}"
        )
    e = cache.embeddings
    radial = np.sum(upstream * e, axis=1, keepdims=True)
    d_prenorm = (upstream - radial * e) / cache.norms  # (m, embed)
    d_w2 = d_prenorm.T @ cache.hidden
    d_b2 = d_prenorm.sum(axis=0)
    d_hidden = d_prenorm @ params.w2  # (m, hidden)
    d_pre1 = d_hidden * (1.0 - cache.hidden**2)  # tanh'
    d_w1 = d_pre1.T @ cache.features
    d_b1 = d_pre1.sum(axis=0)
    d_inputs = d_pre1 @ params.w1
    return EncoderGrads(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2, inputs=d_inputs)


@dataclass
class PairCache:
    origins: np.ndarray  # (m, embed)
    mutants: np.ndarray  # (m, embed)
    pair_features: np.ndarray  # (m, 4*embed)
    hidden: np.ndarray  # (m, pair_hidden), post-tanh
    logits: np.ndarray  # (m, 2)
    params_version: int


@dataclass
class PairGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    origin_grads: np.ndarray  # (m, embed)
    mutant_grads: np.ndarray  # (m, embed)


def pair_features(origins: np.ndarray, mutants: np.ndarray) -> np.ndarray:
    """Symmetric-difference pair block [o, s, |o - s|, o * s]."""
    return np.concatenate(
        [origins, mutants, np.abs(origins - mutants), origins * mutants], axis=1
    )


def classify_pairs(
    params: PairClassifierParams, origins: np.ndarray, mutants: np.ndarray
) -> PairCache:
    """Forward pass of the pair head over matched rows of embeddings."""
    origins = np.asarray(origins, dtype=np.float64)
    mutants = np.asarray(mutants, dtype=np.float64)
    if origins.shape != mutants.shape or origins.ndim != 2:
        raise DimensionError("origins and mutants must be matching (m, embed) matrices")
    if 4 * origins.shape[1] != params.w1.shape[1]:
        raise DimensionError(
            f"embed dim {origins.shape[1]} does not match head input {params.w1.shape[1]}"
        )
    pf = pair_features(origins, mutants)
    hidden = np.tanh(pf @ params.w1.T + params.b1)
    logits = hidden @ params.w2.T + params.b2
    return PairCache(
        origins=origins,
        mutants=mutants,
        pair_features=pf,
        hidden=hidden,
        logits=logits,
        params_version=params.version,
    )


def classify_pair(params: PairClassifierParams, o: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Logits for a single (origin, mutant) embedding pair."""
    o = np.asarray(o, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if o.ndim != 1 or s.ndim != 1:
        raise DimensionError("classify_pair expects 1-D embeddings")
    return classify_pairs(params, o[None, :], s[None, :]).logits[0]


def pair_backward(
    params: PairClassifierParams, cache: PairCache, upstream: np.ndarray
) -> PairGrads:
    """Backpropagate logit gradients into head parameters and both embeddings.

    |o - s| uses the sign subgradient, with sign(0) = 0 on tied components.
    """
    if cache.params_version != params.version:
        raise StateError(
            f"stale forward cache: params version {params.version}, "
            f"cache version {cache.params_version}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.logits.shape:
        raise DimensionError(
            f"upstream must match logits shape {cache.logits.shape}, got {upstream.shape}"
        )
    d_w2 = upstream.T @ cache.hidden
    d_b2 = upstream.sum(axis=0)
    d_hidden = upstream @ params.w2
    d_pre = d_hidden * (1.0 - cache.hidden**2)
    d_w1 = d_pre.T @ cache.pair_features
    d_b1 = d_pre.sum(axis=0)
    d_pf = d_pre @ params.w1  # (m, 4*embed)
    d_o_block, d_s_block, d_abs, d_prod = np.split(d_pf, 4, axis=1)
    diff_sign = np.sign(cache.origins - cache.mutants)
    origin_grads = d_o_block + diff_sign * d_abs + cache.mutants * d_prod
    mutant_grads = d_s_block - diff_sign * d_abs + cache.origins * d_prod
    return PairGrads(
        w1=d_w1,
        b1=d_b1,
        w2=d_w2,
        b2=d_b2,
        origin_grads=origin_grads,
        mutant_grads=mutant_grads,
    )
