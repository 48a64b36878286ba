"""Joint cross-entropy + metric-loss training loop.

Per step, in order: encode origins and mutants, update verges from the
current distances (cluster-purge runs only), compute the metric loss and
cross-entropy, combine them with the metric weight, backpropagate (CE through
the head into the embeddings, metric gradients directly into the embeddings,
both through the encoder), and take one Adam step. Everything is
deterministic under a fixed (config, corpus, seed); verges persist across
epochs and live inside the checkpoint.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Batch, Corpus, FeatureCache, make_batches
from .encoder import (
    EncoderDims,
    EncoderParams,
    PairClassifierParams,
    classify_pairs,
    encode_batch,
    encoder_backward,
    init_params,
    pair_backward,
)
from .errors import (
    ConfigError,
    DeserializeError,
    DivergenceError,
    NumericError,
    VersionError,
)
from .losses import (
    EmbeddedSample,
    LossConfig,
    LossOutput,
    cluster_purge_loss,
    contrastive_loss,
    cross_entropy,
    joint_loss,
    triplet_loss,
)
from .verges import VergeRegistry

CHECKPOINT_MAGIC = b"purgelab-ckpt"
CHECKPOINT_VERSION = 1

LOSS_KINDS = ("ce_only", "ce_plus_cpl", "ce_plus_contrastive", "ce_plus_triplet")


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "ce_plus_cpl"
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 30
    batch_size: int = 4
    feature_dim: int = 256
    hidden_dim: int = 128
    embed_dim: int = 64
    pair_hidden_dim: int = 64
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.step_size <= 0.0:
            raise ConfigError(f"step_size must be positive, got {self.step_size!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("moment decay rates must lie in [0, 1)")
        if self.adam_epsilon <= 0.0:
            raise ConfigError("adam_epsilon must be positive")

    def dims(self) -> EncoderDims:
        return EncoderDims(
            feature_dim=self.feature_dim,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            pair_hidden_dim=self.pair_hidden_dim,
        )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass
class TrainerState:
    """Everything a training run carries: the checkpointable state."""

    config: TrainConfig
    encoder: EncoderParams
    head: PairClassifierParams
    registry: VergeRegistry
    adam: AdamState
    epoch: int = 0


@dataclass
class StepMetrics:
    ce_loss: float
    metric_loss: float
    joint_loss: float
    skipped_count: int


@dataclass
class EpochStats:
    epoch: int
    ce_loss: float
    metric_loss: float
    joint_loss: float
    skipped_count: int


@dataclass
class TrainResult:
    state: TrainerState
    history: list[EpochStats]
    step_trace: list[StepMetrics] | None = None


def init_state(config: TrainConfig) -> TrainerState:
    encoder, head = init_params(config.seed, config.dims())
    names = _named_arrays(encoder, head)
    adam = AdamState(
        m={name: np.zeros_like(arr) for name, arr in names},
        v={name: np.zeros_like(arr) for name, arr in names},
    )
    registry = VergeRegistry(config.loss.ema_params())
    return TrainerState(config=config, encoder=encoder, head=head, registry=registry, adam=adam)


def _named_arrays(
    encoder: EncoderParams, head: PairClassifierParams
) -> list[tuple[str, np.ndarray]]:
    return [
        ("enc.w1", encoder.w1),
        ("enc.b1", encoder.b1),
        ("enc.w2", encoder.w2),
        ("enc.b2", encoder.b2),
        ("head.w1", head.w1),
        ("head.b1", head.b1),
        ("head.w2", head.w2),
        ("head.b2", head.b2),
    ]


def _metric_loss(state: TrainerState, samples: list[EmbeddedSample]) -> LossOutput | None:
    kind = state.config.loss_kind
    cfg = state.config.loss
    if kind == "ce_only":
        return None
    if kind == "ce_plus_cpl":
        state.registry.batch_update(samples)
        return cluster_purge_loss(samples, state.registry, cfg)
    if kind == "ce_plus_contrastive":
        return contrastive_loss(samples, cfg)
    return _triplet_batch(samples, cfg)


def _triplet_batch(samples: list[EmbeddedSample], cfg: LossConfig) -> LossOutput:
    """Minimal in-batch sampler: every same-class (equivalent, non-equivalent)
    pair forms one (origin, equivalent, non-equivalent) triplet. Batches
    without such a pair contribute zero."""
    m = len(samples)
    dim = samples[0].origin_embedding.shape[0]
    origin_grads = np.zeros((m, dim), dtype=np.float64)
    mutant_grads = np.zeros((m, dim), dtype=np.float64)
    triplets = [
        (i, j)
        for i in range(m)
        if samples[i].label == 1
        for j in range(m)
        if samples[j].label == 0 and samples[j].class_id == samples[i].class_id
    ]
    if not triplets:
        return LossOutput(value=0.0, origin_grads=origin_grads, mutant_grads=mutant_grads)
    total = 0.0
    for i, j in triplets:
        out = triplet_loss(
            samples[i].origin_embedding,
            samples[i].mutant_embedding,
            samples[j].mutant_embedding,
            margin=cfg.zeta,
        )
        total += out.value
        origin_grads[i] += out.anchor_grad
        mutant_grads[i] += out.positive_grad
        mutant_grads[j] += out.negative_grad
    n = len(triplets)
    origin_grads /= n
    mutant_grads /= n
    return LossOutput(value=total / n, origin_grads=origin_grads, mutant_grads=mutant_grads)


def train_step(state: TrainerState, batch: Batch) -> StepMetrics:
    """One forward/backward/update cycle; mutates the state in place.

    Any non-finite value surfacing in the forward pass or the loss marks
    numeric divergence and aborts with a :class:`DivergenceError`; nothing
    is clipped or papered over.
    """
    try:
        return _train_step_inner(state, batch)
    except NumericError as exc:
        raise DivergenceError(f"numeric divergence: {exc}", epoch=state.epoch) from exc


def _train_step_inner(state: TrainerState, batch: Batch) -> StepMetrics:
    cfg = state.config
    lcfg = cfg.loss
    m = len(batch)
    cache_o = encode_batch(state.encoder, batch.origin_features)
    cache_s = encode_batch(state.encoder, batch.mutant_features)
    origins = cache_o.embeddings
    mutants = cache_s.embeddings
    samples = [
        EmbeddedSample(
            class_id=int(batch.class_ids[i]),
            origin_embedding=origins[i],
            mutant_embedding=mutants[i],
            label=int(batch.labels[i]),
        )
        for i in range(m)
    ]

    metric_out = _metric_loss(state, samples)
    metric_value = 0.0 if metric_out is None else metric_out.value
    skipped = 0 if metric_out is None else metric_out.skipped_count

    pair_cache = classify_pairs(state.head, origins, mutants)
    d_logits = np.zeros((m, 2), dtype=np.float64)
    ce_total = 0.0
    for i in range(m):
        out = cross_entropy(pair_cache.logits[i], int(batch.labels[i]))
        ce_total += out.value
        d_logits[i] = out.logit_grads
    ce_value = ce_total / m
    d_logits /= m

    joint = joint_loss(metric_value, ce_value, lcfg.lam)
    if not np.isfinite(joint):
        raise DivergenceError(f"non-finite joint loss {joint!r}", epoch=state.epoch)

    head_grads = pair_backward(state.head, pair_cache, d_logits)
    d_origins = head_grads.origin_grads
    d_mutants = head_grads.mutant_grads
    if metric_out is not None and metric_out.origin_grads is not None:
        d_origins = d_origins + lcfg.lam * metric_out.origin_grads
        d_mutants = d_mutants + lcfg.lam * metric_out.mutant_grads
    enc_grads_o = encoder_backward(state.encoder, cache_o, d_origins)
    enc_grads_s = encoder_backward(state.encoder, cache_s, d_mutants)

    grads = {
        "enc.w1": enc_grads_o.w1 + enc_grads_s.w1,
        "enc.b1": enc_grads_o.b1 + enc_grads_s.b1,
        "enc.w2": enc_grads_o.w2 + enc_grads_s.w2,
        "enc.b2": enc_grads_o.b2 + enc_grads_s.b2,
        "head.w1": head_grads.w1,
        "head.b1": head_grads.b1,
        "head.w2": head_grads.w2,
        "head.b2": head_grads.b2,
    }
    _adam_step(state, grads)
    return StepMetrics(
        ce_loss=ce_value, metric_loss=metric_value, joint_loss=joint, skipped_count=skipped
    )


def _adam_step(state: TrainerState, grads: dict[str, np.ndarray]) -> None:
    cfg = state.config
    adam = state.adam
    adam.t += 1
    bias1 = 1.0 - cfg.beta1**adam.t
    bias2 = 1.0 - cfg.beta2**adam.t
    for name, param in _named_arrays(state.encoder, state.head):
        g = grads[name]
        adam.m[name] = cfg.beta1 * adam.m[name] + (1.0 - cfg.beta1) * g
        adam.v[name] = cfg.beta2 * adam.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = adam.m[name] / bias1
        v_hat = adam.v[name] / bias2
        param -= cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
    state.encoder.version += 1
    state.head.version += 1


def train(
    config: TrainConfig,
    corpus: Corpus,
    features,
    collect_steps: bool = False,
) -> TrainResult:
    """Train from a fresh state for ``config.epochs`` epochs."""
    state = init_state(config)
    return resume(state, corpus, features, collect_steps=collect_steps)


def resume(
    state: TrainerState,
    corpus: Corpus,
    features,
    collect_steps: bool = False,
) -> TrainResult:
    """Continue a (possibly restored) state up to its configured epoch count.

    Epoch shuffles are keyed by (seed, epoch index), so a resumed run walks
    the same batches an uninterrupted run would.
    """
    if len(corpus) == 0:
        raise ConfigError("cannot train on an empty corpus")
    cfg = state.config
    cache = features if isinstance(features, FeatureCache) else FeatureCache.from_corpus(corpus, features)
    history: list[EpochStats] = []
    trace: list[StepMetrics] | None = [] if collect_steps else None
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        batches = make_batches(corpus, cfg.batch_size, cfg.seed, epoch, cache)
        ce_sum = metric_sum = joint_sum = 0.0
        skipped_sum = 0
        for step_index, batch in enumerate(batches):
            try:
                metrics = train_step(state, batch)
            except DivergenceError as exc:
                exc.epoch = epoch
                exc.step = step_index
                exc.history = history
                raise
            ce_sum += metrics.ce_loss
            metric_sum += metrics.metric_loss
            joint_sum += metrics.joint_loss
            skipped_sum += metrics.skipped_count
            if trace is not None:
                trace.append(metrics)
        n = len(batches)
        history.append(
            EpochStats(
                epoch=epoch,
                ce_loss=ce_sum / n,
                metric_loss=metric_sum / n,
                joint_loss=joint_sum / n,
                skipped_count=skipped_sum,
            )
        )
        state.epoch = epoch + 1
    return TrainResult(state=state, history=history, step_trace=trace)


# --- checkpoint container -------------------------------------------------
#
# Layout: magic, u32 version, u32 meta length, meta JSON (config echo, epoch,
# verge snapshot, Adam step count), u32 array count, then per array: u16 name
# length, name, u32 byte length, raw little-endian float64 data prefixed by a
# u8 ndim and u32 shape dims. Fully deterministic: no timestamps.


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype=np.float64).tobytes()
    name_b = name.encode("utf-8")
    out = struct.pack("<H", len(name_b)) + name_b
    out += struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape)
    out += struct.pack("<I", len(data)) + data
    return out


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise DeserializeError("checkpoint truncated")
    return data


def _unpack_array(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = tuple(struct.unpack("<I", _read_exact(buf, 4))[0] for _ in range(ndim))
    (nbytes,) = struct.unpack("<I", _read_exact(buf, 4))
    data = _read_exact(buf, nbytes)
    arr = np.frombuffer(data, dtype=np.float64).reshape(shape).copy()
    return name, arr


def save_checkpoint(state: TrainerState, path) -> None:
    """Write the versioned checkpoint container; byte-identical for equal states."""
    cfg = state.config
    meta = {
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "param_version": state.encoder.version,
        "verges": state.registry.snapshot().decode("utf-8"),
        "include_first": state.registry.include_first_in_update,
        "config": asdict(cfg),
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays = _named_arrays(state.encoder, state.head)
    arrays += [(f"adam.m.{n}", state.adam.m[n]) for n, _ in _named_arrays(state.encoder, state.head)]
    arrays += [(f"adam.v.{n}", state.adam.v[n]) for n, _ in _named_arrays(state.encoder, state.head)]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            fh.write(_pack_array(name, arr))


def load_checkpoint(path) -> TrainerState:
    """Restore a :class:`TrainerState`; never returns a partial load."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise DeserializeError("not a purgelab checkpoint")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", _read_exact(buf, 4))
    try:
        meta = json.loads(_read_exact(buf, meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DeserializeError(f"malformed checkpoint metadata: {exc}") from None
    try:
        cfg_dict = dict(meta["config"])
        loss = LossConfig(**cfg_dict.pop("loss"))
        config = TrainConfig(loss=loss, **cfg_dict)
    except (KeyError, TypeError) as exc:
        raise DeserializeError(f"malformed checkpoint config: {exc}") from None
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = _unpack_array(buf)
        arrays[name] = arr
    try:
        param_version = int(meta["param_version"])
        encoder = EncoderParams(
            w1=arrays["enc.w1"], b1=arrays["enc.b1"],
            w2=arrays["enc.w2"], b2=arrays["enc.b2"],
            version=param_version,
        )
        head = PairClassifierParams(
            w1=arrays["head.w1"], b1=arrays["head.b1"],
            w2=arrays["head.w2"], b2=arrays["head.b2"],
            version=param_version,
        )
        adam = AdamState(
            m={n: arrays[f"adam.m.{n}"] for n, _ in _named_arrays(encoder, head)},
            v={n: arrays[f"adam.v.{n}"] for n, _ in _named_arrays(encoder, head)},
            t=int(meta["adam_t"]),
        )
        registry = VergeRegistry.restore(meta["verges"].encode("utf-8"))
        epoch = int(meta["epoch"])
    except KeyError as exc:
        raise DeserializeError(f"checkpoint missing segment {exc}") from None
    return TrainerState(
        config=config, encoder=encoder, head=head, registry=registry, adam=adam, epoch=epoch
    )


def with_loss(config: TrainConfig, **loss_updates) -> TrainConfig:
    """Copy a config with some loss hyperparameters replaced."""
    return replace(config, loss=replace(config.loss, **loss_updates))
