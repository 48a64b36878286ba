"""Evaluation harness: confusion metrics, embedding-space diagnostics, the
metric-weight x margin sweep engine, and embedding export.

Precision/recall/F1 are binary metrics on the equivalent class (label 1).
Undefined metrics (zero denominators) are reported as ``None``, never as a
silent 0. Argmax ties in the classifier are broken toward non-equivalent.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Corpus, FeatureCache
from .encoder import classify_pairs, encode_batch
from .errors import ConfigError, DivergenceError, StratifyError, UnknownClassError
from .trainer import TrainConfig, TrainerState, train, with_loss
from .vecmath import cosine_distance


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float | None
    recall: float | None
    f1: float | None

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "EvalReport":
        precision = tp / (tp + fp) if tp + fp > 0 else None
        recall = tp / (tp + fn) if tp + fn > 0 else None
        f1 = None
        if precision is not None and recall is not None and precision + recall > 0:
            f1 = 2.0 * precision * recall / (precision + recall)
        return cls(tp=tp, fp=fp, tn=tn, fn=fn, precision=precision, recall=recall, f1=f1)


def _embed_corpus(state: TrainerState, corpus: Corpus, features):
    cache = features if isinstance(features, FeatureCache) else FeatureCache.from_corpus(corpus, features)
    origins = encode_batch(state.encoder, cache.origin_features).embeddings
    mutants = encode_batch(state.encoder, cache.mutant_features).embeddings
    return cache, origins, mutants


def evaluate(state: TrainerState, corpus: Corpus, features) -> EvalReport:
    """Classify every pair and aggregate binary metrics on the equivalent class."""
    cache, origins, mutants = _embed_corpus(state, corpus, features)
    logits = classify_pairs(state.head, origins, mutants).logits
    predictions = (logits[:, 1] > logits[:, 0]).astype(np.int64)  # tie -> 0
    labels = cache.labels
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    return EvalReport.from_counts(tp=tp, fp=fp, tn=tn, fn=fn)


@dataclass
class DistanceStats:
    """Per-label summary of origin-mutant embedding distances."""

    n_eq: int
    mean_eq: float
    std_eq: float
    n_noneq: int
    mean_noneq: float
    std_noneq: float
    ratio: float | None  # mean_noneq / mean_eq, absent when mean_eq == 0


def pair_distances(state: TrainerState, corpus: Corpus, features) -> tuple[np.ndarray, np.ndarray]:
    """Raw origin-mutant distances, split by label: (equivalent, non-equivalent)."""
    cache, origins, mutants = _embed_corpus(state, corpus, features)
    distances = np.array(
        [cosine_distance(origins[i], mutants[i]) for i in range(len(cache))],
        dtype=np.float64,
    )
    return distances[cache.labels == 1], distances[cache.labels == 0]


def distance_stats(state: TrainerState, corpus: Corpus, features) -> DistanceStats:
    eq, noneq = pair_distances(state, corpus, features)
    if eq.size == 0 or noneq.size == 0:
        raise StratifyError("distance stats need at least one sample per label")
    mean_eq = float(eq.mean())
    mean_noneq = float(noneq.mean())
    return DistanceStats(
        n_eq=int(eq.size),
        mean_eq=mean_eq,
        std_eq=float(eq.std()),
        n_noneq=int(noneq.size),
        mean_noneq=mean_noneq,
        std_noneq=float(noneq.std()),
        ratio=mean_noneq / mean_eq if mean_eq > 0.0 else None,
    )


@dataclass
class PermutationResult:
    p_value: float
    observed_diff: float
    resamples: int


def permutation_pvalue(a, b, resamples: int = 10_000, seed: int = 0) -> PermutationResult:
    """Two-sample permutation test on the absolute difference of means.

    Pools the samples, reshuffles ``resamples`` times with a seeded generator,
    and reports the add-one-smoothed two-sided p-value. Distribution-free and
    fully reproducible.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StratifyError("permutation test needs nonempty samples on both sides")
    if resamples < 1:
        raise ConfigError(f"resamples must be >= 1, got {resamples}")
    observed = abs(float(a.mean()) - float(b.mean()))
    pool = np.concatenate([a, b])
    n_a = a.size
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(resamples):
        perm = rng.permutation(pool)
        diff = abs(float(perm[:n_a].mean()) - float(perm[n_a:].mean()))
        if diff >= observed:
            hits += 1
    return PermutationResult(
        p_value=(hits + 1) / (resamples + 1),
        observed_diff=observed,
        resamples=resamples,
    )


@dataclass
class SweepCell:
    lam: float
    zeta: float
    report: EvalReport | None
    error: str | None = None


@dataclass
class SweepGrid:
    lambda_values: list[float]
    zeta_values: list[float]
    cells: list[SweepCell]  # row-major: lambda outer, zeta inner

    def cell(self, i: int, j: int) -> SweepCell:
        return self.cells[i * len(self.zeta_values) + j]

    def best(self) -> SweepCell | None:
        """Best cell by F1, ties broken by precision, then lowest (lam, zeta)."""
        scored = [
            c for c in self.cells if c.report is not None and c.report.f1 is not None
        ]
        if not scored:
            return None
        return min(scored, key=lambda c: (-c.report.f1, -c.report.precision, c.lam, c.zeta))


def _run_cell(payload) -> tuple[int, float, float, dict | None, str | None]:
    index, base_config, train_corpus, test_corpus, features, lam, zeta = payload
    config = with_loss(base_config, lam=lam, zeta=zeta)
    try:
        result = train(config, train_corpus, features)
        report = evaluate(result.state, test_corpus, features)
    except DivergenceError as exc:
        return index, lam, zeta, None, f"{type(exc).__name__}: {exc}"
    return index, lam, zeta, vars(report), None


def sweep(
    base_config: TrainConfig,
    train_corpus: Corpus,
    test_corpus: Corpus,
    features,
    lambda_values,
    zeta_values,
    workers: int = 1,
) -> SweepGrid:
    """Train and evaluate one model per (lam, zeta) cell.

    All cells share the base config and seed and are fully independent, so a
    cell rerun in isolation reproduces its in-sweep result exactly. A
    diverging cell records its error and the sweep continues.
    """
    lambda_values = [float(v) for v in lambda_values]
    zeta_values = [float(v) for v in zeta_values]
    if not lambda_values or not zeta_values:
        raise ConfigError("sweep needs at least one value per axis")
    jobs = []
    index = 0
    for lam in lambda_values:
        for zeta in zeta_values:
            jobs.append((index, base_config, train_corpus, test_corpus, features, lam, zeta))
            index += 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_run_cell, jobs))
    else:
        raw = [_run_cell(job) for job in jobs]
    cells: list[SweepCell | None] = [None] * len(jobs)
    for idx, lam, zeta, report_dict, error in raw:
        report = EvalReport(**report_dict) if report_dict is not None else None
        cells[idx] = SweepCell(lam=lam, zeta=zeta, report=report, error=error)
    return SweepGrid(lambda_values=lambda_values, zeta_values=zeta_values, cells=cells)


def export_embeddings(
    state: TrainerState, corpus: Corpus, features, class_filter=None
) -> list[tuple]:
    """Embedding rows (class_id, label, role, *components) for external tools.

    One ``origin`` row per selected class (label -1: origins carry no
    equivalence label) followed by one ``mutant`` row per record, in
    deterministic class-then-corpus order.
    """
    cache, origins, mutants = _embed_corpus(state, corpus, features)
    present = {int(c) for c in cache.class_ids}
    if class_filter is not None:
        wanted = {int(c) for c in class_filter}
        unknown = wanted - present
        if unknown:
            raise UnknownClassError(f"classes not in corpus: {sorted(unknown)}")
    else:
        wanted = present
    rows: list[tuple] = []
    for cid in sorted(wanted):
        mask = np.flatnonzero(cache.class_ids == cid)
        first = int(mask[0])
        rows.append((cid, -1, "origin", *origins[first].tolist()))
        for i in mask:
            rows.append((cid, int(cache.labels[i]), "mutant", *mutants[int(i)].tolist()))
    return rows
