"""Corpus schema, ingestion, preprocessing, feature hashing, minibatching,
and synthetic corpus generation.

Corpus wire format (one record per line, UTF-8, tab-separated, fixed order):

    class_id<TAB>label<TAB>origin<TAB>mutant

class_id is a decimal integer, label is 0 or 1, and the two text fields have
backslash-escaped tabs, newlines, and carriage returns. All records of one
class share the same origin text.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    EmptyCorpusError,
    ParseError,
    SchemaError,
    StratifyError,
)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

# Geometric-mode constants. Non-equivalent mutants are offset by a controlled
# radial shift along a fixed "mutation" direction set shared across classes
# (mutation operators leave shared signatures); equivalents scatter along a
# disjoint "benign" direction set with the same magnitude profile, scaled by
# the noise knob. Matching magnitude profiles leave the two distance
# distributions overlapping (the regime the purge loss is meant to clean
# up), so the label signal lives in displacement direction, not length.
GEOMETRIC_SHIFT = 1.2
GEOMETRIC_JITTER = 0.5
GEOMETRIC_SUBSPACE_DIM = 8


@dataclass(frozen=True)
class MutantRecord:
    """One (class id, origin text, mutant text, equivalence label) corpus row."""

    class_id: int
    origin_text: str
    mutant_text: str
    label: int

    def __post_init__(self):
        if self.class_id < 0:
            raise SchemaError(f"class_id must be >= 0, got {self.class_id}")
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label!r}")
        if not self.origin_text or not self.mutant_text:
            raise SchemaError("origin and mutant texts must be nonempty")


@dataclass
class Corpus:
    records: list[MutantRecord] = field(default_factory=list)
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def validate_corpus(corpus: Corpus) -> None:
    """Check that all records of one class share an origin text."""
    origins: dict[int, str] = {}
    for record in corpus.records:
        known = origins.setdefault(record.class_id, record.origin_text)
        if known != record.origin_text:
            raise SchemaError(
                f"class {record.class_id} has conflicting origin texts"
            )


def _escape(text: str) -> str:
    return (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt)
            if mapped is None:
                raise ValueError(f"bad escape \\{nxt}")
            out.append(mapped)
            i += 2
        elif ch == "\\":
            raise ValueError("dangling backslash")
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def ingest(path) -> Corpus:
    """Parse a corpus file and validate the per-class origin invariant."""
    records: list[MutantRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                class_id = int(parts[0])
                label = int(parts[1])
                record = MutantRecord(
                    class_id=class_id,
                    origin_text=_unescape(parts[2]),
                    mutant_text=_unescape(parts[3]),
                    label=label,
                )
            except (ValueError, SchemaError) as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            records.append(record)
    corpus = Corpus(records=records, provenance=str(path))
    validate_corpus(corpus)
    return corpus


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus.records:
            fh.write(
                f"{r.class_id}\t{r.label}\t{_escape(r.origin_text)}\t{_escape(r.mutant_text)}\n"
            )


def _squash_ws(text: str) -> str:
    return " ".join(text.split())


def dedup(corpus: Corpus) -> Corpus:
    """Drop records whose whitespace-normalized (origin, mutant) pair repeats.

    Keeps the first occurrence, preserves order, and is idempotent.
    """
    seen: set[tuple[str, str]] = set()
    kept: list[MutantRecord] = []
    for record in corpus.records:
        key = (_squash_ws(record.origin_text), _squash_ws(record.mutant_text))
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return Corpus(records=kept, provenance=corpus.provenance)


def split(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Label-stratified split into (train, test), reproducible from seed.

    Each side preserves the corpus equivalence ratio within one record per
    label; together the sides partition the corpus. Record order within each
    side follows the original corpus order.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction!r}")
    by_label: dict[int, list[int]] = {0: [], 1: []}
    for idx, record in enumerate(corpus.records):
        by_label[record.label].append(idx)
    for label, indices in by_label.items():
        if not indices:
            raise StratifyError(f"label {label} has no records to stratify")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in (0, 1):
        indices = np.array(by_label[label], dtype=np.int64)
        order = rng.permutation(len(indices))
        take = int(fraction * len(indices) + 0.5)  # round half up
        train_idx.extend(indices[order[:take]].tolist())
        test_idx.extend(indices[order[take:]].tolist())
    train_idx.sort()
    test_idx.sort()
    train = Corpus([corpus.records[i] for i in train_idx], provenance=corpus.provenance)
    test = Corpus([corpus.records[i] for i in test_idx], provenance=corpus.provenance)
    return train, test


@dataclass(frozen=True)
class FeatureSpec:
    """Hashed token n-gram features; stable across runs (seedless hash)."""

    dim: int = 256
    ngram_orders: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.dim < 16:
            raise ConfigError(f"feature dim must be >= 16, got {self.dim}")
        if not self.ngram_orders or any(n < 1 for n in self.ngram_orders):
            raise ConfigError("ngram_orders must be positive integers")


def extract_features(spec: FeatureSpec, text: str) -> np.ndarray:
    """Hash token n-grams into a sign-hashed, L2-normalized feature vector."""
    if not text:
        raise DegenerateInputError("cannot extract features from empty text")
    tokens = _TOKEN_RE.findall(text)
    if not tokens:
        raise DegenerateInputError("text contains no tokens")
    vec = np.zeros(spec.dim, dtype=np.float64)
    for order in sorted(spec.ngram_orders):
        for i in range(len(tokens) - order + 1):
            gram = f"{order}:" + "\x1f".join(tokens[i : i + order])
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=9).digest()
            bucket = int.from_bytes(digest[:8], "little") % spec.dim
            sign = 1.0 if digest[8] & 1 else -1.0
            vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegenerateInputError("feature hashing cancelled to a zero vector")
    return vec / norm


class HashingFeatures:
    """Feature provider backed by :func:`extract_features`."""

    def __init__(self, spec: FeatureSpec = FeatureSpec()):
        self.spec = spec

    @property
    def dim(self) -> int:
        return self.spec.dim

    def vector(self, text: str) -> np.ndarray:
        return extract_features(self.spec, text)


class TableFeatures:
    """Feature provider backed by an explicit text -> vector table."""

    def __init__(self, dim: int, table: dict[str, np.ndarray]):
        self.dim = dim
        self.table = table

    def vector(self, text: str) -> np.ndarray:
        try:
            return self.table[text]
        except KeyError:
            raise DegenerateInputError(f"no feature entry for text {text!r}") from None


def write_feature_table(features: TableFeatures, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"feature-table 1 {features.dim}\n")
        for key in features.table:
            comps = " ".join(repr(float(x)) for x in features.table[key])
            fh.write(f"{_escape(key)}\t{comps}\n")


def load_feature_table(path) -> TableFeatures:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").split()
        if len(header) != 3 or header[0] != "feature-table" or header[1] != "1":
            raise ParseError(f"not a feature table: {header!r}")
        dim = int(header[2])
        table: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                key, comps = line.split("\t")
                vec = np.array([float(x) for x in comps.split(" ")], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if vec.shape[0] != dim:
                raise ParseError(f"line {lineno}: expected {dim} components")
            table[_unescape(key)] = vec
    return TableFeatures(dim=dim, table=table)


class FeatureCache:
    """Per-corpus feature matrices, extracted once and then sliced per batch."""

    def __init__(self, class_ids, labels, origin_features, mutant_features):
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.origin_features = np.asarray(origin_features, dtype=np.float64)
        self.mutant_features = np.asarray(mutant_features, dtype=np.float64)

    def __len__(self) -> int:
        return int(self.class_ids.shape[0])

    @classmethod
    def from_corpus(cls, corpus: Corpus, provider) -> "FeatureCache":
        n = len(corpus)
        dim = provider.dim
        origin_features = np.zeros((n, dim), dtype=np.float64)
        mutant_features = np.zeros((n, dim), dtype=np.float64)
        origin_memo: dict[int, np.ndarray] = {}
        for i, record in enumerate(corpus.records):
            cached = origin_memo.get(record.class_id)
            if cached is None:
                cached = provider.vector(record.origin_text)
                origin_memo[record.class_id] = cached
            origin_features[i] = cached
            mutant_features[i] = provider.vector(record.mutant_text)
        return cls(
            class_ids=[r.class_id for r in corpus.records],
            labels=[r.label for r in corpus.records],
            origin_features=origin_features,
            mutant_features=mutant_features,
        )


@dataclass
class Batch:
    """Feature-level minibatch: parallel arrays over the batch dimension."""

    class_ids: np.ndarray  # (m,)
    origin_features: np.ndarray  # (m, dim)
    mutant_features: np.ndarray  # (m, dim)
    labels: np.ndarray  # (m,)

    def __len__(self) -> int:
        return int(self.class_ids.shape[0])


def make_batches(
    corpus: Corpus,
    batch_size: int,
    seed: int,
    epoch_index: int,
    features,
) -> list[Batch]:
    """Epoch-deterministic shuffled minibatches; the final partial batch stays.

    ``features`` is a provider (``HashingFeatures``/``TableFeatures``) or an
    already-built :class:`FeatureCache` for this corpus.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot batch an empty corpus")
    if epoch_index < 0:
        raise ConfigError(f"epoch_index must be >= 0, got {epoch_index}")
    cache = features if isinstance(features, FeatureCache) else FeatureCache.from_corpus(corpus, features)
    if len(cache) != len(corpus):
        raise DimensionError("feature cache does not match corpus length")
    rng = np.random.default_rng([seed, epoch_index])
    order = rng.permutation(len(corpus))
    batches = []
    for start in range(0, len(corpus), batch_size):
        idx = order[start : start + batch_size]
        batches.append(
            Batch(
                class_ids=cache.class_ids[idx],
                origin_features=cache.origin_features[idx],
                mutant_features=cache.mutant_features[idx],
                labels=cache.labels[idx],
            )
        )
    return batches


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate_synthetic(
    mode: str,
    n_classes: int = 8,
    per_class: int = 40,
    equiv_fraction: float = 0.5,
    noise: float = 1.0,
    seed: int = 0,
    feature_dim: int = 256,
) -> tuple[Corpus, TableFeatures | None]:
    """Generate a synthetic mutant corpus.

    ``geometric`` mode emits per-class clusters directly in feature space and
    returns a parallel feature table (bypassing text hashing): equivalents
    scatter around the class origin point with magnitude noise*|N(0,1)|,
    non-equivalents get an extra controlled radial shift. With noise=0 every
    equivalent sits exactly on its origin.

    ``codegen`` mode emits small C-style program texts with operator
    substitutions; mutations in unreachable or no-effect positions (e.g.
    after an unconditional return) are labeled equivalent. Features for
    codegen corpora come from the usual hashing provider.
    """
    if mode not in ("geometric", "codegen"):
        raise ConfigError(f"unknown synthetic mode {mode!r}")
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if per_class < 4:
        raise ConfigError(f"per_class must be >= 4, got {per_class}")
    if not 0.0 < equiv_fraction < 1.0:
        raise ConfigError(f"equiv_fraction must be in (0, 1), got {equiv_fraction!r}")
    if noise < 0.0:
        raise ConfigError(f"noise must be >= 0, got {noise!r}")
    n_equiv = int(per_class * equiv_fraction + 0.5)
    if n_equiv == 0 or n_equiv == per_class:
        raise ConfigError("equiv_fraction leaves one label empty at this per_class")
    if mode == "geometric":
        return _generate_geometric(n_classes, per_class, n_equiv, noise, seed, feature_dim)
    return _generate_codegen(n_classes, per_class, n_equiv, seed), None


def _generate_geometric(n_classes, per_class, n_equiv, noise, seed, dim):
    rng = np.random.default_rng(seed)
    k = GEOMETRIC_SUBSPACE_DIM
    # Disjoint orthonormal direction sets for mutation and benign displacements.
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2 * k)))
    mutation_dirs, benign_dirs = basis[:, :k], basis[:, k:]
    records: list[MutantRecord] = []
    table: dict[str, np.ndarray] = {}
    for c in range(n_classes):
        origin = _unit(rng, dim)
        origin_key = f"class{c:03d}/origin"
        table[origin_key] = origin
        for j in range(per_class):
            equivalent = j < n_equiv
            jitter = noise * GEOMETRIC_JITTER * abs(rng.standard_normal())
            jitter_dir = _unit(rng, dim)
            magnitude = GEOMETRIC_SHIFT * abs(rng.standard_normal())
            weights = _unit(rng, k)
            if equivalent:
                # Scales with noise so that noise=0 parks equivalents exactly
                # on their origin point.
                offset = noise * magnitude * (benign_dirs @ weights)
            else:
                offset = magnitude * (mutation_dirs @ weights)
            point = origin + jitter * jitter_dir + offset
            if jitter > 0.0 or float(np.linalg.norm(offset)) > 0.0:
                point = point / np.linalg.norm(point)
            mutant_key = f"class{c:03d}/mutant{j:03d}"
            table[mutant_key] = point
            records.append(
                MutantRecord(
                    class_id=c,
                    origin_text=origin_key,
                    mutant_text=mutant_key,
                    label=1 if equivalent else 0,
                )
            )
    corpus = Corpus(records=records, provenance=f"synthetic:geometric:seed={seed}")
    return corpus, TableFeatures(dim=dim, table=table)


def _codegen_origin(c: int) -> str:
    return (
        f"int scan_{c}(int items[], int count, int limit) {{\n"
        f"    int total_{c} = 0;\n"
        f"    for (int i = 0; i < count; i++) {{\n"
        f"        if (items[i] > limit) {{\n"
        f"            total_{c} = total_{c} + items[i];\n"
        f"        }}\n"
        f"    }}\n"
        f"    return total_{c};\n"
        f"}}\n"
    )


def _codegen_live_mutation(origin: str, c: int, kind: int, k: int) -> str:
    if kind == 0:
        return origin.replace(
            f"total_{c} = total_{c} + items[i];",
            f"total_{c} = total_{c} - items[i] - {k};",
        )
    if kind == 1:
        return origin.replace("items[i] > limit", f"items[i] > limit + {k}")
    if kind == 2:
        return origin.replace(f"int total_{c} = 0;", f"int total_{c} = {k};")
    return origin.replace("int i = 0;", f"int i = {k};")


def _generate_codegen(n_classes, per_class, n_equiv, seed):
    rng = np.random.default_rng(seed)
    records: list[MutantRecord] = []
    for c in range(n_classes):
        origin = _codegen_origin(c)
        for j in range(per_class):
            # Disjoint constant ranges per mutant keep all texts distinct.
            k = 1000 * j + int(rng.integers(1, 1000))
            if j < n_equiv:
                # Dead position: a statement after the unconditional return
                # never executes, so the mutant behaves identically.
                mutant = origin.replace(
                    f"    return total_{c};\n",
                    f"    return total_{c};\n    total_{c} += {k};\n",
                )
                label = 1
            else:
                mutant = _codegen_live_mutation(origin, c, j % 4, k)
                label = 0
            records.append(
                MutantRecord(
                    class_id=c, origin_text=origin, mutant_text=mutant, label=label
                )
            )
    return Corpus(records=records, provenance=f"synthetic:codegen:seed={seed}")
