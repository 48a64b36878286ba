"""Per-class verge tracking.

A verge is a running EMA boundary of origin-mutant distances for one mutant
class: the positive verge tracks distances of equivalent mutants to the class
origin, the negative verge tracks non-equivalent ones. Verges are statistics,
not trainable state; no gradient ever flows through them. The registry is
updated once per minibatch and persists across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

from .errors import DeserializeError, EmptyBatchError, RangeError
from .vecmath import EmaParams, cosine_distance, ema_batch

if TYPE_CHECKING:
    from .losses import EmbeddedSample

SNAPSHOT_VERSION = 1

_RANGE_TOL = 1e-9


@dataclass
class VergeState:
    """Verge pair for one class; ``None`` marks a verge never observed.

    Uninitialized is a real, observable state, never encoded as 0.0.
    """

    v_plus: float | None = None
    v_minus: float | None = None


class VergeRegistry:
    """Holds one :class:`VergeState` per class observed so far.

    ``include_first_in_update=True`` is the literal update rule: on a class's
    first observation the verge is pre-initialized to the first distance and
    the closed-form EMA is then applied over the full tuple, so the first
    distance is weighted twice. Setting it to False applies the EMA to the
    remainder only; that variant exists for comparison and is not the default.
    """

    def __init__(self, params: EmaParams, include_first_in_update: bool = True):
        self.params = params
        self.include_first_in_update = include_first_in_update
        self.states: dict[int, VergeState] = {}

    def get(self, class_id: int) -> VergeState | None:
        """State for a class, or None if the class was never observed."""
        return self.states.get(class_id)

    def update_class(
        self,
        class_id: int,
        pos_distances: Sequence[float] = (),
        neg_distances: Sequence[float] = (),
    ) -> VergeState:
        """Fold new distance observations into one class's verges.

        Each nonempty tuple pre-initializes its verge if needed, then applies
        the closed-form EMA over the tuple in order. An empty tuple leaves
        that verge untouched. Distances must lie in [0, 1].
        """
        pos = _checked_distances(pos_distances, "pos_distances")
        neg = _checked_distances(neg_distances, "neg_distances")
        if not pos and not neg:
            return self.states.get(class_id, VergeState())
        state = self.states.setdefault(class_id, VergeState())
        state.v_plus = self._fold(state.v_plus, pos)
        state.v_minus = self._fold(state.v_minus, neg)
        return state

    def _fold(self, value: float | None, distances: list[float]) -> float | None:
        if not distances:
            return value
        if value is None:
            value = distances[0]
            if not self.include_first_in_update:
                distances = distances[1:]
                if not distances:
                    return value
        return ema_batch(value, distances, self.params)

    def batch_update(self, batch: Sequence["EmbeddedSample"]) -> set[int]:
        """Update verges from a minibatch of embedded samples.

        Collects, per class in the batch, the equivalent and non-equivalent
        origin-mutant distances in stable batch order, folds them in, and
        returns the set of touched class ids. Classes not in the batch are
        untouched.
        """
        if len(batch) == 0:
            raise EmptyBatchError("batch_update needs at least one sample")
        order: list[int] = []
        pos: dict[int, list[float]] = {}
        neg: dict[int, list[float]] = {}
        for sample in batch:
            cid = sample.class_id
            if cid not in pos and cid not in neg:
                order.append(cid)
            d = cosine_distance(sample.origin_embedding, sample.mutant_embedding)
            bucket = pos if sample.label == 1 else neg
            bucket.setdefault(cid, []).append(d)
        for cid in order:
            self.update_class(cid, pos.get(cid, ()), neg.get(cid, ()))
        return set(order)

    def snapshot(self) -> bytes:
        """Serialize to versioned line-delimited text; round-trips exactly."""
        lines = [
            f"verge-registry {SNAPSHOT_VERSION}",
            f"gamma {float(self.params.gamma)!r}",
            f"include_first {int(self.include_first_in_update)}",
        ]
        for cid in sorted(self.states):
            state = self.states[cid]
            lines.append(f"{cid}\t{_fmt(state.v_plus)}\t{_fmt(state.v_minus)}")
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def restore(cls, data: bytes) -> "VergeRegistry":
        """Rebuild a registry from :meth:`snapshot` output."""
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DeserializeError(f"snapshot is not UTF-8: {exc}") from None
        lines = text.splitlines()
        if len(lines) < 3:
            raise DeserializeError("snapshot truncated: header missing")
        head = lines[0].split()
        if len(head) != 2 or head[0] != "verge-registry":
            raise DeserializeError(f"not a verge snapshot: {lines[0]!r}")
        if head[1] != str(SNAPSHOT_VERSION):
            raise DeserializeError(f"unsupported verge snapshot version {head[1]!r}")
        try:
            gamma = float(lines[1].split(" ", 1)[1])
            include_first = bool(int(lines[2].split(" ", 1)[1]))
        except (IndexError, ValueError) as exc:
            raise DeserializeError(f"malformed snapshot header: {exc}") from None
        registry = cls(EmaParams(gamma), include_first_in_update=include_first)
        for line in lines[3:]:
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DeserializeError(f"malformed snapshot line: {line!r}")
            try:
                cid = int(parts[0])
                state = VergeState(v_plus=_parse(parts[1]), v_minus=_parse(parts[2]))
            except ValueError as exc:
                raise DeserializeError(f"malformed snapshot line: {line!r} ({exc})") from None
            registry.states[cid] = state
        return registry


def _checked_distances(distances: Sequence[float], name: str) -> list[float]:
    out = []
    for d in distances:
        d = float(d)
        if d < -_RANGE_TOL or d > 1.0 + _RANGE_TOL:
            raise RangeError(f"{name} value {d!r} outside [0, 1]")
        out.append(min(1.0, max(0.0, d)))
    return out


def _fmt(value: float | None) -> str:
    return "-" if value is None else repr(float(value))


def _parse(field: str) -> float | None:
    return None if field == "-" else float(field)
