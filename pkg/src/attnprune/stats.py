"""Attention statistics: per-channel means of the gate softmax over a dataset.

Sums are kept with Kahan compensation so the finalized vectors stay
normalized to ~1e-15 regardless of dataset size or order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, InvalidInputError, InvalidStateError


class _Kahan:
    __slots__ = ("total", "comp")

    def __init__(self, shape):
        self.total = np.zeros(shape, dtype=np.float64)
        self.comp = np.zeros(shape, dtype=np.float64)

    def add(self, value):
        y = value - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t

    def merged(self, other: "_Kahan") -> "_Kahan":
        out = _Kahan(self.total.shape)
        out.total = self.total.copy()
        out.comp = self.comp.copy()
        if other.total.any() or other.comp.any():
            out.add(other.total)
            out.add(-other.comp)
        return out

    def value(self):
        return self.total - self.comp


class AttentionStats:
    """Streaming accumulator over layers ``layout`` (layer id -> channel count)."""

    def __init__(self, layout: dict[str, int], num_classes: int | None = None):
        self.layout = dict(layout)
        self.num_classes = num_classes
        self._sums = {lid: _Kahan(c) for lid, c in self.layout.items()}
        self._counts = {lid: 0 for lid in self.layout}
        self._class_sums = None
        self._class_counts = None
        if num_classes is not None:
            self._class_sums = {lid: _Kahan((num_classes, c)) for lid, c in self.layout.items()}
            self._class_counts = {lid: np.zeros(num_classes, dtype=np.int64) for lid in self.layout}
        self.finalized = False

    @property
    def sample_count(self) -> int:
        counts = set(self._counts.values())
        if len(counts) > 1:
            raise InvalidStateError(f"layers saw different sample counts: {self._counts}")
        return counts.pop() if counts else 0

    def accumulate(self, layer_id, s_batch, labels=None) -> None:
        if self.finalized:
            raise InvalidStateError("statistics are already finalized")
        if layer_id not in self.layout:
            raise InvalidInputError(f"unknown layer {layer_id!r}")
        s = np.asarray(getattr(s_batch, "data", s_batch), dtype=np.float64)
        c = self.layout[layer_id]
        if s.ndim != 2 or s.shape[1] != c:
            raise DimensionError(f"stats[{layer_id}]", f"N x {c}", s.shape)
        self._sums[layer_id].add(s.sum(axis=0))
        self._counts[layer_id] += s.shape[0]
        if labels is not None and self._class_sums is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (s.shape[0],):
                raise DimensionError(f"stats[{layer_id}] labels", s.shape[0], labels.shape)
            per = np.zeros((self.num_classes, c))
            np.add.at(per, labels, s)
            self._class_sums[layer_id].add(per)
            self._class_counts[layer_id] += np.bincount(labels, minlength=self.num_classes)

    def finalize(self) -> dict[str, np.ndarray]:
        n = self.sample_count
        if n == 0:
            raise InvalidStateError("no samples accumulated")
        self.finalized = True
        return {lid: self._sums[lid].value() / n for lid in self.layout}

    def means(self) -> dict[str, np.ndarray]:
        """Finalized criterion vectors without changing state."""
        n = self.sample_count
        if n == 0:
            raise InvalidStateError("no samples accumulated")
        return {lid: self._sums[lid].value() / n for lid in self.layout}

    def per_class(self) -> dict[str, np.ndarray] | None:
        """K x C table of class-conditional means (rows of unseen classes are 0)."""
        if self._class_sums is None:
            return None
        out = {}
        for lid in self.layout:
            cnt = self._class_counts[lid][:, None]
            out[lid] = np.divide(self._class_sums[lid].value(), cnt, out=np.zeros_like(self._class_sums[lid].total), where=cnt > 0)
        return out

    def class_counts(self) -> dict[str, np.ndarray] | None:
        return None if self._class_counts is None else {k: v.copy() for k, v in self._class_counts.items()}


def merge(a: AttentionStats, b: AttentionStats) -> AttentionStats:
    """Combine two shards; associative and commutative up to rounding."""
    if a.layout != b.layout or a.num_classes != b.num_classes:
        raise InvalidInputError("cannot merge statistics with different layer layouts")
    if a.finalized or b.finalized:
        raise InvalidStateError("cannot merge finalized statistics")
    out = AttentionStats(a.layout, a.num_classes)
    for lid in a.layout:
        out._sums[lid] = a._sums[lid].merged(b._sums[lid])
        out._counts[lid] = a._counts[lid] + b._counts[lid]
        if out._class_sums is not None:
            out._class_sums[lid] = a._class_sums[lid].merged(b._class_sums[lid])
            out._class_counts[lid] = a._class_counts[lid] + b._class_counts[lid]
    return out


# --- stats.json ---------------------------------------------------------


def stats_to_dict(stats: AttentionStats, alpha: float) -> dict:
    means = stats.means()
    doc = {
        "sample_count": stats.sample_count,
        "alpha": float(alpha),
        "layers": [{"id": lid, "channels": int(c), "a": [float(v) for v in means[lid]]} for lid, c in stats.layout.items()],
    }
    pc = stats.per_class()
    if pc is not None:
        counts = stats.class_counts()
        doc["per_class"] = [
            {"id": lid, "class_counts": [int(v) for v in counts[lid]], "a": [[float(v) for v in row] for row in pc[lid]]}
            for lid in stats.layout
        ]
    return doc


def save_stats(stats: AttentionStats, path, alpha: float) -> None:
    Path(path).write_text(json.dumps(stats_to_dict(stats, alpha), indent=1) + "\n")


def load_stats(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(criteria, document)`` where criteria maps layer id -> A_l."""
    try:
        doc = json.loads(Path(path).read_text())
        criteria = {}
        for entry in doc["layers"]:
            a = np.asarray(entry["a"], dtype=np.float64)
            if a.shape != (entry["channels"],):
                raise FormatError(f"layer {entry['id']}: {len(a)} values for {entry['channels']} channels")
            criteria[entry["id"]] = a
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a statistics file ({exc})") from None
    return criteria, doc
