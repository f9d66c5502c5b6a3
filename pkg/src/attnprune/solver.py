"""Turn one global compression ratio into per-layer channel selections.

Each layer l with criterion vector A_l (length C_l) is pruned below the local
threshold t / C_l. The global ratio g(t) is the fraction of all prunable
channels under their local thresholds; the solver looks for the t whose g(t)
is closest to the requested ratio r.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, InvalidStateError
from .netgraph import NetworkGraph, ResidualSampler


@dataclass
class CompressionRequest:
    r: float
    t_max: float | None = None
    steps: int = 10_000
    min_keep: int = 1
    method: str = "grid"
    # Cap on rounds of re-gridding the cells bordering the best level; each
    # round shrinks them by a factor of ``steps`` until float resolution.
    refine: int = 100

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise InvalidInputError(f"compression ratio must lie in [0, 1], got {self.r}")
        if self.steps < 2:
            raise InvalidInputError("grid needs at least 2 steps")
        if self.min_keep < 1:
            raise InvalidInputError("min_keep must be >= 1")
        if self.t_max is not None and self.t_max <= 0:
            raise InvalidInputError("t_max must be positive")
        if self.method not in ("grid", "exact"):
            raise InvalidInputError(f"unknown search method {self.method!r}")


@dataclass
class PruneMask:
    """Keep-vectors over each target layer's input channels, plus samplers."""

    layers: dict[str, np.ndarray] = field(default_factory=dict)
    samplers: dict[str, ResidualSampler] = field(default_factory=dict)

    def pruned_count(self) -> int:
        return int(sum((~k).sum() for k in self.layers.values()))

    def total(self) -> int:
        return int(sum(k.size for k in self.layers.values()))

    def keep_counts(self) -> dict[str, int]:
        return {lid: int(k.sum()) for lid, k in self.layers.items()}


@dataclass
class ThresholdSolution:
    t_star: float
    local_thresholds: dict[str, float]
    under_counts: dict[str, int]
    g_star: float
    achieved_ratio: float
    masks: PruneMask
    t_max: float


def _check(all_stats):
    if not all_stats:
        raise InvalidInputError("no attention statistics given")
    return {lid: np.asarray(a, dtype=np.float64) for lid, a in all_stats.items()}


def count_under(a_l, channels: int, t: float) -> int:
    """Number of entries strictly below the local threshold ``t / channels``."""
    a_l = np.asarray(a_l, dtype=np.float64)
    if a_l.shape != (channels,):
        raise InvalidInputError(f"criterion vector has {a_l.size} entries for {channels} channels")
    if t < 0:
        raise InvalidInputError("threshold must be non-negative")
    return int(np.count_nonzero(a_l < t / channels))


def global_ratio(all_stats, t: float) -> float:
    stats = _check(all_stats)
    under = sum(count_under(a, a.size, t) for a in stats.values())
    return under / sum(a.size for a in stats.values())


def g_curve(all_stats, ts) -> np.ndarray:
    """g evaluated at every threshold in ``ts`` (vectorized)."""
    stats = _check(all_stats)
    ts = np.asarray(ts, dtype=np.float64)
    under = np.zeros(ts.shape, dtype=np.int64)
    for a in stats.values():
        # searchsorted 'left' counts the entries strictly below each value
        under += np.searchsorted(np.sort(a), ts / a.size, side="left")
    return under / sum(a.size for a in stats.values())


def breakpoints(all_stats) -> np.ndarray:
    """Sorted values C_l * a_{l,c}: where g steps up."""
    stats = _check(all_stats)
    return np.sort(np.concatenate([a.size * a for a in stats.values()]))


def default_t_max(all_stats) -> float:
    stats = _check(all_stats)
    top = max(a.size * a.max() for a in stats.values())
    return float(top) * (1.0 + 1e-9) + 1e-12


def _best(ts, g, r):
    dist = np.abs(g - r)
    # argmin returns the first minimum: ties go to the smaller threshold
    return int(np.argmin(dist))


def _grid_search(stats, r, t_max, steps, refine):
    ts = np.linspace(0.0, t_max, steps)
    g = g_curve(stats, ts)
    k = _best(ts, g, r)
    t, gk = ts[k], g[k]
    for _ in range(refine):
        if gk == r:
            break
        # g is monotone, so a level closer to r can only hide in the two cells
        # bordering the run of grid points that share the current best level.
        run = np.flatnonzero(g == gk)
        first, last = run[0], run[-1]
        cells = [[t]]
        for lo, hi in ((first - 1, first), (last, last + 1)):
            # skip cells that are off the grid or already down to adjacent floats
            if 0 <= lo and hi < len(ts) and np.nextafter(ts[lo], np.inf) < ts[hi]:
                cells.append(np.linspace(ts[lo], ts[hi], steps))
        if len(cells) == 1:
            break
        ts = np.unique(np.concatenate(cells))
        g = g_curve(stats, ts)
        k = _best(ts, g, r)
        if abs(g[k] - r) < abs(gk - r) or (g[k] == gk and ts[k] < t):
            t, gk = ts[k], g[k]
    return float(t)


def _exact_search(stats, r):
    b = np.unique(breakpoints(stats))
    # one representative per level: 0, midpoints between breakpoints, past the top
    cands = np.concatenate([[0.0], (b[:-1] + b[1:]) / 2.0, [b[-1] * (1.0 + 1e-9) + 1e-12]])
    g = g_curve(stats, cands)
    return float(cands[_best(cands, g, r)])


def threshold_masks(all_stats, t: float, min_keep: int = 1) -> PruneMask:
    """Prune entries below t / C_l, then re-keep the top ``min_keep`` per layer."""
    stats = _check(all_stats)
    masks = PruneMask()
    for lid, a in stats.items():
        keep = ~(a < t / a.size)
        top = np.argsort(-a, kind="stable")[:min_keep]
        keep[top] = True
        masks.layers[lid] = keep
    return masks


def solve_threshold(all_stats, request: CompressionRequest) -> ThresholdSolution:
    stats = _check(all_stats)
    t_max = request.t_max if request.t_max is not None else default_t_max(stats)
    if request.method == "exact":
        t_star = _exact_search(stats, request.r)
    else:
        t_star = _grid_search(stats, request.r, t_max, request.steps, request.refine)
    masks = threshold_masks(stats, t_star, request.min_keep)
    under = {lid: count_under(a, a.size, t_star) for lid, a in stats.items()}
    total = sum(a.size for a in stats.values())
    return ThresholdSolution(
        t_star=t_star,
        local_thresholds={lid: t_star / a.size for lid, a in stats.items()},
        under_counts=under,
        g_star=sum(under.values()) / total,
        achieved_ratio=masks.pruned_count() / total,
        masks=masks,
        t_max=float(t_max),
    )


def random_masks(layout: dict[str, int], num_pruned: int, rng, min_keep: int = 1) -> PruneMask:
    """Prune ``num_pruned`` channels drawn uniformly over all layers, keeping
    at least ``min_keep`` per layer (baseline for comparisons)."""
    slots = [(lid, c) for lid, n in layout.items() for c in range(n)]
    capacity = sum(max(n - min_keep, 0) for n in layout.values())
    if num_pruned > capacity:
        raise InvalidInputError(f"cannot prune {num_pruned} channels while keeping {min_keep} per layer")
    masks = PruneMask({lid: np.ones(n, dtype=bool) for lid, n in layout.items()})
    left = {lid: n for lid, n in layout.items()}
    pruned = 0
    for i in rng.permutation(len(slots)):
        if pruned == num_pruned:
            break
        lid, c = slots[i]
        if left[lid] > min_keep:
            masks.layers[lid][c] = False
            left[lid] -= 1
            pruned += 1
    return masks


def derive_residual_masks(masks: PruneMask, graph: NetworkGraph) -> PruneMask:
    """Route keep-vectors of residual-coupled inputs to samplers.

    Trunk channels tied to an addition are never removed; the branch entry
    selects the kept channels instead.
    """
    out = PruneMask(dict(masks.layers), dict(masks.samplers))
    for lid, keep in masks.layers.items():
        src = graph.trace_source(lid)
        if not src.coupled:
            continue
        if keep.size != src.channels:
            raise InvalidStateError(f"{lid}: mask covers {keep.size} channels, trunk has {src.channels}")
        out.samplers[lid] = ResidualSampler(lid, keep.copy())
    return out


# --- masks.json ---------------------------------------------------------


def masks_to_dict(masks: PruneMask, t_star=None, achieved=None) -> dict:
    return {
        "t_star": None if t_star is None else float(t_star),
        "achieved_ratio": None if achieved is None else float(achieved),
        "layers": [{"id": lid, "keep": [bool(v) for v in k]} for lid, k in masks.layers.items()],
        "residual_samplers": [
            {"layer_id": s.layer_id, "keep": [bool(v) for v in s.keep_mask]} for s in masks.samplers.values()
        ],
    }


def save_masks(masks: PruneMask, path, t_star=None, achieved=None) -> None:
    Path(path).write_text(json.dumps(masks_to_dict(masks, t_star, achieved), indent=1) + "\n")


def load_masks(path) -> tuple[PruneMask, dict]:
    try:
        doc = json.loads(Path(path).read_text())
        masks = PruneMask(
            {e["id"]: np.asarray(e["keep"], dtype=bool) for e in doc["layers"]},
            {e["layer_id"]: ResidualSampler(e["layer_id"], e["keep"]) for e in doc.get("residual_samplers", [])},
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a masks file ({exc})") from None
    return masks, doc
