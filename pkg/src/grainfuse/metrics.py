"""Evaluation metrics for reconstructed slices.

Boundary quality is scored two ways: symmetric chamfer distance between
boundary point clouds, and a soft binary cross-entropy against a blurred
ground-truth boundary map (tolerant of small localization error, sensitive
to hallucinated or missing boundaries). Orientation quality is scored as
the symmetry-reduced disorientation angle per pixel, stratified by grain
interior versus boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .orientation import cu2qu, denormalize_cu, disorientation, SymmetryGroup
from .synthgen import extract_boundaries

__all__ = [
    "ChamferResult",
    "DisorientationStats",
    "MetricReport",
    "SweepResult",
    "boundary_to_points",
    "chamfer",
    "gaussian_blur",
    "soft_bce",
    "gbce",
    "disorientation_error",
    "sweep",
]

# Squared diagonal of the unit square: the score an empty prediction earns
# against a non-empty reference (and vice versa).
EMPTY_PENALTY = 2.0

CLAMP = 1e-7


@dataclass
class ChamferResult:
    """Directed and symmetric chamfer distances between two point sets."""

    forward: float
    backward: float

    @property
    def total(self):
        return self.forward + self.backward


def boundary_to_points(boundary_map) -> np.ndarray:
    """Convert a binary boundary map to normalized (row/H, col/W) points."""
    boundary_map = np.asarray(boundary_map)
    h, w = boundary_map.shape
    pts = np.argwhere(boundary_map != 0).astype(np.float64)
    pts[:, 0] /= h
    pts[:, 1] /= w
    return pts


def chamfer(points, reference) -> ChamferResult:
    """Chamfer distances between two point clouds in the unit square.

    forward is the mean over points of the squared distance to the nearest
    reference point; backward is the same with the roles swapped. An empty
    cloud scores 0 in its own direction and charges the penalty 2.0 (the
    squared diagonal) in the other; two empty clouds score zero.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0 and reference.shape[0] == 0:
        return ChamferResult(0.0, 0.0)
    if points.shape[0] == 0:
        return ChamferResult(0.0, EMPTY_PENALTY)
    if reference.shape[0] == 0:
        return ChamferResult(EMPTY_PENALTY, 0.0)
    d_fwd, _ = cKDTree(reference).query(points, k=1)
    d_back, _ = cKDTree(points).query(reference, k=1)
    return ChamferResult(float(np.mean(d_fwd**2)), float(np.mean(d_back**2)))


def _gaussian_kernel(sigma, radius):
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    kernel = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(image, sigma=3.0, radius=5) -> np.ndarray:
    """Blur a 2D map with an explicit truncated Gaussian kernel.

    The kernel covers (2 radius + 1)^2 taps and is normalized to sum 1;
    edges replicate, so a constant map is a fixed point. Output stays in
    [0, 1] for inputs in [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {image.shape}")
    out = ndimage.correlate(image, _gaussian_kernel(sigma, radius), mode="nearest")
    return np.clip(out, 0.0, 1.0) if image.min() >= 0.0 and image.max() <= 1.0 else out


def soft_bce(pred, soft_target, clamp=CLAMP) -> float:
    """Pixel-mean binary cross-entropy with soft targets.

    Predictions are clamped to [clamp, 1 - clamp] before the logs so
    saturated values stay finite.
    """
    pred = np.clip(np.asarray(pred, dtype=np.float64), clamp, 1.0 - clamp)
    g = np.asarray(soft_target, dtype=np.float64)
    return float(-np.mean(g * np.log(pred) + (1.0 - g) * np.log1p(-pred)))


def gbce(pred, target, sigma=3.0, radius=5, clamp=CLAMP) -> float:
    """Cross-entropy of a (possibly averaged) boundary prediction.

    The binary ground-truth map is blurred into soft targets first, so a
    prediction a pixel or two off pays little while confidently wrong
    pixels pay heavily. pred may be binary or an average of several binary
    maps; target must be binary.
    """
    return soft_bce(pred, gaussian_blur(target, sigma=sigma, radius=radius),
                    clamp=clamp)


@dataclass
class DisorientationStats:
    """Disorientation angles (radians) over unobserved pixels, stratified.

    Strata: all considered pixels, grain-interior pixels, and ground-truth
    boundary pixels. Null-ID pixels carry no orientation and are excluded.
    Empty strata report a NaN mean and zero count.
    """

    mean_all: float
    mean_intra: float
    mean_boundary: float
    n_all: int
    n_intra: int
    n_boundary: int

    def degrees(self):
        """The three means converted to degrees."""
        return tuple(np.degrees([self.mean_all, self.mean_intra,
                                 self.mean_boundary]))


def _mean_or_nan(values):
    return float(np.mean(values)) if values.size else float("nan")


def disorientation_error(pred, truth, ids, observed_mask=None,
                         sym: SymmetryGroup = None) -> DisorientationStats:
    """Symmetry-reduced per-pixel orientation error of a reconstruction.

    Parameters
    ----------
    pred, truth : ndarray (H, W, 3)
        Normalized cubochoric channel maps. Predictions are clipped to
        [-1, 1] before decoding.
    ids : ndarray (H, W)
        Ground-truth grain IDs; boundary pixels come from their 4-neighbor
        structure and null pixels (0) are skipped.
    observed_mask : ndarray (H, W) bool, optional
        Pixels whose values were given to the solver; these are excluded
        so the score reflects inpainted content only. None means nothing
        was observed.
    sym : SymmetryGroup
        Crystal symmetry used to reduce each pixel's misorientation.
    """
    if sym is None:
        raise ValueError("a SymmetryGroup is required")
    ids = np.asarray(ids)
    h, w = ids.shape
    if observed_mask is None:
        observed_mask = np.zeros((h, w), dtype=bool)
    consider = ~np.asarray(observed_mask, dtype=bool) & (ids != 0)
    boundary = extract_boundaries(ids).astype(bool)

    pred_cu = denormalize_cu(np.clip(np.asarray(pred, dtype=np.float64), -1, 1))
    truth_cu = denormalize_cu(np.clip(np.asarray(truth, dtype=np.float64), -1, 1))
    q_pred = cu2qu(pred_cu[consider])
    q_truth = cu2qu(truth_cu[consider])
    angles = disorientation(q_pred, q_truth, sym)

    on_boundary = boundary[consider]
    return DisorientationStats(
        mean_all=_mean_or_nan(angles),
        mean_intra=_mean_or_nan(angles[~on_boundary]),
        mean_boundary=_mean_or_nan(angles[on_boundary]),
        n_all=int(angles.size),
        n_intra=int((~on_boundary).sum()),
        n_boundary=int(on_boundary.sum()),
    )


@dataclass
class MetricReport:
    """All scores of one reconstructed slice, plus free-form labels.

    chamfer distances and gbce score the boundary structure; orientation
    holds the stratified disorientation statistics. Fields that a given
    task does not produce stay NaN / None. labels carries experiment
    coordinates (task, observation pattern, slice index, repeat, ...) for
    CSV rows.
    """

    gbce: float = float("nan")
    chamfer_forward: float = float("nan")
    chamfer_backward: float = float("nan")
    orientation: DisorientationStats = None
    pl_mse: float = float("nan")
    labels: dict = field(default_factory=dict)

    @property
    def chamfer_total(self):
        return self.chamfer_forward + self.chamfer_backward

    _SCORE_FIELDS = (
        "gbce",
        "chamfer_forward",
        "chamfer_backward",
        "chamfer_total",
        "pl_mse",
        "disorientation_all",
        "disorientation_intra",
        "disorientation_boundary",
    )

    def scores(self):
        """Flat name -> value mapping of every score in the report."""
        ori = self.orientation
        return {
            "gbce": self.gbce,
            "chamfer_forward": self.chamfer_forward,
            "chamfer_backward": self.chamfer_backward,
            "chamfer_total": self.chamfer_total,
            "pl_mse": self.pl_mse,
            "disorientation_all": ori.mean_all if ori else float("nan"),
            "disorientation_intra": ori.mean_intra if ori else float("nan"),
            "disorientation_boundary": (
                ori.mean_boundary if ori else float("nan")
            ),
        }

    def to_row(self, label_keys=()):
        """One CSV row: the requested labels followed by all scores."""
        row = {k: self.labels.get(k, "") for k in label_keys}
        row.update(self.scores())
        return row


@dataclass
class SweepResult:
    """Rows and per-cell aggregates of a factorial sweep.

    rows holds one dict per (cell, repeat, slice) in deterministic
    order. summary holds one dict per cell with, for every score field,
    its mean over all rows of the cell and a two-standard-error band
    computed over the repeat means (NaN with a single repeat).
    """

    rows: list
    summary: list
    label_keys: tuple


# Seed stride between sweep cells; any sane repeat count fits under it.
_SWEEP_SEED_STRIDE = 100003


def _summarize_cell(mask, n, per_repeat_rows):
    entry = {"mask": mask, "n": n}
    for name in MetricReport._SCORE_FIELDS:
        repeat_means = []
        for rows in per_repeat_rows:
            values = np.asarray([r[name] for r in rows], dtype=np.float64)
            repeat_means.append(
                np.nan if np.all(np.isnan(values)) else np.nanmean(values)
            )
        repeat_means = np.asarray(repeat_means, dtype=np.float64)
        pooled = np.concatenate(
            [[r[name] for r in rows] for rows in per_repeat_rows]
        ).astype(np.float64)
        entry[f"{name}_mean"] = (
            float(np.nanmean(pooled))
            if not np.all(np.isnan(pooled))
            else float("nan")
        )
        if repeat_means.size > 1 and not np.any(np.isnan(repeat_means)):
            se = float(np.std(repeat_means, ddof=1)) / np.sqrt(
                repeat_means.size
            )
            entry[f"{name}_band"] = 2.0 * se
        else:
            entry[f"{name}_band"] = float("nan")
    return entry


def sweep(evaluate_cell, mask_specs, n_values, repeats=1, base_seed=0,
          on_result=None, workers=1,
          label_keys=("mask", "n", "repeat", "slice")):
    """Full-factorial sweep over observation patterns and set sizes.

    Parameters
    ----------
    evaluate_cell : callable(mask_spec, n, repeat, seed) -> list[MetricReport]
        Scores every evaluation slice of one cell once, using the given
        seed for all of that run's randomness. Reports should label each
        slice ("slice" key); the sweep stamps mask, n, and repeat.
    mask_specs, n_values : iterables
        The grid axes. Cells are ordered lexicographically by
        (mask spec text, n), so two runs of the same sweep enumerate and
        seed the cells identically.
    repeats : int
        Independent runs per cell; each gets its own derived seed.
    on_result : callable(mask, n, repeat, reports), optional
        Called as each (cell, repeat) unit finishes, so partial results
        survive a later failure.
    workers : int
        Units run concurrently on a thread pool when > 1. Seeds are
        fixed per unit, so concurrency never changes any result, only
        completion order; the returned rows are re-sorted either way.

    Any unit failure propagates after in-flight units settle (the first
    failure in unit order wins), so a sweep never silently drops a cell.
    """
    cells = sorted({(str(m), int(n)) for m in mask_specs for n in n_values})
    if not cells:
        return SweepResult(rows=[], summary=[], label_keys=tuple(label_keys))
    repeats = int(repeats)
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")

    units = [
        (ci, mask, n, rep)
        for ci, (mask, n) in enumerate(cells)
        for rep in range(repeats)
    ]

    def run_unit(unit):
        ci, mask, n, rep = unit
        seed = base_seed + _SWEEP_SEED_STRIDE * ci + rep
        reports = evaluate_cell(mask, n, rep, seed)
        for report in reports:
            report.labels.update({"mask": mask, "n": n, "repeat": rep})
        if on_result is not None:
            on_result(mask, n, rep, reports)
        return reports

    outcomes = {}
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            futures = {pool.submit(run_unit, u): u for u in units}
            for future, unit in futures.items():
                try:
                    outcomes[unit] = future.result()
                except Exception as exc:
                    outcomes[unit] = exc
    else:
        for unit in units:
            try:
                outcomes[unit] = run_unit(unit)
            except Exception as exc:
                outcomes[unit] = exc
                break

    for unit in units:
        outcome = outcomes.get(unit)
        if isinstance(outcome, Exception):
            raise outcome

    keys = tuple(label_keys)
    rows = []
    per_cell = {cell: [] for cell in cells}
    for unit in units:
        ci, mask, n, rep = unit
        unit_rows = [r.to_row(keys) for r in outcomes[unit]]
        rows.extend(unit_rows)
        per_cell[(mask, n)].append(unit_rows)
    summary = [
        _summarize_cell(mask, n, per_cell[(mask, n)]) for mask, n in cells
    ]
    return SweepResult(rows=rows, summary=summary, label_keys=keys)
