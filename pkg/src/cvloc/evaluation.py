"""Evaluation battery: metric errors in meters, probability at the ground
truth pixel, probability-ranked rejection curves, orientation robustness, and
n-way orientation classification.

Model access goes through a plain callable `logits_fn(ground, satellite) ->
(L, L) ndarray` of pre-softmax activations, so any localizer (or a test stub)
plugs in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .synthdata import rotate_patch, shift_panorama


@dataclass
class SampleRecord:
    id: int
    error_m: float
    prob_at_gt: Optional[float] = None
    max_prob: Optional[float] = None


@dataclass
class EvalReport:
    mean_err_m: float
    median_err_m: float
    prob_at_gt_mean: Optional[float] = None
    prob_at_gt_median: Optional[float] = None
    rejection_curve: Optional[list] = None  # (keep_frac, mean, median, q25, q75)
    records: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def error_meters(pred_px, gt_px, meters_per_px: float) -> float:
    """Euclidean pixel distance scaled to meters."""
    if meters_per_px <= 0:
        raise ConfigError(f"meters_per_px must be > 0, got {meters_per_px}")
    du = float(pred_px[0]) - float(gt_px[0])
    dv = float(pred_px[1]) - float(gt_px[1])
    return math.hypot(du, dv) * meters_per_px


def error_stats(errors):
    """(mean, median); the median averages the two middle order statistics
    for even counts."""
    errors = [float(e) for e in errors]
    if not errors:
        raise DataError("error_stats needs at least one value")
    return float(np.mean(errors)), float(np.median(errors))


def prob_at_gt(heatmap, gt_px) -> float:
    """Probability mass of the cell containing the ground-truth position."""
    h = np.asarray(heatmap if not hasattr(heatmap, "h") else heatmap.h)
    L0, L1 = h.shape
    u, v = float(gt_px[0]), float(gt_px[1])
    if not (0.0 <= u < L0 and 0.0 <= v < L1):
        raise DataError(f"ground truth {gt_px} outside the {L0}x{L1} grid")
    return float(h[int(u), int(v)])


def rejection_curve(records, fractions):
    """Error statistics of the top-x% most confident predictions.

    Records are ranked by descending max_prob (ties broken by sample id for
    determinism); each keep-fraction reports (fraction, mean, median, q25,
    q75) over the kept prefix.
    """
    records = list(records)
    if not records:
        raise DataError("rejection_curve needs at least one record")
    if any(r.max_prob is None for r in records):
        raise DataError("rejection_curve records must carry max_prob")
    fractions = sorted({float(f) for f in fractions}, reverse=True)
    ranked = sorted(records, key=lambda r: (-r.max_prob, r.id))
    errs = np.array([r.error_m for r in ranked], dtype=np.float64)
    curve = []
    for f in fractions:
        k = max(1, int(math.floor(f * len(ranked) + 0.5)))
        kept = errs[:k]
        curve.append(
            (
                f,
                float(kept.mean()),
                float(np.median(kept)),
                float(np.percentile(kept, 25)),
                float(np.percentile(kept, 75)),
            )
        )
    return curve


# -- orientation experiments -----------------------------------------------------


def _panorama_shift_cols(angle: float, ground_w: int) -> int:
    return int(round(angle / (2.0 * math.pi) * ground_w))


def orientation_perturb(
    logits_fn, sample, shifts, meters_per_px: float = None, view: str = "panorama"
):
    """Per-shift localization errors under heading noise.

    Each shift (radians) rotates the panorama by the nearest whole number of
    columns before the forward pass; requires a panoramic ground view.
    """
    if view != "panorama":
        raise ConfigError(
            f"column-shift orientation perturbation needs a panorama, got {view!r}"
        )
    if sample.ground is None:
        raise DataError("orientation_perturb needs a sample with a ground view")
    mpp = sample.meters_per_px if meters_per_px is None else meters_per_px
    ground_w = sample.ground.shape[2]
    errors = []
    for shift in shifts:
        cols = _panorama_shift_cols(float(shift), ground_w)
        logits = logits_fn(shift_panorama(sample.ground, cols), sample.satellite)
        u, v = np.unravel_index(int(np.asarray(logits).argmax()), logits.shape)
        errors.append(error_meters((u + 0.5, v + 0.5), sample.gt_pixel, mpp))
    return errors


def classify_orientation(logits_fn, G, S, n_rot: int = 16, mode: str = "panorama") -> int:
    """Class of the rotation hypothesis whose pre-softmax map peaks highest.

    "panorama" undoes each hypothesis by a circular column shift of the ground
    view; "satellite" counter-rotates the overhead patch instead (front-view
    datasets). Activation maps from separate forward passes are compared
    directly.
    """
    if n_rot < 1:
        raise ConfigError(f"n_rot must be >= 1, got {n_rot}")
    best_k, best_peak = 0, -math.inf
    for k in range(n_rot):
        angle = 2.0 * math.pi * k / n_rot
        if mode == "panorama":
            gk = shift_panorama(G, -_panorama_shift_cols(angle, G.shape[2]))
            logits = logits_fn(gk, S)
        elif mode == "satellite":
            logits = logits_fn(G, rotate_patch(S, -angle))
        else:
            raise ConfigError(f"unknown orientation mode {mode!r}")
        peak = float(np.asarray(logits).max())
        if peak > best_peak:
            best_k, best_peak = k, peak
    return best_k


def classify_orientation_joint(logits_fn, G, S, n_rot: int = 16, mode: str = "panorama"):
    """Joint location + orientation via one softmax over all n_rot * L * L
    cells. Returns (class index, (u, v) prediction, peak probability)."""
    if n_rot < 1:
        raise ConfigError(f"n_rot must be >= 1, got {n_rot}")
    maps = []
    for k in range(n_rot):
        angle = 2.0 * math.pi * k / n_rot
        if mode == "panorama":
            gk = shift_panorama(G, -_panorama_shift_cols(angle, G.shape[2]))
            maps.append(np.asarray(logits_fn(gk, S), dtype=np.float64))
        elif mode == "satellite":
            maps.append(np.asarray(logits_fn(G, rotate_patch(S, -angle)), dtype=np.float64))
        else:
            raise ConfigError(f"unknown orientation mode {mode!r}")
    stackd = np.stack(maps)
    flat = stackd - stackd.max()
    probs = np.exp(flat)
    probs /= probs.sum()
    k, u, v = np.unravel_index(int(probs.argmax()), probs.shape)
    return int(k), (u + 0.5, v + 0.5), float(probs[k, u, v])


# -- reference predictions ---------------------------------------------------------


def center_only(samples, L: int) -> EvalReport:
    """Always predict the patch center; the no-model reference."""
    records = [
        SampleRecord(
            id=i,
            error_m=error_meters((L / 2.0, L / 2.0), s.gt_pixel, s.meters_per_px),
        )
        for i, s in enumerate(samples)
    ]
    mean, median = error_stats([r.error_m for r in records])
    return EvalReport(mean_err_m=mean, median_err_m=median, records=records)


def evaluate_heatmap_model(heatmap_fn, samples, fractions) -> EvalReport:
    """Full report for a model that outputs a probability map per sample."""
    records = []
    for i, s in enumerate(samples):
        h = np.asarray(heatmap_fn(s.ground, s.satellite))
        u, v = np.unravel_index(int(h.argmax()), h.shape)
        records.append(
            SampleRecord(
                id=i,
                error_m=error_meters((u + 0.5, v + 0.5), s.gt_pixel, s.meters_per_px),
                prob_at_gt=prob_at_gt(h, s.gt_pixel),
                max_prob=float(h[u, v]),
            )
        )
    mean, median = error_stats([r.error_m for r in records])
    probs = [r.prob_at_gt for r in records]
    return EvalReport(
        mean_err_m=mean,
        median_err_m=median,
        prob_at_gt_mean=float(np.mean(probs)),
        prob_at_gt_median=float(np.median(probs)),
        rejection_curve=rejection_curve(records, fractions),
        records=records,
    )


def evaluate_point_model(point_fn, samples, sd_px: float) -> EvalReport:
    """Report for a point-prediction model post-processed with an isotropic
    Gaussian of the given standard deviation (pixels)."""
    from .baseline import gaussian_heatmap

    records = []
    for i, s in enumerate(samples):
        pred = point_fn(s.ground, s.satellite)
        L = s.satellite.shape[1]
        h = gaussian_heatmap(pred, sd_px, L)
        records.append(
            SampleRecord(
                id=i,
                error_m=error_meters(pred, s.gt_pixel, s.meters_per_px),
                prob_at_gt=prob_at_gt(h, s.gt_pixel),
                max_prob=float(h.max()),
            )
        )
    mean, median = error_stats([r.error_m for r in records])
    probs = [r.prob_at_gt for r in records]
    return EvalReport(
        mean_err_m=mean,
        median_err_m=median,
        prob_at_gt_mean=float(np.mean(probs)),
        prob_at_gt_median=float(np.median(probs)),
        records=records,
        extras={"sd_px": sd_px},
    )


# -- report files --------------------------------------------------------------------


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_report(report: EvalReport, dir_path, name: str) -> None:
    """Emit the plain-text table, the per-sample record file, and (when the
    model ranks its predictions) the rejection-curve plot data."""
    import os

    os.makedirs(dir_path, exist_ok=True)
    lines = [
        f"samples = {len(report.records)}",
        f"mean_err_m = {report.mean_err_m!r}",
        f"median_err_m = {report.median_err_m!r}",
    ]
    if report.prob_at_gt_mean is not None:
        lines.append(f"prob_at_gt_mean = {report.prob_at_gt_mean!r}")
        lines.append(f"prob_at_gt_median = {report.prob_at_gt_median!r}")
    for key, val in report.extras.items():
        lines.append(f"{key} = {val!r}")
    if report.rejection_curve:
        lines.append("rejection_curve (keep, mean, median, q25, q75):")
        for point in report.rejection_curve:
            lines.append("  " + " ".join(repr(round(x, 6)) for x in point))
    with open(os.path.join(dir_path, f"{name}_report.txt"), "w") as fh:
        fh.write("".join(line + "\n" for line in lines))

    with open(os.path.join(dir_path, f"{name}_records.csv"), "w") as fh:
        fh.write("id,error_m,prob_at_gt,max_prob\n")
        for r in report.records:
            fh.write(f"{r.id},{r.error_m!r},{_fmt(r.prob_at_gt)},{_fmt(r.max_prob)}\n")

    if report.rejection_curve:
        with open(os.path.join(dir_path, f"{name}_rejection.dat"), "w") as fh:
            fh.write("# keep_fraction median_err_m\n")
            for point in report.rejection_curve:
                fh.write(f"{point[0]!r} {point[2]!r}\n")


def parse_report(path) -> dict:
    """Read back the key = value lines of a report file."""
    values = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line and not line.startswith(" "):
                key, _, val = line.partition("=")
                values[key.strip()] = float(val.strip())
    return values
