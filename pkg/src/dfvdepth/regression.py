"""Probability-to-depth regression, uncertainty, and the evaluation metrics.

Depth is the expectation of the focal distances under the per-pixel frame
distribution; uncertainty is the matching weighted standard deviation; the
frame-ID readout is the same expectation over 1-based frame indices, so a
fractional value points between two frames. The metric suite follows the
standard dense-depth protocol (MSE, RMS, log RMS, relative errors, delta
thresholds at 1.25^k, a Hessian-based bumpiness score, and the mean
uncertainty over valid pixels).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from . import autodiff as ad
from .errors import EmptyMaskError, ShapeError


def _prob_array(p):
    from .network import ProbabilityVolume  # avoid import cycle at module load

    if isinstance(p, ProbabilityVolume):
        return p.data
    return p


def _broadcast_focal(l, data_shape, axis):
    """Reshape focal distances [N] or per-sample [B, N] against the volume."""
    l = np.asarray(l, dtype=np.float64)
    n = data_shape[axis]
    if l.ndim == 1:
        if l.shape[0] != n:
            raise ShapeError(
                f"probability volume has {n} frames but {l.shape[0]} focal distances")
        shape = [1] * len(data_shape)
        shape[axis] = n
        return l.reshape(shape)
    if l.ndim == 2 and axis == 1:
        if l.shape != data_shape[:2]:
            raise ShapeError(
                f"per-sample focal distances {l.shape} do not match volume "
                f"batch/frames {data_shape[:2]}")
        return l.reshape(l.shape + (1,) * (len(data_shape) - 2))
    raise ShapeError(f"focal distances must be [N] or [B, N], got {l.shape}")


def regress_depth(p, focal_distances):
    """Per-pixel expected focal distance: a convex combination of ``l``.

    Accepts a ProbabilityVolume, a Tensor, or a plain array shaped
    [B, N, H, W] (or [N, H, W]); Tensor input keeps the result differentiable.
    ``focal_distances`` may be shared ([N]) or per-sample ([B, N]).
    """
    p = _prob_array(p)
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    axis = data.ndim - 3
    lb = _broadcast_focal(focal_distances, data.shape, axis)
    if isinstance(p, Tensor):
        return ad.sum_(ad.mul(p, Tensor(lb)), axis=axis)
    return (data * lb).sum(axis=axis)


def regress_frame_id(p):
    """Expected 1-based frame index; fractional values sit between frames."""
    p = _prob_array(p)
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    axis = data.ndim - 3
    n = data.shape[axis]
    ids = np.arange(1.0, n + 1.0)
    shape = [1] * data.ndim
    shape[axis] = n
    return (data * ids.reshape(shape)).sum(axis=axis)


def uncertainty(p, focal_distances, depth=None):
    """Weighted standard deviation of the focal distances under ``p``."""
    p = _prob_array(p)
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    axis = data.ndim - 3
    lb = _broadcast_focal(focal_distances, data.shape, axis)
    if depth is None:
        depth = regress_depth(data, focal_distances)
    elif isinstance(depth, Tensor):
        depth = depth.data
    dev = lb - np.expand_dims(depth, axis)
    var = (data * dev * dev).sum(axis=axis)
    return np.sqrt(np.maximum(var, 0.0))


@dataclass
class DepthResult:
    """One stack's prediction bundle: depth, uncertainty, fractional frame ID,
    and (once scored) the metric record."""

    depth: np.ndarray
    unc: np.ndarray
    frame_id: np.ndarray
    metrics: "MetricRecord" = None

    def validate(self, focal_distances, tol: float = 1e-9) -> None:
        l = np.asarray(focal_distances, dtype=np.float64)
        n = l.shape[0]
        if self.depth.min() < l[0] - tol or self.depth.max() > l[-1] + tol:
            raise ShapeError("depth leaves the focal-distance interval")
        if self.unc.min() < -tol or self.unc.max() > (l[-1] - l[0]) / 2.0 + tol:
            raise ShapeError("uncertainty leaves [0, span/2]")
        if self.frame_id.min() < 1.0 - tol or self.frame_id.max() > n + tol:
            raise ShapeError("frame id leaves [1, N]")


@dataclass
class MetricRecord:
    mse: float
    rms: float
    log_rms: float
    abs_rel: float
    sqr_rel: float
    delta1: float
    delta2: float
    delta3: float
    bumpiness: float
    avg_unc: float
    excluded: int = 0  # valid pixels skipped by ratio/log metrics (gt <= 0)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


def evaluate(pred: np.ndarray, gt: np.ndarray, valid_mask=None,
             unc=None) -> MetricRecord:
    """Score a depth prediction against ground truth over the valid mask.

    Squared-error metrics run over every valid pixel; ratio and log metrics
    skip non-positive ground truth (tallied in ``excluded``). Bumpiness is
    100x the mean Frobenius norm of the central-difference Hessian over valid
    interior pixels. Delta thresholds follow max(pred/gt, gt/pred) < 1.25^k,
    reported as percentages.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(
            f"pred and gt must be matching H x W maps, got {pred.shape} and {gt.shape}")
    mask = np.ones_like(pred) if valid_mask is None else \
        np.asarray(valid_mask, dtype=np.float64)
    if mask.shape != pred.shape:
        raise ShapeError(f"mask shape {mask.shape} != map shape {pred.shape}")
    if unc is None:
        unc = np.zeros_like(pred)
    valid = mask > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyMaskError("evaluate: mask selects no pixels")

    err = pred[valid] - gt[valid]
    mse = float((err ** 2).mean())
    avg_unc = float(np.asarray(unc)[valid].mean())

    ratio_ok = valid & (gt > 0)
    excluded = n_valid - int(ratio_ok.sum())
    if ratio_ok.any():
        pr, gr = pred[ratio_ok], gt[ratio_ok]
        log_rms = float(np.sqrt(((np.log(pr) - np.log(gr)) ** 2).mean()))
        abs_rel = float((np.abs(pr - gr) / gr).mean())
        sqr_rel = float(((pr - gr) ** 2 / gr).mean())
        r = np.maximum(pr / gr, gr / pr)
        delta1 = float((r < 1.25).mean() * 100.0)
        delta2 = float((r < 1.25 ** 2).mean() * 100.0)
        delta3 = float((r < 1.25 ** 3).mean() * 100.0)
    else:
        log_rms = abs_rel = sqr_rel = delta1 = delta2 = delta3 = 0.0

    dxx = pred[1:-1, 2:] - 2.0 * pred[1:-1, 1:-1] + pred[1:-1, :-2]
    dyy = pred[2:, 1:-1] - 2.0 * pred[1:-1, 1:-1] + pred[:-2, 1:-1]
    dxy = (pred[2:, 2:] - pred[2:, :-2] - pred[:-2, 2:] + pred[:-2, :-2]) / 4.0
    frob = np.sqrt(dxx ** 2 + 2.0 * dxy ** 2 + dyy ** 2)
    interior = valid[1:-1, 1:-1]
    bump = float(frob[interior].mean() * 100.0) if interior.any() else 0.0

    return MetricRecord(mse=mse, rms=float(np.sqrt(mse)), log_rms=log_rms,
                        abs_rel=abs_rel, sqr_rel=sqr_rel, delta1=delta1,
                        delta2=delta2, delta3=delta3, bumpiness=bump,
                        avg_unc=avg_unc, excluded=excluded)


def aggregate_records(records) -> MetricRecord:
    """Field-wise mean over per-sample records (exclusions are summed)."""
    records = list(records)
    if not records:
        raise EmptyMaskError("cannot aggregate zero metric records")
    fields = [f for f in MetricRecord.__dataclass_fields__ if f != "excluded"]
    means = {f: float(np.mean([getattr(r, f) for r in records])) for f in fields}
    return MetricRecord(excluded=sum(r.excluded for r in records), **means)


def write_metric_lines(path, records, aggregate=None) -> None:
    """JSON-lines: one record per sample, then an aggregate line."""
    with open(path, "w") as f:
        for i, rec in enumerate(records):
            row = {"sample": i}
            row.update(rec.to_dict())
            f.write(json.dumps(row, sort_keys=True) + "\n")
        if aggregate is not None:
            row = {"sample": "aggregate"}
            row.update(aggregate.to_dict())
            f.write(json.dumps(row, sort_keys=True) + "\n")
