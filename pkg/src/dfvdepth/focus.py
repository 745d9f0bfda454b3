"""Focus measures, focus volumes, and the frame-difference transform.

A focus volume stacks per-frame feature maps along a new frame axis
(B x F x N x H x W). Its differential variant replaces slice i with
slice_i - slice_{i+1} and keeps the last slice untouched as a context
carrier; a sharpness peak then shows up as the single sign change of the
per-pixel trace. The same transform works on hand-crafted measures and on
learned features, and it is differentiable so the network can train
through it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .optics import FocalStack


@dataclass
class FocusVolume:
    data: Tensor          # B x F x N x H x W
    scale: int = 1        # downsampling factor relative to the input frames

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(
                f"focus volume must be B x F x N x H x W, got {self.data.shape}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[2]


class DifferentialFocusVolume(FocusVolume):
    """Same layout as FocusVolume; slices hold adjacent-frame differences."""


def build_focus_volume(per_frame_features, scale: int = 1) -> FocusVolume:
    """Stack N same-shaped B x F x H x W tensors along a new frame axis."""
    feats = list(per_frame_features)
    if len(feats) < 2:
        raise ShapeError(f"need at least 2 frames to build a volume, got {len(feats)}")
    base = feats[0].shape
    for i, f in enumerate(feats):
        if f.shape != base:
            raise ShapeError(
                f"frame {i} features have shape {f.shape}, expected {base}")
    return FocusVolume(data=ad.stack(feats, axis=2), scale=scale)


def differentiate_volume(fv: FocusVolume) -> DifferentialFocusVolume:
    """Frame-wise first difference with the last slice preserved.

    Output slice i equals input slice i minus slice i+1 for all but the last
    frame; the last slice passes through unchanged. Gradients flow to both
    neighboring slices with signs +1/-1 (and +1 for the final slice).
    """
    n = fv.num_frames
    if n < 2:
        raise ShapeError(f"differentiation needs at least 2 frames, got {n}")
    q = fv.data
    head = ad.sub(q[:, :, :-1], q[:, :, 1:])
    return DifferentialFocusVolume(
        data=ad.concat([head, q[:, :, n - 1:n]], axis=2), scale=fv.scale)


def normalize_volume(fv: FocusVolume) -> FocusVolume:
    """Per-pixel, per-feature min-max map of the frame trace onto [0,1].

    Constant traces map to zero. Comparison/plotting helper only; gradients do
    not flow through it.
    """
    if fv.num_frames < 2:
        raise ShapeError("normalization needs at least 2 frames")
    q = fv.data.data
    lo = q.min(axis=2, keepdims=True)
    hi = q.max(axis=2, keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (q - lo) / np.where(span > 0, span, 1.0), 0.0)
    return FocusVolume(data=Tensor(out), scale=fv.scale)


_LAPLACIAN_4 = np.array([[0.0, -1.0, 0.0],
                         [-1.0, 4.0, -1.0],
                         [0.0, -1.0, 0.0]])


def laplacian_focus_measure(frame: np.ndarray, window: int = 9) -> np.ndarray:
    """Windowed sum of absolute 4-neighbor Laplacian responses.

    Accepts H x W or C x H x W frames (channels are averaged first). Borders
    use replicate padding for both the stencil and the window sum.
    """
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.ndim != 2:
        raise ShapeError(f"frame must be H x W or C x H x W, got {img.shape}")
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    resp = np.abs(ndimage.convolve(img, _LAPLACIAN_4, mode="nearest"))
    if window == 1:
        return resp
    return ndimage.uniform_filter(resp, size=window, mode="nearest") * (window * window)


def measure_volume(stack: FocalStack, window: int = 9) -> np.ndarray:
    """N x H x W Laplacian measure maps, one per frame."""
    return np.stack([laplacian_focus_measure(stack.frames[i], window)
                     for i in range(stack.num_frames)])


def argmax_depth(measure_volume_: np.ndarray, focal_distances):
    """Classical readout: per-pixel argmax frame and its focal distance.

    Ties break toward the smaller frame index (nearer focus). Accepts
    N x H x W or B x N x H x W volumes; the frame axis is the first of the
    trailing three.
    """
    mv = np.asarray(measure_volume_, dtype=np.float64)
    if mv.ndim not in (3, 4):
        raise ShapeError(f"measure volume must be [B x] N x H x W, got {mv.shape}")
    axis = mv.ndim - 3
    l = np.asarray(focal_distances, dtype=np.float64)
    if mv.shape[axis] != l.shape[0]:
        raise ShapeError(
            f"volume has {mv.shape[axis]} frames but {l.shape[0]} focal distances")
    idx = mv.argmax(axis=axis)
    return l[idx], idx


def classical_depth_from_stack(stack: FocalStack, window: int = 9):
    """Laplacian measure + argmax baseline over a full stack."""
    return argmax_depth(measure_volume(stack, window), stack.focal_distances)


def trace_demo(stack: FocalStack, pixel, window: int = 9, measure=None):
    """Raw / differential / normalized per-frame curves at one pixel.

    ``measure`` maps a frame to an H x W score map (the Laplacian measure by
    default). Returns one row per frame: (frame_index, raw, differential,
    normalized), with the differential sharing the last-slice-preserved
    convention of the volume transform.
    """
    y, x = pixel
    if measure is None:
        measure = lambda f: laplacian_focus_measure(f, window)
    raw = np.array([measure(stack.frames[i])[y, x] for i in range(stack.num_frames)])
    diff = np.empty_like(raw)
    diff[:-1] = raw[:-1] - raw[1:]
    diff[-1] = raw[-1]
    span = raw.max() - raw.min()
    norm = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    return [(i + 1, float(raw[i]), float(diff[i]), float(norm[i]))
            for i in range(stack.num_frames)]


def write_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "raw", "differential", "normalized"])
        writer.writerows(rows)
