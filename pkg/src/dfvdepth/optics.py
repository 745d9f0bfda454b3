"""Thin-lens focal-stack synthesis with exact ground truth.

A scene is a far-to-near list of textured layers. For each focus distance the
renderer blurs every layer by a normalized disc kernel whose radius follows
the thin-lens circle-of-confusion model and alpha-composites the results, so
a layer sitting exactly on the focal plane comes out pixel-identical to its
texture. That property is what the classical focus-measure oracle and the
network tests lean on.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataIOError, ShapeError
from .imgio import read_pfm, read_pgm16, write_pfm, write_pgm16


@dataclass
class CameraModel:
    """Thin-lens camera: focal length, aperture and sensor geometry (meters)."""

    focal_length: float = 0.05
    aperture_diameter: float = 0.025
    pixel_pitch: float = 1e-4
    sensor_height: int = 64
    sensor_width: int = 64

    def __post_init__(self):
        for name in ("focal_length", "aperture_diameter", "pixel_pitch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"camera {name} must be positive")
        if self.sensor_height < 1 or self.sensor_width < 1:
            raise ConfigError("camera sensor extents must be positive")

    def to_dict(self):
        return {
            "focal_length": self.focal_length,
            "aperture_diameter": self.aperture_diameter,
            "pixel_pitch": self.pixel_pitch,
            "sensor_height": self.sensor_height,
            "sensor_width": self.sensor_width,
        }


@dataclass
class SceneLayer:
    depth: float
    texture: np.ndarray        # H x W, values in [0,1]
    opacity: np.ndarray        # H x W alpha in [0,1]


@dataclass
class SceneSpec:
    """Layers ordered far to near, plus the backdrop depth."""

    layers: Sequence[SceneLayer]
    background_depth: float

    def __post_init__(self):
        depths = [ly.depth for ly in self.layers]
        if any(d <= 0 for d in depths) or self.background_depth <= 0:
            raise ConfigError("layer depths must be strictly positive")
        if len(set(depths)) != len(depths):
            raise ConfigError("layer depths must be distinct")
        if sorted(depths, reverse=True) != depths:
            raise ConfigError("layers must be ordered far to near")


@dataclass
class FocalStack:
    """N aligned frames at strictly ascending focal distances."""

    frames: np.ndarray                      # N x C x H x W in [0,1]
    focal_distances: np.ndarray             # N, ascending
    gt_depth: Optional[np.ndarray] = None   # H x W
    valid_mask: Optional[np.ndarray] = None  # H x W in {0,1}
    mask_protocol: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.focal_distances = np.asarray(self.focal_distances, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be N x C x H x W, got {self.frames.shape}")
        n = self.frames.shape[0]
        if n < 2:
            raise ShapeError(f"a focal stack needs at least 2 frames, got {n}")
        if self.focal_distances.shape != (n,):
            raise ShapeError("focal_distances length must match the frame count")
        if not np.all(np.diff(self.focal_distances) > 0):
            raise ShapeError("focal distances must be strictly ascending")
        if self.mask_protocol and self.gt_depth is not None:
            self.valid_mask = self.compute_range_mask()

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def compute_range_mask(self) -> np.ndarray:
        """1 where gt depth falls inside [min focal, max focal]."""
        lo, hi = self.focal_distances[0], self.focal_distances[-1]
        return ((self.gt_depth >= lo) & (self.gt_depth <= hi)).astype(np.float64)

    def subset(self, indices) -> "FocalStack":
        """A sub-stack of the given ascending frame indices; the validity mask
        is recomputed against the reduced focal span when the protocol is on."""
        idx = np.asarray(indices, dtype=np.int64)
        return FocalStack(
            frames=self.frames[idx],
            focal_distances=self.focal_distances[idx],
            gt_depth=self.gt_depth,
            valid_mask=None if self.mask_protocol else self.valid_mask,
            mask_protocol=self.mask_protocol,
        )


def normalize_focal_distances(focal_distances) -> np.ndarray:
    """Map an ascending focal-distance list onto [0, 1] (uncalibrated mode)."""
    l = np.asarray(focal_distances, dtype=np.float64)
    return (l - l[0]) / (l[-1] - l[0])


def coc_radius_pixels(object_depth: float, focus_distance: float,
                      cam: CameraModel) -> float:
    """Circle-of-confusion radius on the sensor, in pixels.

    r = (A/2) * |d - s| / d * f / (s - f) / pixel_pitch for aperture A, focal
    length f, focus distance s and object depth d. Zero exactly on the focal
    plane and strictly increasing away from it on either side.
    """
    if object_depth <= 0:
        raise ConfigError(f"object depth must be positive, got {object_depth}")
    if focus_distance <= cam.focal_length:
        raise ConfigError(
            f"focus distance {focus_distance} must exceed the focal length "
            f"{cam.focal_length} (real-image regime)")
    a = cam.aperture_diameter / 2.0
    blur_m = a * abs(object_depth - focus_distance) / object_depth \
        * cam.focal_length / (focus_distance - cam.focal_length)
    return blur_m / cam.pixel_pitch


def disc_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Area-normalized pillbox kernel with subpixel rim coverage.

    Radius zero (or small enough that no subsample falls inside the disc)
    degenerates to the exact identity kernel, keeping in-focus layers
    bit-identical to their textures.
    """
    if radius < 0:
        raise ConfigError(f"blur radius must be non-negative, got {radius}")
    if radius == 0.0:
        return np.ones((1, 1))
    half = int(np.ceil(radius))
    size = 2 * half + 1
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    centers = np.arange(size) - half
    xs = centers[:, None] + offs[None, :]          # size x S subsample coords
    d2 = (xs ** 2)[:, None, :, None] + (xs ** 2)[None, :, None, :]
    cover = (d2 <= radius * radius).sum(axis=(2, 3)).astype(np.float64)
    total = cover.sum()
    if total == 0.0:
        return np.ones((1, 1))
    return cover / total


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if kernel.shape == (1, 1):
        return img * kernel[0, 0]
    return ndimage.convolve(img, kernel, mode="nearest")


def render_focal_stack(scene: SceneSpec, focus_distances, cam: CameraModel,
                       mask_protocol: bool = False) -> FocalStack:
    """Composite the scene once per focus distance, far-to-near.

    Each layer's color (premultiplied by alpha) and alpha are blurred with the
    disc kernel of that layer's CoC radius, then alpha-composited over the
    accumulated background. Ground truth depth takes the front-most layer with
    opacity above 0.5, else the background depth.
    """
    if not scene.layers:
        raise ConfigError("cannot render an empty scene")
    l = np.asarray(focus_distances, dtype=np.float64)
    if not np.all(np.diff(l) > 0):
        raise ConfigError("focus distances must be strictly ascending")
    h, w = cam.sensor_height, cam.sensor_width
    for i, ly in enumerate(scene.layers):
        if ly.texture.shape != (h, w) or ly.opacity.shape != (h, w):
            raise ShapeError(
                f"layer {i} texture/opacity shape must match the {h}x{w} sensor")

    frames = np.empty((len(l), 1, h, w))
    for fi, s in enumerate(l):
        acc = np.zeros((h, w))
        for ly in scene.layers:
            k = disc_kernel(coc_radius_pixels(ly.depth, s, cam))
            color = _blur(ly.texture * ly.opacity, k)
            alpha = _blur(ly.opacity, k)
            acc = color + (1.0 - alpha) * acc
        frames[fi, 0] = np.clip(acc, 0.0, 1.0)

    gt = np.full((h, w), scene.background_depth)
    for ly in scene.layers:  # far to near; nearer layers overwrite
        gt = np.where(ly.opacity > 0.5, ly.depth, gt)
    return FocalStack(frames=frames, focal_distances=l, gt_depth=gt,
                      mask_protocol=mask_protocol)


# ---------------------------------------------------------------------------
# procedural textures and random scenes
# ---------------------------------------------------------------------------


def bandlimited_noise(rng, h: int, w: int, sigma: float = 2.0,
                      contrast: float = 0.8) -> np.ndarray:
    """Low-pass filtered white noise, stretched to a [0,1] sub-range."""
    base = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma)
    lo, hi = base.min(), base.max()
    if hi - lo == 0:
        return np.full((h, w), 0.5)
    t = (base - lo) / (hi - lo)
    return 0.5 + (t - 0.5) * contrast


def checkerboard(rng, h: int, w: int, cell: int = 8) -> np.ndarray:
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.65, 0.95)
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    board = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    return lo + board * (hi - lo)


def _quantize16(img: np.ndarray) -> np.ndarray:
    # snap to the 16-bit grid so PGM round-trips are lossless
    return np.rint(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


def _random_texture(rng, h, w) -> np.ndarray:
    if rng.random() < 0.5:
        tex = bandlimited_noise(rng, h, w, sigma=rng.uniform(0.8, 2.5),
                                contrast=rng.uniform(0.6, 0.95))
    else:
        tex = checkerboard(rng, h, w, cell=int(rng.integers(4, 13)))
    return _quantize16(tex)


def _random_shape_mask(rng, h, w) -> np.ndarray:
    mask = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ry, rx = rng.uniform(0.12, 0.3) * h, rng.uniform(0.12, 0.3) * w
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1.0
    else:
        y0 = int(rng.uniform(0.05, 0.55) * h)
        x0 = int(rng.uniform(0.05, 0.55) * w)
        y1 = y0 + int(rng.uniform(0.2, 0.4) * h)
        x1 = x0 + int(rng.uniform(0.2, 0.4) * w)
        mask[y0:y1, x0:x1] = 1.0
    return mask


def random_scene(rng, cam: CameraModel, depth_min: float, depth_max: float,
                 max_layers: int = 3) -> SceneSpec:
    """Opaque textured backdrop plus a few shaped foreground layers, all with
    depths inside [depth_min, depth_max]."""
    h, w = cam.sensor_height, cam.sensor_width
    span = depth_max - depth_min
    bg_depth = depth_max - rng.uniform(0.0, 0.2) * span
    layers = [SceneLayer(bg_depth, _random_texture(rng, h, w), np.ones((h, w)))]
    n_fg = int(rng.integers(1, max_layers + 1))
    fg_depths = np.sort(rng.uniform(depth_min, bg_depth * 0.98, n_fg))[::-1]
    for d in fg_depths:
        layers.append(SceneLayer(float(d), _random_texture(rng, h, w),
                                 _random_shape_mask(rng, h, w)))
    return SceneSpec(layers=layers, background_depth=bg_depth)


# ---------------------------------------------------------------------------
# dataset generation and on-disk layout
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Parameters of one synthetic dataset."""

    num_samples: int = 20
    num_frames: int = 5
    depth_min: float = 0.5
    depth_max: float = 2.0
    max_layers: int = 3
    noise_sigma: float = 0.0
    mask_protocol: bool = True
    camera: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if self.num_frames < 2:
            raise ConfigError("num_frames must be >= 2")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("need 0 < depth_min < depth_max")
        if self.depth_min <= self.camera.focal_length:
            raise ConfigError("depth_min must exceed the focal length")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    def focus_distances(self) -> np.ndarray:
        return np.linspace(self.depth_min, self.depth_max, self.num_frames)


def synthesize_sample(cfg: SynthConfig, seed: int) -> FocalStack:
    """Render one random sample; the seed alone fixes every random choice."""
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, cfg.camera, cfg.depth_min, cfg.depth_max,
                         cfg.max_layers)
    stack = render_focal_stack(scene, cfg.focus_distances(), cfg.camera,
                               mask_protocol=cfg.mask_protocol)
    if cfg.noise_sigma > 0:
        noisy = stack.frames + rng.normal(0.0, cfg.noise_sigma, stack.frames.shape)
        stack.frames = np.clip(noisy, 0.0, 1.0)
    stack.frames = _quantize16(stack.frames)
    return stack


def _sample_id(index: int) -> str:
    return f"sample_{index:05d}"


def write_sample(out_dir, sample_id: str, stack: FocalStack, cfg: SynthConfig,
                 seed: int) -> None:
    sdir = os.path.join(out_dir, sample_id)
    os.makedirs(sdir, exist_ok=True)
    frame_files = []
    for i in range(stack.num_frames):
        name = f"frame_{i}.pgm"
        write_pgm16(os.path.join(sdir, name), stack.frames[i, 0])
        frame_files.append(name)
    write_pfm(os.path.join(sdir, "depth.pfm"), stack.gt_depth)
    meta = {
        "sample_id": sample_id,
        "seed": seed,
        "focal_distances": [float(v) for v in stack.focal_distances],
        "camera": cfg.camera.to_dict(),
        "mask_protocol": cfg.mask_protocol,
        "frame_files": frame_files,
        "depth_file": "depth.pfm",
    }
    with open(os.path.join(sdir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_sample(data_dir, sample_id: str) -> FocalStack:
    sdir = os.path.join(data_dir, sample_id)
    meta_path = os.path.join(sdir, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except OSError as e:
        raise DataIOError(f"failed reading sample metadata {meta_path}: {e}") from e
    frames = np.stack([read_pgm16(os.path.join(sdir, name))
                       for name in meta["frame_files"]])[:, None, :, :]
    gt = read_pfm(os.path.join(sdir, meta["depth_file"]))
    return FocalStack(frames=frames,
                      focal_distances=np.asarray(meta["focal_distances"]),
                      gt_depth=gt,
                      mask_protocol=bool(meta["mask_protocol"]))


def _render_one(args):
    cfg, seed, out_dir, index = args
    sid = _sample_id(index)
    stack = synthesize_sample(cfg, seed + index)
    write_sample(out_dir, sid, stack, cfg, seed + index)
    return sid


def generate_dataset(cfg: SynthConfig, seed: int, out_dir) -> dict:
    """Write ``cfg.num_samples`` independently seeded samples plus a manifest.

    Sample ``i`` uses seed ``seed + i``, so any subset regenerates
    bit-identically regardless of worker scheduling. ``DFV_THREADS`` caps the
    process pool used for rendering.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create dataset directory {out_dir}: {e}") from e
    jobs = [(cfg, seed, out_dir, i) for i in range(cfg.num_samples)]
    workers = max(1, int(os.environ.get("DFV_THREADS", "1")))
    if workers > 1 and cfg.num_samples > 1:
        import multiprocessing

        with multiprocessing.Pool(min(workers, cfg.num_samples)) as pool:
            ids = pool.map(_render_one, jobs)
    else:
        ids = [_render_one(j) for j in jobs]
    manifest = {
        "samples": ids,
        "count": len(ids),
        "seed": seed,
        "num_frames": cfg.num_frames,
        "focal_span": [cfg.depth_min, cfg.depth_max],
        "mask_protocol": cfg.mask_protocol,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def read_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DataIOError(f"failed reading manifest {path}: {e}") from e
