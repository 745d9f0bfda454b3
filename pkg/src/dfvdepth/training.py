"""Training and evaluation loops for the focus-probability network.

Train-time policy: pick frames at random, crop a square window, flip both
axes with probability one half (the same transform for every frame, the
ground truth, and the mask), supervise every scale with a smooth-L1 loss on
the regressed depth weighted by the alpha schedule, and step Adam. Test-time
policy: equidistant frame selection that always keeps the endpoints, and only
the finest-scale output.

All randomness derives from (seed, sample index, epoch) streams, so results
do not depend on scheduling, and repeated runs are bit-identical.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, backward, no_grad
from .errors import (
    CompatibilityError,
    ConfigError,
    DataIOError,
    NumericError,
    ShapeError,
)
from .network import DFVNet, NetworkConfig, upsample_probability
from .optics import FocalStack, read_manifest, read_sample
from .regression import (
    DepthResult,
    aggregate_records,
    evaluate,
    regress_depth,
    regress_frame_id,
    uncertainty,
)

DEFAULT_ALPHAS = (Fraction(8, 15), Fraction(4, 15), Fraction(2, 15), Fraction(1, 15))

_SHUFFLE_STREAM = 2 ** 32  # sample indices stay far below this sentinel


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4            # full-scale runs use 20
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    crop: int = 64                 # full-scale runs use 224
    frames_per_stack: int = 5
    flip_augment: bool = True
    seed: int = 0
    alpha: tuple = DEFAULT_ALPHAS  # per-scale loss weights, exact rationals
    mask_out_of_range: bool = True
    val_limit: int = 8             # per-epoch validation sample cap (0 skips it)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.frames_per_stack < 2:
            raise ConfigError("frames_per_stack must be >= 2")
        if self.crop < 8:
            raise ConfigError("crop must be >= 8")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.val_limit < 0:
            raise ConfigError("val_limit must be non-negative")
        self.alpha = tuple(Fraction(a) for a in self.alpha)
        if any(a <= 0 for a in self.alpha):
            raise ConfigError("alpha weights must be positive")
        if sum(self.alpha) != 1:
            raise ConfigError(f"alpha weights must sum to 1, got {sum(self.alpha)}")

    def loss_weights(self, num_scales: int):
        """First ``num_scales`` alphas, renormalized to sum exactly to 1."""
        if not 1 <= num_scales <= len(self.alpha):
            raise ConfigError(
                f"need 1..{len(self.alpha)} scales, got {num_scales}")
        head = self.alpha[:num_scales]
        total = sum(head)
        return tuple(a / total for a in head)

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "crop": self.crop,
            "frames_per_stack": self.frames_per_stack,
            "flip_augment": self.flip_augment,
            "seed": self.seed,
            "alpha": [str(a) for a in self.alpha],
            "mask_out_of_range": self.mask_out_of_range,
            "val_limit": self.val_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "alpha" in d:
            d["alpha"] = tuple(Fraction(a) for a in d["alpha"])
        return cls(**d)


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------


def _dedup_backfill(rounded, n: int) -> list:
    """Deduplicate 1-based candidates, replacing repeats with the nearest
    unused index (smaller index wins ties); returns sorted 1-based indices."""
    chosen: list = []
    used = set()
    for r in rounded:
        r = min(max(int(r), 1), n)
        if r not in used:
            used.add(r)
            chosen.append(r)
            continue
        for off in range(1, n):
            for cand in (r - off, r + off):
                if 1 <= cand <= n and cand not in used:
                    used.add(cand)
                    chosen.append(cand)
                    break
            else:
                continue
            break
    return sorted(chosen)


def equidistant_indices(n: int, k: int) -> list:
    """0-based indices of k frames evenly spread over an n-frame stack.

    Round-half-up of k positions linearly spaced over [1, n]; the endpoints
    are always present. Collisions (possible only through floating-point
    dust) are deduplicated and backfilled with the nearest unused index.
    """
    if not 2 <= k <= n:
        raise ShapeError(f"cannot pick {k} frames from a stack of {n}")
    if k == n:
        return list(range(n))
    positions = 1.0 + (n - 1.0) * np.arange(k) / (k - 1.0)
    rounded = np.floor(positions + 0.5).astype(int)
    return [c - 1 for c in _dedup_backfill(rounded, n)]


def sample_frames(stack: FocalStack, k: int, policy: str, rng=None) -> FocalStack:
    """Select k frames; the result keeps ascending focal order and, when the
    masking protocol is on, a validity mask recomputed for the reduced span."""
    n = stack.num_frames
    if not 2 <= k <= n:
        raise ShapeError(f"cannot sample {k} frames from a stack of {n}")
    if policy == "equidistant":
        idx = equidistant_indices(n, k)
    elif policy == "random":
        if rng is None:
            raise ConfigError("random frame sampling needs an rng")
        idx = np.sort(rng.choice(n, size=k, replace=False))
    else:
        raise ConfigError(f"unknown sampling policy {policy!r}")
    return stack.subset(idx)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def multi_scale_loss(preds, focal_distances, gt_depth, mask=None, alphas=None):
    """Deeply supervised loss: upsample each probability volume to full
    resolution, regress depth, and combine the masked smooth-L1 terms with
    the (renormalized) alpha weights.

    ``focal_distances`` may be [N] or per-sample [B, N].
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    if gt.ndim != 3:
        raise ShapeError(f"gt depth must be [B, H, W], got {gt.shape}")
    if alphas is None:
        total = sum(DEFAULT_ALPHAS[:len(preds)])
        alphas = tuple(a / total for a in DEFAULT_ALPHAS[:len(preds)])
    if len(alphas) != len(preds):
        raise ShapeError(f"{len(preds)} predictions but {len(alphas)} weights")
    gt_t = Tensor(gt)
    mask_t = Tensor(np.asarray(mask, dtype=np.float64)) if mask is not None else None
    out_hw = gt.shape[-2:]
    loss = None
    for pv, a in zip(preds, alphas):
        up = upsample_probability(pv, out_hw)
        depth = regress_depth(up, focal_distances)
        term = ad.mul(ad.smooth_l1(depth, gt_t, mask_t), Tensor(float(a)))
        loss = term if loss is None else ad.add(loss, term)
    return loss


# ---------------------------------------------------------------------------
# dataset access and augmentation
# ---------------------------------------------------------------------------


class SampleSet:
    """Manifest-backed dataset with an in-memory sample cache."""

    def __init__(self, data_dir):
        self.data_dir = data_dir
        self.manifest = read_manifest(data_dir)
        self.ids = self.manifest["samples"]
        self._cache: dict = {}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i: int) -> FocalStack:
        if i not in self._cache:
            self._cache[i] = read_sample(self.data_dir, self.ids[i])
        return self._cache[i]

    @property
    def num_frames(self) -> int:
        return int(self.manifest["num_frames"])


def augment_sample(stack: FocalStack, cfg: TrainConfig, rng):
    """Random crop plus random horizontal/vertical flips, applied identically
    to every frame, the gt map, and the validity mask."""
    frames = stack.frames
    gt = stack.gt_depth
    mask = stack.valid_mask if (cfg.mask_out_of_range and stack.valid_mask is not None) \
        else np.ones_like(gt)
    h, w = gt.shape
    c = min(cfg.crop, h, w)
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    frames = frames[:, :, y0:y0 + c, x0:x0 + c]
    gt = gt[y0:y0 + c, x0:x0 + c]
    mask = mask[y0:y0 + c, x0:x0 + c]
    if cfg.flip_augment:
        if rng.random() < 0.5:
            frames = frames[:, :, :, ::-1]
            gt = gt[:, ::-1]
            mask = mask[:, ::-1]
        if rng.random() < 0.5:
            frames = frames[:, :, ::-1, :]
            gt = gt[::-1, :]
            mask = mask[::-1, :]
    return np.ascontiguousarray(frames), np.ascontiguousarray(gt), \
        np.ascontiguousarray(mask)


def _prepare(ds: SampleSet, index: int, epoch: int, cfg: TrainConfig):
    rng = np.random.default_rng((cfg.seed, index, epoch))
    sub = sample_frames(ds[index], cfg.frames_per_stack, "random", rng)
    frames, gt, mask = augment_sample(sub, cfg, rng)
    return frames, gt, mask, sub.focal_distances


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"DFVDEPTH-CKPT\n"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume/repeat evaluation."""

    net_cfg: NetworkConfig
    train_cfg: dict
    epoch: int
    params: dict                      # name -> float64 array
    stats: dict                       # name -> float64 array (running buffers)
    adam_step_count: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, net: DFVNet, cfg: TrainConfig, optimizer: AdamState = None,
                   epoch: int = 0) -> "Checkpoint":
        params = {n: p.data.copy() for n, p in net.named_parameters()}
        stats = {}
        for n, s in net.named_running_stats():
            stats[n + ".mean"] = s.mean.copy()
            stats[n + ".var"] = s.var.copy()
        adam_m, adam_v, step_count = {}, {}, 0
        if optimizer is not None and optimizer.m:
            names = [n for n, _ in net.named_parameters()]
            adam_m = {n: m.copy() for n, m in zip(names, optimizer.m)}
            adam_v = {n: v.copy() for n, v in zip(names, optimizer.v)}
            step_count = optimizer.step
        rng_state = {"scheme": "per-sample(seed,index,epoch)",
                     "seed": cfg.seed, "epochs_completed": epoch}
        return cls(net_cfg=net.cfg, train_cfg=cfg.to_dict(), epoch=epoch,
                   params=params, stats=stats, adam_step_count=step_count,
                   adam_m=adam_m, adam_v=adam_v, rng_state=rng_state)

    def save(self, path) -> None:
        entries = []
        blobs = []
        for kind, table in (("param", self.params), ("stat", self.stats),
                            ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name, arr in table.items():
                arr = np.asarray(arr, dtype=np.float64)
                entries.append({"kind": kind, "name": name,
                                "shape": list(arr.shape)})
                blobs.append(arr.astype("<f8").tobytes())
        header = {
            "format_version": _CKPT_VERSION,
            "network_config": self.net_cfg.to_dict(),
            "train_config": self.train_cfg,
            "epoch": self.epoch,
            "adam_step": self.adam_step_count,
            "rng_state": self.rng_state,
            "entries": entries,
        }
        payload = json.dumps(header, sort_keys=True).encode("utf-8")
        try:
            with open(path, "wb") as f:
                f.write(_CKPT_MAGIC)
                f.write(struct.pack("<IQ", _CKPT_VERSION, len(payload)))
                f.write(payload)
                for blob in blobs:
                    f.write(blob)
        except OSError as e:
            raise DataIOError(f"failed writing checkpoint {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, "rb") as f:
                magic = f.read(len(_CKPT_MAGIC))
                if magic != _CKPT_MAGIC:
                    raise DataIOError(f"{path}: not a checkpoint file")
                version, hlen = struct.unpack("<IQ", f.read(12))
                if version != _CKPT_VERSION:
                    raise CompatibilityError(
                        f"{path}: checkpoint format v{version}, expected v{_CKPT_VERSION}")
                header = json.loads(f.read(hlen).decode("utf-8"))
                tables = {"param": {}, "stat": {}, "adam_m": {}, "adam_v": {}}
                for entry in header["entries"]:
                    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
                    buf = f.read(count * 8)
                    arr = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
                    tables[entry["kind"]][entry["name"]] = arr
        except OSError as e:
            raise DataIOError(f"failed reading checkpoint {path}: {e}") from e
        return cls(net_cfg=NetworkConfig(**header["network_config"]),
                   train_cfg=header["train_config"],
                   epoch=header["epoch"],
                   params=tables["param"], stats=tables["stat"],
                   adam_step_count=header["adam_step"],
                   adam_m=tables["adam_m"], adam_v=tables["adam_v"],
                   rng_state=header["rng_state"])

    def apply_to(self, net: DFVNet) -> None:
        """Copy stored buffers into a model; shape or name disagreements name
        the first incompatible parameter."""
        for name, p in net.named_parameters():
            if name not in self.params:
                raise CompatibilityError(f"checkpoint is missing parameter {name}")
            if tuple(self.params[name].shape) != p.data.shape:
                raise CompatibilityError(
                    f"parameter {name}: checkpoint shape "
                    f"{tuple(self.params[name].shape)} != model shape {p.data.shape}")
            p.data[...] = self.params[name]
        for name, s in net.named_running_stats():
            for suffix, target in ((".mean", s.mean), (".var", s.var)):
                key = name + suffix
                if key not in self.stats:
                    raise CompatibilityError(f"checkpoint is missing buffer {key}")
                target[...] = self.stats[key]

    def build_model(self) -> DFVNet:
        net = DFVNet(self.net_cfg, seed=0)
        self.apply_to(net)
        return net

    def make_optimizer(self, net: DFVNet) -> AdamState:
        tc = self.train_cfg
        state = AdamState(lr=tc["lr"], beta1=tc["beta1"], beta2=tc["beta2"])
        if self.adam_m:
            names = [n for n, _ in net.named_parameters()]
            state.m = [self.adam_m[n].copy() for n in names]
            state.v = [self.adam_v[n].copy() for n in names]
            state.step = self.adam_step_count
        return state


# ---------------------------------------------------------------------------
# evaluation loop
# ---------------------------------------------------------------------------


def predict_stack(net: DFVNet, stack: FocalStack) -> DepthResult:
    """Eval-mode depth/uncertainty/frame-id for one stack (level-1 output)."""
    net.eval()
    with no_grad():
        outs = net.forward(stack.frames[None])
        h, w = stack.frames.shape[-2:]
        up = upsample_probability(outs[0], (h, w))
    p = up.data
    result = DepthResult(depth=regress_depth(p, stack.focal_distances)[0],
                         unc=uncertainty(p, stack.focal_distances)[0],
                         frame_id=regress_frame_id(p)[0])
    result.validate(stack.focal_distances)
    return result


def evaluate_model(net: DFVNet, data_dir, frames: int = None,
                   policy: str = "equidistant", mask_out_of_range: bool = True,
                   limit: int = None, seed: int = 0):
    """Score a model over a dataset; returns (per-sample records, aggregate)."""
    ds = SampleSet(data_dir)
    count = len(ds) if limit is None else min(limit, len(ds))
    records = []
    for i in range(count):
        stack = ds[i]
        k = stack.num_frames if frames is None else frames
        if k < stack.num_frames or policy == "random":
            rng = np.random.default_rng((seed, i, 0)) if policy == "random" else None
            stack = sample_frames(stack, k, policy, rng)
        result = predict_stack(net, stack)
        mask = stack.valid_mask if (mask_out_of_range and stack.valid_mask is not None) \
            else None
        result.metrics = evaluate(result.depth, stack.gt_depth, mask, result.unc)
        records.append(result.metrics)
    return records, aggregate_records(records)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batched(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def train(data_dir, cfg: TrainConfig, net_cfg: NetworkConfig, out_dir=None,
          val_dir=None, log_every: int = 1):
    """Train a model on a synthesized dataset.

    Returns (model, checkpoint, history). ``history`` holds one JSON-ready
    dict per logged step plus one validation entry per epoch; when ``out_dir``
    is given the checkpoint and the JSON-lines log land there.
    """
    ds = SampleSet(data_dir)
    if cfg.frames_per_stack > ds.num_frames:
        raise ConfigError(
            f"frames_per_stack {cfg.frames_per_stack} exceeds dataset stacks "
            f"of {ds.num_frames} frames")
    weights = cfg.loss_weights(net_cfg.num_scales)
    net = DFVNet(net_cfg, seed=cfg.seed)
    optimizer = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    params = net.parameters()
    history = []
    t0 = time.time()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            (cfg.seed, _SHUFFLE_STREAM, epoch)).permutation(len(ds))
        net.train()
        for batch in _batched(order, cfg.batch_size):
            samples = [_prepare(ds, int(i), epoch, cfg) for i in batch]
            frames = np.stack([s[0] for s in samples])
            gts = np.stack([s[1] for s in samples])
            masks = np.stack([s[2] for s in samples])
            ls = np.stack([s[3] for s in samples])
            try:
                outs = net.forward(frames)
                loss = multi_scale_loss(outs, ls, gts, masks, alphas=weights)
            except NumericError as e:
                raise NumericError(
                    f"training diverged at epoch {epoch} step {step}: {e}") from e
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"training diverged at epoch {epoch} step {step}: "
                    f"loss={loss_val}")
            net.zero_grad()
            backward(loss)
            adam_step(params, optimizer)
            if step % log_every == 0:
                history.append({"type": "train", "epoch": epoch, "step": step,
                                "loss": loss_val, "lr": cfg.lr,
                                "wall_time": time.time() - t0})
            step += 1
        if cfg.val_limit > 0:
            val_source = val_dir if val_dir is not None else data_dir
            _, agg = evaluate_model(net, val_source, frames=cfg.frames_per_stack,
                                    policy="equidistant",
                                    mask_out_of_range=cfg.mask_out_of_range,
                                    limit=cfg.val_limit)
            entry = {"type": "val", "epoch": epoch, "step": step,
                     "wall_time": time.time() - t0}
            entry.update(agg.to_dict())
            history.append(entry)
            net.train()
    ckpt = Checkpoint.from_model(net, cfg, optimizer, epoch=cfg.epochs)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt.save(os.path.join(out_dir, "checkpoint.dfv"))
        with open(os.path.join(out_dir, "train_log.jsonl"), "w") as f:
            for entry in history:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    return net, ckpt, history


def ablate_stack_size(data_dir, cfg: TrainConfig, net_cfg: NetworkConfig,
                      k_list, val_dir=None):
    """Train and evaluate one model per stack size k; returns [(k, record)].

    Every run shares the configured seed, mirroring the frame-count study the
    harness reproduces at desk scale.
    """
    ds = SampleSet(data_dir)
    if max(k_list) > ds.num_frames:
        raise ConfigError(
            f"k_list needs stacks with >= {max(k_list)} frames, dataset has "
            f"{ds.num_frames}")
    rows = []
    for k in k_list:
        cfg_k = replace(cfg, frames_per_stack=int(k))
        net, _, _ = train(data_dir, cfg_k, net_cfg, out_dir=None, val_dir=val_dir)
        _, agg = evaluate_model(net, val_dir if val_dir is not None else data_dir,
                                frames=int(k), policy="equidistant",
                                mask_out_of_range=cfg.mask_out_of_range)
        rows.append((int(k), agg))
    return rows
