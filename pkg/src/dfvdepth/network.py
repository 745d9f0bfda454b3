"""Multi-scale focus-probability network.

A shared 2D residual encoder (FPN topology, width configurable) turns every
frame into features at 1/4, 1/8, 1/16 and 1/32 resolution. Per scale, the
per-frame features are stacked into a focus volume, optionally differenced
frame-wise, aggregated by 3D residual blocks (with 3D pyramid pooling on the
largest scales), and decoded by a two-layer 3D head whose output is softmaxed
over the frame axis. Coarser aggregated volumes are upsampled, projected by a
1x1x1 convolution, and added into the next finer level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import ConfigError, ShapeError
from .focus import FocusVolume, build_focus_volume, differentiate_volume
from .optics import FocalStack


@dataclass
class NetworkConfig:
    base_width: int = 8          # channels at the finest (1/4) scale
    num_scales: int = 4          # how many of the largest scales get volumes/heads
    use_dfv: bool = True         # frame-difference the volumes (False = plain FV)
    use_spp_2d: bool = True
    spp3d_levels: int = 2        # how many of the largest scales get 3D SPP
    input_channels: int = 3

    def __post_init__(self):
        if self.num_scales not in (1, 2, 3, 4):
            raise ConfigError(f"num_scales must be in 1..4, got {self.num_scales}")
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if not 0 <= self.spp3d_levels <= self.num_scales:
            raise ConfigError(
                f"spp3d_levels ({self.spp3d_levels}) must not exceed num_scales "
                f"({self.num_scales})")
        if self.input_channels not in (1, 3):
            raise ConfigError("input_channels must be 1 or 3")

    def with_scales(self, k: int) -> "NetworkConfig":
        """Copy with ``k`` scales and the SPP level count clamped to match."""
        return replace(self, num_scales=k, spp3d_levels=min(self.spp3d_levels, k))

    def to_dict(self):
        return {
            "base_width": self.base_width,
            "num_scales": self.num_scales,
            "use_dfv": self.use_dfv,
            "use_spp_2d": self.use_spp_2d,
            "spp3d_levels": self.spp3d_levels,
            "input_channels": self.input_channels,
        }


@dataclass
class ProbabilityVolume:
    """Per-pixel distribution over frames at one scale (B x N x H_s x W_s)."""

    data: Tensor
    scale: int  # downsampling factor relative to the input resolution

    def validate(self, tol: float = 1e-5) -> None:
        d = self.data.data
        if d.min() < -tol or d.max() > 1.0 + tol:
            raise ShapeError("probability volume entries must lie in [0,1]")
        sums = d.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > tol:
            raise ShapeError("probability volume pixels must sum to 1 over frames")


# ---------------------------------------------------------------------------
# minimal module system
# ---------------------------------------------------------------------------


class Module:
    """Parameter/buffer container with train/eval state, like the usual idiom."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_stats", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, RunningStats):
            self._stats[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for n, p in self._params.items():
            yield prefix + n, p
        for n, c in self._children.items():
            yield from c.named_parameters(prefix + n + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_running_stats(self, prefix: str = ""):
        for n, s in self._stats.items():
            yield prefix + n, s
        for n, c in self._children.items():
            yield from c.named_running_stats(prefix + n + ".")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._list)), module)
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def __len__(self):
        return len(self._list)


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=None, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=None, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(_kaiming(rng, (cout, cin, k, k, k), cin * k ** 3),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, epsilon=1e-5):
        super().__init__()
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = RunningStats(channels)

    def forward(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.stats,
                             training=self.training, channel_axis=1,
                             momentum=self.momentum, epsilon=self.epsilon)


class ConvBnRelu2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, k, stride, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


class ConvBnRelu3d(Module):
    def __init__(self, rng, cin, cout, k, stride=1):
        super().__init__()
        self.conv = Conv3d(rng, cin, cout, k, stride, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


class ResBlock2d(Module):
    def __init__(self, rng, cin, cout, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, cin, cout, 3, stride, bias=False)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1, bias=False)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.short_conv = Conv2d(rng, cin, cout, 1, stride, padding=0, bias=False)
            self.short_bn = BatchNorm(cout)
        else:
            self.short_conv = None

    def forward(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.short_bn(self.short_conv(x)) if self.short_conv else x
        return ad.relu(ad.add(h, skip))


class ResBlock3d(Module):
    def __init__(self, rng, channels):
        super().__init__()
        self.conv1 = Conv3d(rng, channels, channels, 3, bias=False)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv3d(rng, channels, channels, 3, bias=False)
        self.bn2 = BatchNorm(channels)

    def forward(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return ad.relu(ad.add(h, x))


def spp_scales(dims) -> list:
    """Pooling scale list: floor of four values linearly sampled from 1 to
    floor(min(dims)/2), deduplicated (ascending)."""
    m_max = max(1, min(dims) // 2)
    return sorted({int(np.floor(v)) for v in np.linspace(1.0, float(m_max), 4)})


def _spp_branches(x: Tensor, dims) -> Tensor:
    """Average of pooled-and-upsampled context maps over the scale list."""
    scales = spp_scales(dims)
    acc = None
    for m in scales:
        kernel = tuple(max(1, d // m) for d in dims)
        pooled = ad.avg_pool(x, kernel)
        up = ad.upsample_linear(pooled, dims)
        acc = up if acc is None else ad.add(acc, up)
    return ad.mul(acc, Tensor(1.0 / len(scales)))


class SPP2d(Module):
    """Pyramid context over (H, W), projected by a 1x1 conv and added back.

    The projected-sum fusion (instead of concatenation) keeps the weight
    shapes independent of the pooling-scale count, which changes with input
    size once the scale list deduplicates.
    """

    def __init__(self, rng, channels):
        super().__init__()
        self.proj = Conv2d(rng, channels, channels, 1, padding=0)

    def forward(self, x):
        ctx = _spp_branches(x, x.shape[-2:])
        return ad.add(x, self.proj(ctx))


class SPP3d(Module):
    """Pyramid context over (N, H, W); same fusion as SPP2d."""

    def __init__(self, rng, channels):
        super().__init__()
        self.proj = Conv3d(rng, channels, channels, 1, padding=0)

    def forward(self, x):
        ctx = _spp_branches(x, x.shape[-3:])
        return ad.add(x, self.proj(ctx))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class Encoder2d(Module):
    """Stem + 4 residual stages + optional SPP, decoded FPN-style into four
    feature maps at 1/4 .. 1/32 resolution with widths w, 2w, 4w, 8w."""

    def __init__(self, rng, cfg: NetworkConfig):
        super().__init__()
        w = cfg.base_width
        self.widths = [w, 2 * w, 4 * w, 8 * w]
        self.stem = ConvBnRelu2d(rng, cfg.input_channels, w, 7, stride=2)
        self.stage1 = ResBlock2d(rng, w, w, stride=2)
        self.stage2 = ResBlock2d(rng, w, 2 * w, stride=2)
        self.stage3 = ResBlock2d(rng, 2 * w, 4 * w, stride=2)
        self.stage4 = ResBlock2d(rng, 4 * w, 8 * w, stride=2)
        self.spp = SPP2d(rng, 8 * w) if cfg.use_spp_2d else None
        self.smooth4 = ConvBnRelu2d(rng, 8 * w, 8 * w, 3)
        self.laterals = ModuleList(
            [Conv2d(rng, c, c, 1, padding=0) for c in self.widths[:3]])
        self.topdowns = ModuleList(
            [Conv2d(rng, self.widths[i + 1], self.widths[i], 1, padding=0)
             for i in range(3)])
        self.smooths = ModuleList(
            [ConvBnRelu2d(rng, c, c, 3) for c in self.widths[:3]])

    def forward(self, frames: Tensor):
        h = self.stem(frames)
        s1 = self.stage1(h)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        if self.spp is not None:
            s4 = self.spp(s4)
        feats = [None, None, None, self.smooth4(s4)]
        stages = [s1, s2, s3]
        for i in (2, 1, 0):
            up = ad.upsample_linear(feats[i + 1], stages[i].shape[-2:])
            fused = ad.add(self.laterals[i](stages[i]), self.topdowns[i](up))
            feats[i] = self.smooths[i](fused)
        return feats


# ---------------------------------------------------------------------------
# per-scale 3D aggregation
# ---------------------------------------------------------------------------


class ScaleAggregator(Module):
    """3D residual aggregation plus the probability head for one scale."""

    def __init__(self, rng, channels, carry_channels=None, use_spp=False):
        super().__init__()
        self.carry_proj = (Conv3d(rng, carry_channels, channels, 1, padding=0)
                           if carry_channels else None)
        self.res1 = ResBlock3d(rng, channels)
        self.res2 = ResBlock3d(rng, channels)
        self.spp = SPP3d(rng, channels) if use_spp else None
        self.head_conv = ConvBnRelu3d(rng, channels, channels, 3)
        self.head_proj = Conv3d(rng, channels, 1, 1, padding=0)

    def forward(self, volume: Tensor, carry: Tensor = None):
        x = volume
        if carry is not None:
            if self.carry_proj is None:
                raise ShapeError("aggregator got a carry volume but has no projection")
            up = ad.upsample_linear(carry, x.shape[-3:])
            x = ad.add(x, self.carry_proj(up))
        x = self.res2(self.res1(x))
        if self.spp is not None:
            x = self.spp(x)
        logits = self.head_proj(self.head_conv(x))     # B x 1 x N x H x W
        b, _, n, hh, ww = logits.shape
        probs = ad.softmax(ad.reshape(logits, (b, n, hh, ww)), axis=1)
        return probs, x


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------


class DFVNet(Module):
    """Focus-probability network over focal stacks.

    ``forward`` takes frames as a [B, N, C, H, W] array (C may be 1; it is
    tiled when the config expects 3 channels) and returns one probability
    volume per configured scale, finest first.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder2d(rng, cfg)
        widths = self.encoder.widths
        aggs = []
        for s in range(cfg.num_scales):
            carry_ch = widths[s + 1] if s + 1 < cfg.num_scales else None
            aggs.append(ScaleAggregator(rng, widths[s], carry_ch,
                                        use_spp=s < cfg.spp3d_levels))
        self.aggregators = ModuleList(aggs)

    # -- pieces -------------------------------------------------------------

    def encode(self, frames: Tensor):
        """Shared per-frame encoding; frames are folded into the batch axis."""
        if frames.shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"encoder expects {self.cfg.input_channels} channels, "
                f"got {frames.shape[1]}")
        return self.encoder(frames)

    def build_volumes(self, feats, batch: int, num_frames: int):
        """Per-scale focus volumes (differenced when the DFV variant is on)."""
        volumes = []
        for s in range(self.cfg.num_scales):
            per_frame = [feats[s][n::num_frames] for n in range(num_frames)]
            fv = build_focus_volume(per_frame, scale=4 * 2 ** s)
            if self.cfg.use_dfv:
                fv = differentiate_volume(fv)
            volumes.append(fv)
        return volumes

    def aggregate_and_predict(self, volumes):
        """Coarse-to-fine 3D aggregation; one probability volume per scale."""
        n_frames = volumes[0].num_frames
        for v in volumes:
            if v.num_frames != n_frames:
                raise ShapeError(
                    f"volumes disagree on frame count: {v.num_frames} vs {n_frames}")
        outputs = [None] * len(volumes)
        carry = None
        for s in range(len(volumes) - 1, -1, -1):
            probs, carry = self.aggregators[s](volumes[s].data, carry)
            outputs[s] = ProbabilityVolume(data=probs, scale=volumes[s].scale)
        return outputs

    # -- end to end ----------------------------------------------------------

    def forward(self, frames: np.ndarray):
        arr = np.asarray(frames, dtype=np.float64)
        if arr.ndim != 5:
            raise ShapeError(f"expected frames [B, N, C, H, W], got {arr.shape}")
        b, n, c, h, w = arr.shape
        if n < 2:
            raise ShapeError(f"need at least 2 frames, got {n}")
        if c == 1 and self.cfg.input_channels == 3:
            arr = np.repeat(arr, 3, axis=2)
            c = 3
        if c != self.cfg.input_channels:
            raise ShapeError(
                f"stack has {c} channels but the network expects "
                f"{self.cfg.input_channels}")
        hp = -h % 32
        wp = -w % 32
        if hp or wp:
            arr = np.pad(arr, ((0, 0), (0, 0), (0, 0), (0, hp), (0, wp)))
        folded = Tensor(arr.reshape(b * n, c, h + hp, w + wp))
        feats = self.encode(folded)
        volumes = self.build_volumes(feats, b, n)
        return self.aggregate_and_predict(volumes)

    def forward_stack(self, stack: FocalStack):
        """Convenience single-stack forward."""
        return self.forward(stack.frames[None])


def upsample_probability(pv: ProbabilityVolume, out_hw) -> Tensor:
    """Bring a probability volume to full resolution (B x N x H x W).

    The network was run on inputs padded to a multiple of 32, so upsample by
    the stored scale factor first and crop back to the requested size.
    """
    h, w = out_hw
    hs, ws = pv.data.shape[-2:]
    up = ad.upsample_linear(pv.data, (hs * pv.scale, ws * pv.scale))
    if up.shape[-2:] != (h, w):
        up = up[:, :, :h, :w]
    return up


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())
