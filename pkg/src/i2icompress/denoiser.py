"""Conditional U-Net noise predictor with indexed skip-connection depths.

Depth levels are numbered 1..d_max from shallow to deep. Level ``d`` (for
``d < d_max``) owns encoder block ``d`` and its mirrored decoder block; level
``d_max`` owns the middle block. The stem, time MLP and output convolution
always run and are attributed to level 1.

Parameter names (the checkpoint contract)::

    time.fc1.{weight,bias}  time.fc2.{weight,bias}
    stem.conv.{weight,bias}
    enc.L<l>.B<b>.{conv1,temb,conv2,skip}.{weight,bias}
    mid.{conv1,temb,conv2}.{weight,bias}
    dec.L<l>.B<b>.{conv1,temb,conv2,skip}.{weight,bias}
    out.conv.{weight,bias}

``skip`` is a 1x1 convolution present only where a block changes channel
count or resolution. With ``active_depth = d < d_max`` the middle block and
encoder/decoder blocks deeper than ``d`` are not executed; decoder block ``d``
receives the level-``d`` skip tensor repeated cyclically along channels in
place of the missing deeper features.
"""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    conv2d,
    get_dtype,
    linear,
    reshape,
    silu,
    slice_channels,
    stream,
    upsample2x,
)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    cond_channels: int = 3
    out_channels: int = 3
    base_channels: int = 8
    channel_mults: tuple[int, ...] = (1, 2, 4, 8)
    blocks_per_level: int = 2
    time_embed_dim: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        problems = []
        s = self.image_size
        if s < 2 or s & (s - 1):
            problems.append(f"image_size must be a power of 2 >= 2, got {s}")
        for key in ("in_channels", "cond_channels", "out_channels", "base_channels",
                    "blocks_per_level", "time_embed_dim"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be positive, got {getattr(self, key)}")
        if not self.channel_mults or min(self.channel_mults) < 1:
            problems.append(f"channel_mults must be non-empty positive integers, got {self.channel_mults}")
        elif s >= 2 and not s & (s - 1) and len(self.channel_mults) > int(math.log2(s)):
            problems.append(
                f"{len(self.channel_mults)} resolution levels exceed log2(image_size) = {int(math.log2(s))}"
            )
        if self.time_embed_dim % 2:
            problems.append(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if problems:
            raise ValueError("invalid UNetConfig: " + "; ".join(problems))

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def d_max(self) -> int:
        return self.blocks_per_level * self.levels + 1

    def level_of(self, depth: int) -> int:
        """Resolution level (1-based) of encoder/decoder block ``depth``; the middle block sits on the last level."""
        if depth >= self.d_max:
            return self.levels
        return (depth - 1) // self.blocks_per_level + 1

    def channels_at(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level - 1]

    def resolution_at(self, level: int) -> int:
        return self.image_size >> (level - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


@dataclass(frozen=True)
class BlockSpec:
    name: str
    depth: int
    in_ch: int
    out_ch: int
    stride: int
    res_in: int
    upsample_input: bool = False  # decoder only: deeper features arrive at half resolution

    @property
    def res_out(self) -> int:
        return self.res_in // self.stride

    @property
    def has_skip(self) -> bool:
        return self.in_ch != self.out_ch or self.stride != 1


def _block_name(kind: str, cfg: UNetConfig, depth: int) -> str:
    level = cfg.level_of(depth)
    b = (depth - 1) % cfg.blocks_per_level + 1
    return f"{kind}.L{level}.B{b}"


def plan_blocks(cfg: UNetConfig) -> tuple[list[BlockSpec], BlockSpec, list[BlockSpec]]:
    """Encoder blocks 1..d_max-1, the middle block, decoder blocks 1..d_max-1 (indexed by depth)."""
    enc = []
    prev = cfg.channels_at(1)
    for d in range(1, cfg.d_max):
        level = cfg.level_of(d)
        first_of_level = (d - 1) % cfg.blocks_per_level == 0
        stride = 2 if first_of_level and level > 1 else 1
        res_in = cfg.resolution_at(level) * stride
        out = cfg.channels_at(level)
        enc.append(BlockSpec(_block_name("enc", cfg, d), d, prev, out, stride, res_in))
        prev = out
    deepest = cfg.channels_at(cfg.levels)
    mid = BlockSpec("mid", cfg.d_max, deepest, deepest, 1, cfg.resolution_at(cfg.levels))
    dec = []
    for d in range(1, cfg.d_max):
        level = cfg.level_of(d)
        h_ch = deepest if d == cfg.d_max - 1 else cfg.channels_at(cfg.level_of(d + 1))
        up = d < cfg.d_max - 1 and cfg.level_of(d + 1) > level
        out = cfg.channels_at(level)
        dec.append(
            BlockSpec(_block_name("dec", cfg, d), d, h_ch + out, out, 1, cfg.resolution_at(level), up)
        )
    return enc, mid, dec


def deep_input_channels(cfg: UNetConfig, depth: int) -> int:
    """Channel count of the deeper-feature half of decoder block ``depth``'s input."""
    _, _, dec = plan_blocks(cfg)
    return dec[depth - 1].in_ch - dec[depth - 1].out_ch


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Ordered ``name -> (shape, owner depth)`` table; a pure function of the config."""
    e = cfg.time_embed_dim
    c1 = cfg.channels_at(1)
    table: dict[str, tuple[tuple[int, ...], int]] = {
        "time.fc1.weight": ((e, e), 1),
        "time.fc1.bias": ((e,), 1),
        "time.fc2.weight": ((e, e), 1),
        "time.fc2.bias": ((e,), 1),
        "stem.conv.weight": ((c1, cfg.in_channels + cfg.cond_channels, 3, 3), 1),
        "stem.conv.bias": ((c1,), 1),
    }
    enc, mid, dec = plan_blocks(cfg)
    for blk in [*enc, mid, *dec]:
        p = blk.name
        table[f"{p}.conv1.weight"] = ((blk.out_ch, blk.in_ch, 3, 3), blk.depth)
        table[f"{p}.conv1.bias"] = ((blk.out_ch,), blk.depth)
        table[f"{p}.temb.weight"] = ((blk.out_ch, e), blk.depth)
        table[f"{p}.temb.bias"] = ((blk.out_ch,), blk.depth)
        table[f"{p}.conv2.weight"] = ((blk.out_ch, blk.out_ch, 3, 3), blk.depth)
        table[f"{p}.conv2.bias"] = ((blk.out_ch,), blk.depth)
        if blk.has_skip:
            table[f"{p}.skip.weight"] = ((blk.out_ch, blk.in_ch, 1, 1), blk.depth)
            table[f"{p}.skip.bias"] = ((blk.out_ch,), blk.depth)
    table["out.conv.weight"] = ((cfg.out_channels, c1, 3, 3), 1)
    table["out.conv.bias"] = ((cfg.out_channels,), 1)
    return table


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def repeat_channels(x: Tensor, channels: int) -> Tensor:
    """Cyclic channel repetition of ``x`` truncated to ``channels``."""
    c = x.shape[1]
    reps, rem = divmod(channels, c)
    parts = [x] * reps
    if rem:
        parts.append(slice_channels(x, 0, rem))
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


def _conv_macs(blk_out: int, blk_in: int, k: int, res_out: int) -> int:
    return res_out * res_out * blk_out * blk_in * k * k


class DenoiserModel:
    """Parameters, configuration and the depth at which forward passes stop."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor], active_depth: int | None = None,
                 num_timesteps: int = 1000):
        self.config = config
        self.params = params
        self.num_timesteps = num_timesteps
        self.active_depth = config.d_max if active_depth is None else active_depth
        self.owner = {name: depth for name, (_, depth) in param_shapes(config).items()}
        self._enc, self._mid, self._dec = plan_blocks(config)
        self.invocations = 0
        self.call_log: list[tuple[int, ...]] | None = None
        self.access_log: set[str] | None = None
        if set(params) != set(self.owner):
            missing = sorted(set(self.owner) - set(params))
            extra = sorted(set(params) - set(self.owner))
            raise ValueError(f"parameter table mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        self._check_depth(self.active_depth)

    @property
    def active_depth(self) -> int:
        return self._active_depth

    @active_depth.setter
    def active_depth(self, depth: int) -> None:
        self._check_depth(depth)
        self._active_depth = int(depth)

    def _check_depth(self, depth: int) -> None:
        if not 1 <= depth <= self.config.d_max:
            raise ValueError(f"depth {depth} outside [1, {self.config.d_max}]")

    def _p(self, name: str) -> Tensor:
        if self.access_log is not None:
            self.access_log.add(name)
        return self.params[name]

    def names_up_to(self, depth: int) -> list[str]:
        return [n for n in self.params if self.owner[n] <= depth]

    def copy(self) -> "DenoiserModel":
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.dtype)
                  for n, p in self.params.items()}
        return DenoiserModel(self.config, params, self.active_depth, self.num_timesteps)

    def astype(self, dtype) -> "DenoiserModel":
        params = {n: Tensor(p.data, requires_grad=p.requires_grad, dtype=dtype) for n, p in self.params.items()}
        return DenoiserModel(self.config, params, self.active_depth, self.num_timesteps)

    def with_depth(self, depth: int) -> "DenoiserModel":
        """Shallow view sharing parameters, with a different active depth."""
        view = copy.copy(self)
        view.active_depth = depth
        return view

    def num_params(self, depth: int | None = None) -> int:
        depth = self.config.d_max if depth is None else depth
        return sum(p.size for n, p in self.params.items() if self.owner[n] <= depth)

    # ------------------------------------------------------------------ forward

    def _block(self, blk: BlockSpec, x: Tensor, temb: Tensor) -> Tensor:
        p = blk.name
        n = x.shape[0]
        h = conv2d(silu(x), self._p(f"{p}.conv1.weight"), self._p(f"{p}.conv1.bias"), blk.stride)
        tb = linear(temb, self._p(f"{p}.temb.weight"), self._p(f"{p}.temb.bias"))
        h = add(h, reshape(tb, (n, blk.out_ch, 1, 1)))
        h = conv2d(silu(h), self._p(f"{p}.conv2.weight"), self._p(f"{p}.conv2.bias"))
        if blk.has_skip:
            x = conv2d(x, self._p(f"{p}.skip.weight"), self._p(f"{p}.skip.bias"), blk.stride)
        return add(x, h)

    def _check_inputs(self, x, c, t) -> tuple[Tensor, Tensor, np.ndarray]:
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        c = c if isinstance(c, Tensor) else Tensor(c)
        s = cfg.image_size
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, s, s):
            raise ValueError(f"x_t shape {x.shape} does not match (N, {cfg.in_channels}, {s}, {s})")
        if c.data.ndim != 4 or c.shape != (x.shape[0], cfg.cond_channels, s, s):
            raise ValueError(f"condition shape {c.shape} does not match ({x.shape[0]}, {cfg.cond_channels}, {s}, {s})")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
        if (t < 0).any() or (t >= self.num_timesteps).any():
            raise ValueError(f"timestep outside [0, {self.num_timesteps - 1}]: {t.min()}..{t.max()}")
        return x, c, t

    def __call__(self, x_t, cond, t, depth: int | None = None) -> Tensor:
        return self.forward(x_t, cond, t, depth)

    def forward(self, x_t, cond, t, depth: int | None = None) -> Tensor:
        """Predict the noise in ``x_t`` (N, C, S, S) given condition and timestep(s)."""
        x, c, t = self._check_inputs(x_t, cond, t)
        d = self.active_depth if depth is None else depth
        self._check_depth(d)
        cfg = self.config
        self.invocations += x.shape[0]
        if self.call_log is not None:
            self.call_log.append(tuple(int(v) for v in t))

        feats = Tensor(timestep_features(t, cfg.time_embed_dim), dtype=x.dtype)
        temb = linear(feats, self._p("time.fc1.weight"), self._p("time.fc1.bias"))
        temb = linear(silu(temb), self._p("time.fc2.weight"), self._p("time.fc2.bias"))
        temb = silu(temb)

        h = conv2d(concat([x, c], axis=1), self._p("stem.conv.weight"), self._p("stem.conv.bias"))
        skips = []
        for blk in self._enc[: min(d, cfg.d_max - 1)]:
            h = self._block(blk, h, temb)
            skips.append(h)

        if d == cfg.d_max:
            h = self._block(self._mid, h, temb)
            start = cfg.d_max - 1
        else:
            h = repeat_channels(skips[d - 1], deep_input_channels(cfg, d))
            start = d
        for depth_i in range(start, 0, -1):
            blk = self._dec[depth_i - 1]
            if blk.upsample_input and depth_i != start:
                h = upsample2x(h)
            h = self._block(blk, concat([h, skips[depth_i - 1]], axis=1), temb)
        return conv2d(silu(h), self._p("out.conv.weight"), self._p("out.conv.bias"))


def build(config: UNetConfig, seed: int, num_timesteps: int = 1000, dtype=None) -> DenoiserModel:
    """Initialise a model: fan-in uniform weights, zero biases, zero output conv."""
    dtype = dtype or get_dtype()
    params: dict[str, Tensor] = {}
    for name, (shape, _) in param_shapes(config).items():
        if name.endswith(".bias") or name.startswith("out.conv"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            arr = stream(seed, "init", name).uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return DenoiserModel(config, params, num_timesteps=num_timesteps)


# ---------------------------------------------------------------------- profile

PROFILE_COLUMNS = ("depth", "params", "cum_params", "cum_param_fraction", "macs", "cum_macs", "cum_mac_fraction")


@dataclass
class DepthProfile:
    depths: list[int]
    params: list[int]
    macs: list[int]
    cum_param_fraction: list[float] = field(default_factory=list)
    cum_mac_fraction: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        cp, cm = np.cumsum(self.params), np.cumsum(self.macs)
        self.cum_param_fraction = [int(v) / int(cp[-1]) for v in cp]
        self.cum_mac_fraction = [int(v) / int(cm[-1]) for v in cm]

    @property
    def total_params(self) -> int:
        return int(sum(self.params))

    @property
    def total_macs(self) -> int:
        return int(sum(self.macs))

    def cum_params(self, depth: int) -> int:
        return int(sum(self.params[:depth]))

    def cum_macs(self, depth: int) -> int:
        return int(sum(self.macs[:depth]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        cp, cm = np.cumsum(self.params), np.cumsum(self.macs)
        for i, d in enumerate(self.depths):
            w.writerow([d, self.params[i], int(cp[i]), f"{self.cum_param_fraction[i]:.6f}",
                        self.macs[i], int(cm[i]), f"{self.cum_mac_fraction[i]:.6f}"])
        return buf.getvalue()


def block_macs(cfg: UNetConfig, blk: BlockSpec) -> int:
    e = cfg.time_embed_dim
    r = blk.res_out
    macs = _conv_macs(blk.out_ch, blk.in_ch, 3, r) + _conv_macs(blk.out_ch, blk.out_ch, 3, r) + e * blk.out_ch
    if blk.has_skip:
        macs += _conv_macs(blk.out_ch, blk.in_ch, 1, r)
    return macs


def depth_profile(model: DenoiserModel | UNetConfig) -> DepthProfile:
    """Per-level parameter counts and analytic multiply-accumulate counts (per image, per call)."""
    cfg = model.config if isinstance(model, DenoiserModel) else model
    shapes = param_shapes(cfg)
    params = [0] * cfg.d_max
    for shape, depth in shapes.values():
        params[depth - 1] += int(np.prod(shape))
    enc, mid, dec = plan_blocks(cfg)
    macs = [0] * cfg.d_max
    for blk in [*enc, mid, *dec]:
        macs[blk.depth - 1] += block_macs(cfg, blk)
    e, s = cfg.time_embed_dim, cfg.image_size
    macs[0] += 2 * e * e
    macs[0] += _conv_macs(cfg.channels_at(1), cfg.in_channels + cfg.cond_channels, 3, s)
    macs[0] += _conv_macs(cfg.out_channels, cfg.channels_at(1), 3, s)
    return DepthProfile(list(range(1, cfg.d_max + 1)), params, macs)
