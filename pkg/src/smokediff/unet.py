"""Conditional noise-prediction U-Net.

Input is the channel-concatenation of the noisy velocity pair and the two
condition channels. Every section applies two residual conv blocks
(3x3 conv -> group norm -> SiLU, with a 1x1 shortcut on channel changes),
adds a per-channel projection of the sinusoidal step embedding, optionally
runs single-head self-attention over flattened positions, and resamples by a
stride-2 conv (down) or stride-2 transposed conv (up). The bottleneck is a
residual/attention/residual sandwich; up sections concatenate the matching
down section's output as a skip.

Parameters live in a flat name -> Tensor mapping whose order and values are
a pure function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smokediff import tensor as T
from smokediff.ddpm import ConditionTensor, NoiseSchedule, sinusoidal_embed
from smokediff.rng import Rng

TIME_INPUT_MODES = ("integer", "normalized")


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 2
    base_channels: int = 16
    channel_mult: tuple = (1, 2)
    groups: int = 8
    time_embed_dim: int = 32
    attention_levels: tuple = ()
    in_channels: int = 4
    out_channels: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.channel_mult) != self.levels:
            raise ValueError(
                f"channel_mult has {len(self.channel_mult)} entries for {self.levels} levels"
            )
        if self.base_channels % self.groups != 0:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}"
            )
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if any(lv < 0 or lv >= self.levels for lv in self.attention_levels):
            raise ValueError(f"attention_levels out of range: {self.attention_levels}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]


def _res_entries(prefix: str, c_in: int, c_out: int):
    yield f"{prefix}.conv.w", "conv", (c_out, c_in, 3, 3)
    yield f"{prefix}.conv.b", "zeros", (c_out,)
    yield f"{prefix}.norm.gamma", "ones", (c_out,)
    yield f"{prefix}.norm.beta", "zeros", (c_out,)
    if c_in != c_out:
        yield f"{prefix}.shortcut.w", "conv", (c_out, c_in, 1, 1)
        yield f"{prefix}.shortcut.b", "zeros", (c_out,)


def _temb_entries(prefix: str, d: int, c: int):
    yield f"{prefix}.l1.w", "linear", (c, d)
    yield f"{prefix}.l1.b", "zeros", (c,)
    yield f"{prefix}.l2.w", "linear", (c, c)
    yield f"{prefix}.l2.b", "zeros", (c,)


def _attn_entries(prefix: str, c: int):
    for name in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{name}", "linear", (c, c)


def param_plan(config: UNetConfig):
    """Ordered (name, init_kind, shape) triples; the single source of truth
    for build_unet and count_params."""
    ch = config.channels
    d = config.time_embed_dim
    for i in range(config.levels):
        c_in = config.in_channels if i == 0 else ch[i - 1]
        yield from _res_entries(f"down{i}.res1", c_in, ch[i])
        yield from _res_entries(f"down{i}.res2", ch[i], ch[i])
        yield from _temb_entries(f"down{i}.temb", d, ch[i])
        if i in config.attention_levels:
            yield from _attn_entries(f"down{i}.attn", ch[i])
        yield f"down{i}.down.w", "conv", (ch[i], ch[i], 3, 3)
        yield f"down{i}.down.b", "zeros", (ch[i],)
    c_mid = ch[-1]
    yield from _res_entries("mid.res1", c_mid, c_mid)
    yield from _temb_entries("mid.temb", d, c_mid)
    yield from _attn_entries("mid.attn", c_mid)
    yield from _res_entries("mid.res2", c_mid, c_mid)
    for i in range(config.levels - 1, -1, -1):
        c_from = c_mid if i == config.levels - 1 else ch[i + 1]
        yield f"up{i}.up.w", "conv_t", (c_from, ch[i], 3, 3)
        yield f"up{i}.up.b", "zeros", (ch[i],)
        yield from _res_entries(f"up{i}.res1", 2 * ch[i], ch[i])
        yield from _res_entries(f"up{i}.res2", ch[i], ch[i])
        yield from _temb_entries(f"up{i}.temb", d, ch[i])
        if i in config.attention_levels:
            yield from _attn_entries(f"up{i}.attn", ch[i])
    yield "out.w", "conv", (config.out_channels, ch[0], 3, 3)
    yield "out.b", "zeros", (config.out_channels,)


def count_params(config: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in param_plan(config))


def build_unet(config: UNetConfig, seed: int, dtype=np.float32) -> dict[str, T.Tensor]:
    """Allocate and initialize all parameters deterministically from seed.

    Weights are fan-in Kaiming normals; biases and norm shifts start at zero,
    norm scales at one.
    """
    rng = Rng(seed)
    params: dict[str, T.Tensor] = {}
    for name, kind, shape in param_plan(config):
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            if kind == "conv":
                fan_in = int(np.prod(shape[1:]))
            elif kind == "conv_t":
                fan_in = shape[0] * shape[2] * shape[3]
            else:  # linear
                fan_in = shape[1]
            data = rng.normal(shape) * np.sqrt(2.0 / fan_in)
            if name == "out.w":
                # damp the output head so initial predictions start near zero;
                # a full-scale random head dominates the early loss
                data *= 1e-2
        params[name] = T.Tensor(data.astype(dtype), requires_grad=True)
    return params


def _res_block(x, params, prefix, groups):
    h = T.conv2d(x, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"], stride=1, padding=1)
    h = T.group_norm(h, groups, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
    h = T.silu(h)
    if f"{prefix}.shortcut.w" in params:
        sc = T.conv2d(x, params[f"{prefix}.shortcut.w"], params[f"{prefix}.shortcut.b"])
    else:
        sc = x
    return T.add(h, sc)


def _time_inject(x, params, prefix, temb):
    h = T.linear(temb, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"])
    h = T.silu(h)
    h = T.linear(h, params[f"{prefix}.l2.w"], params[f"{prefix}.l2.b"])
    c = h.shape[0]
    return T.add(x, T.reshape(h, (c, 1, 1)))


def _attn_block(x, params, prefix):
    c, h, w = x.shape
    flat = T.reshape(x, (c, h * w))
    out = T.self_attention(
        flat, params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"], params[f"{prefix}.wo"]
    )
    return T.reshape(out, (c, h, w))


def denoise(
    params: dict[str, T.Tensor],
    config: UNetConfig,
    xt,
    t: int,
    y: ConditionTensor,
    sched: NoiseSchedule,
    time_input: str = "integer",
) -> T.Tensor:
    """Predict the noise on xt given condition y and step t. Differentiable."""
    if time_input not in TIME_INPUT_MODES:
        raise ValueError(f"time_input must be one of {TIME_INPUT_MODES}")
    xt = T.as_tensor(xt)
    dtype = next(iter(params.values())).dtype
    h, w = xt.shape[1], xt.shape[2]
    div = 1 << config.levels
    if h % div or w % div:
        raise ValueError(f"grid extent {h}x{w} not divisible by 2^levels = {div}")
    s = float(t) if time_input == "integer" else float(t) / sched.T
    temb = T.Tensor(sinusoidal_embed(s, config.time_embed_dim).astype(dtype))
    cond = T.Tensor(np.asarray(y.channels, dtype=dtype))
    x = T.concat_channels(xt, cond)

    groups = config.groups
    skips = []
    for i in range(config.levels):
        x = _res_block(x, params, f"down{i}.res1", groups)
        x = _res_block(x, params, f"down{i}.res2", groups)
        x = _time_inject(x, params, f"down{i}.temb", temb)
        if i in config.attention_levels:
            x = _attn_block(x, params, f"down{i}.attn")
        x.check_finite(f"down{i}")
        skips.append(x)
        x = T.conv2d(x, params[f"down{i}.down.w"], params[f"down{i}.down.b"], stride=2, padding=1)

    x = _res_block(x, params, "mid.res1", groups)
    x = _time_inject(x, params, "mid.temb", temb)
    x = _attn_block(x, params, "mid.attn")
    x = _res_block(x, params, "mid.res2", groups)
    x.check_finite("mid")

    for i in range(config.levels - 1, -1, -1):
        target = (skips[i].shape[1], skips[i].shape[2])
        x = T.conv2d_transpose(
            x, params[f"up{i}.up.w"], params[f"up{i}.up.b"], stride=2, padding=1, output_size=target
        )
        x = T.concat_channels(skips[i], x)
        x = _res_block(x, params, f"up{i}.res1", groups)
        x = _res_block(x, params, f"up{i}.res2", groups)
        x = _time_inject(x, params, f"up{i}.temb", temb)
        if i in config.attention_levels:
            x = _attn_block(x, params, f"up{i}.attn")
        x.check_finite(f"up{i}")

    out = T.conv2d(x, params["out.w"], params["out.b"], stride=1, padding=1)
    return out.check_finite("out")


class UNet:
    """Bundles (config, params, schedule, time-input mode) behind a callable."""

    def __init__(self, config: UNetConfig, params: dict, sched: NoiseSchedule, time_input: str = "integer"):
        self.config = config
        self.params = params
        self.sched = sched
        self.time_input = time_input

    @classmethod
    def build(cls, config: UNetConfig, seed: int, sched: NoiseSchedule, time_input: str = "integer", dtype=np.float32):
        return cls(config, build_unet(config, seed, dtype=dtype), sched, time_input)

    def __call__(self, xt, t: int, y: ConditionTensor) -> T.Tensor:
        return denoise(self.params, self.config, xt, t, y, self.sched, self.time_input)

    def predictor(self):
        """Inference-only closure for the ancestral sampler: arrays in, arrays out."""

        def fn(xt: np.ndarray, t: int, y: ConditionTensor) -> np.ndarray:
            dtype = next(iter(self.params.values())).dtype
            with T.no_grad():
                return self(xt.astype(dtype), t, y).data
        return fn
