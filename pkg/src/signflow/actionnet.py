"""Excitation gating block: three sigmoid-gated branches summed.

The block multiplies its input by data-dependent gates computed three ways
and adds the gated results:

  * ste: a spatial-temporal gate from a channel-mean map passed through a
    3x3x3 convolution over (T, H, W);
  * ce: a channel gate from spatially pooled features squeezed C -> C/r,
    convolved across time (kernel 3, zero pad), and expanded back;
  * me: a motion gate from differences between transformed consecutive
    squeezed frames.

Each branch output is bounded by |x| elementwise (pure sub-unit gating; the
additive skip lives in the enclosing residual block). The branch internals
are reconstructions consistent with the named components, not a replica of
any published network. Like the shift module, the block sits on the
residual branch of a backbone block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (Parameter, Tensor, add, concat, conv2d, conv3d, global_avg_pool,
                     matmul, mul, narrow, reshape, sigmoid, tmean, zeros_like_slice)


@dataclass(frozen=True)
class ActionConfig:
    """Channel squeeze ratio and kernel sizes for the gating branches."""

    reduce_ratio: int = 4
    temporal_kernel: int = 3

    def __post_init__(self):
        if self.reduce_ratio < 1:
            raise ConfigError(f"reduce_ratio must be positive, got {self.reduce_ratio}")
        if self.temporal_kernel % 2 != 1:
            raise ConfigError(f"temporal_kernel must be odd, got {self.temporal_kernel}")

    def squeezed(self, channels: int) -> int:
        if channels % self.reduce_ratio != 0:
            raise ConfigError(
                f"channels {channels} not divisible by reduce_ratio {self.reduce_ratio}")
        return channels // self.reduce_ratio


class ActionBlock:
    """Parameter container + forward for one excitation block at C channels."""

    def __init__(self, channels: int, cfg: ActionConfig, rng: np.random.Generator,
                 name: str, dtype=np.float32, average: bool = False):
        self.channels = channels
        self.cfg = cfg
        self.average = average
        cr = cfg.squeezed(channels)
        k = cfg.temporal_kernel

        def uniform(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        self.ste_w = Parameter(uniform((1, 1, 3, 3, 3), 27), f"{name}.ste_w")
        self.ste_b = Parameter(np.zeros(1, dtype=dtype), f"{name}.ste_b")

        self.ce_squeeze = Parameter(uniform((channels, cr), channels), f"{name}.ce_squeeze")
        self.ce_temporal = Parameter(uniform((cr, k), k), f"{name}.ce_temporal")
        self.ce_expand = Parameter(uniform((cr, channels), cr), f"{name}.ce_expand")
        self.ce_bias = Parameter(np.zeros(channels, dtype=dtype), f"{name}.ce_bias")

        self.me_squeeze = Parameter(uniform((cr, channels, 1, 1), channels), f"{name}.me_squeeze")
        self.me_transform = Parameter(uniform((cr, cr, 3, 3), cr * 9), f"{name}.me_transform")
        self.me_expand = Parameter(uniform((cr, channels), cr), f"{name}.me_expand")
        self.me_bias = Parameter(np.zeros(channels, dtype=dtype), f"{name}.me_bias")

    def parameters(self) -> list[Parameter]:
        return [self.ste_w, self.ste_b, self.ce_squeeze, self.ce_temporal, self.ce_expand,
                self.ce_bias, self.me_squeeze, self.me_transform, self.me_expand, self.me_bias]

    # -- branches ---------------------------------------------------------------

    def ste(self, x: Tensor) -> Tensor:
        """Spatial-temporal gate: channel mean -> 3D conv -> sigmoid -> x * g."""
        n, t, c, h, w = x.shape
        cmap = tmean(x, axis=2)                          # [N,T,H,W]
        cmap = reshape(cmap, n, 1, t, h, w)              # conv3d wants [N,C,D,H,W]
        g = conv3d(cmap, self.ste_w, self.ste_b, pad=1)  # [N,1,T,H,W]
        g = sigmoid(g)
        g = reshape(g, n, t, 1, h, w)
        return mul(x, g)

    def ce(self, x: Tensor) -> Tensor:
        """Channel gate: pool -> squeeze -> temporal conv -> expand -> sigmoid."""
        n, t, c, h, w = x.shape
        pooled = global_avg_pool(reshape(x, n * t, c, h, w))      # [N*T, C]
        s = matmul(pooled, self.ce_squeeze)                       # [N*T, C/r]
        cr = s.shape[1]
        s = reshape(s, n, t, cr)
        s = _temporal_conv1d(s, self.ce_temporal)                 # [N, T, C/r]
        g = add(matmul(reshape(s, n * t, cr), self.ce_expand), self.ce_bias)
        g = sigmoid(g)
        g = reshape(g, n, t, c, 1, 1)
        return mul(x, g)

    def me(self, x: Tensor) -> Tensor:
        """Motion gate from transformed frame differences; m[T-1] = 0."""
        n, t, c, h, w = x.shape
        s = conv2d(reshape(x, n * t, c, h, w), self.me_squeeze)   # [N*T, C/r, H, W]
        cr = s.shape[1]
        s5 = reshape(s, n, t, cr, h, w)
        if t > 1:
            nxt = reshape(narrow(s5, 1, 1, t - 1), n * (t - 1), cr, h, w)
            nxt = conv2d(nxt, self.me_transform, stride=1, pad=1)
            prev = reshape(narrow(s5, 1, 0, t - 1), n * (t - 1), cr, h, w)
            motion = nxt - prev
            motion = reshape(motion, n, t - 1, cr, h, w)
            motion = concat([motion, zeros_like_slice(motion, 1, 1)], axis=1)
        else:
            motion = mul(s5, 0.0)
        pooled = global_avg_pool(reshape(motion, n * t, cr, h, w))  # [N*T, C/r]
        g = add(matmul(pooled, self.me_expand), self.me_bias)
        g = sigmoid(g)
        g = reshape(g, n, t, c, 1, 1)
        return mul(x, g)

    def forward(self, x: Tensor) -> Tensor:
        """ste(x) + ce(x) + me(x); optional mean of the three for stability."""
        out = add(add(self.ste(x), self.ce(x)), self.me(x))
        if self.average:
            out = mul(out, 1.0 / 3.0)
        return out

    __call__ = forward


def _temporal_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise conv over the middle (time) axis of [N,T,D]; zero padded."""
    n, t, d = x.shape
    k = w.shape[1]
    half = k // 2
    taps = []
    for tap in range(k):
        off = tap - half
        if off < 0:
            part = concat([zeros_like_slice(x, 1, -off), narrow(x, 1, 0, t + off)], axis=1) \
                if t + off > 0 else zeros_like_slice(x, 1, t)
        elif off > 0:
            part = concat([narrow(x, 1, off, t - off), zeros_like_slice(x, 1, off)], axis=1) \
                if t - off > 0 else zeros_like_slice(x, 1, t)
        else:
            part = x
        taps.append(mul(part, reshape(narrow(w, 1, tap, 1), 1, 1, d)))
    out = taps[0]
    for part in taps[1:]:
        out = add(out, part)
    return out
