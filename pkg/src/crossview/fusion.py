"""Difference-aware fusion of RGB and surface-normal branch features.

At each backbone stage the two branches exchange their differential mode:
the branch difference is pooled spatially and across channels, scaled by
learned per-channel / per-position parameters, squashed through an even
activation into (0,1) weights, and used to amplify the difference before it
is concatenated back onto the branch and reprojected to the stage width.

The even activation is delta(x) = 1 - 4*sigmoid(x)*(1 - sigmoid(x)), which
equals tanh(x/2)^2.  It is computed via tanh of |x| so the evenness
delta(x) == delta(-x) holds bitwise regardless of libm rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    accumulate_grad,
    apply_op,
    broadcast_add,
    channel_concat,
    conv2d,
    expand,
    mul,
    pool,
    reshape,
    sub,
)


@dataclass
class DafmParams:
    """Learned fusion parameters for one branch at one stage.

    p_s scales the spatial average pool (one entry per channel), p_c scales
    the channel average pool (one entry per position); the reprojection is a
    1x1 convolution taking the concatenated 2C channels back to C.
    """

    p_s: Parameter
    p_c: Parameter
    reproject_w: Parameter
    reproject_b: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.p_s, self.p_c, self.reproject_w, self.reproject_b]


def init_dafm_params(
    rng: np.random.Generator, channels: int, height: int, width: int, prefix: str
) -> DafmParams:
    """Pool scales start at 1 so initial weights follow raw feature statistics."""
    fan_in = 2 * channels
    bound = np.sqrt(6.0 / fan_in)
    return DafmParams(
        p_s=Parameter(f"{prefix}.p_s", np.ones(channels)),
        p_c=Parameter(f"{prefix}.p_c", np.ones((height, width))),
        reproject_w=Parameter(
            f"{prefix}.reproject_w",
            rng.uniform(-bound, bound, size=(channels, 2 * channels, 1, 1)),
        ),
        reproject_b=Parameter(f"{prefix}.reproject_b", np.zeros(channels)),
    )


def delta_activation(x: Tensor) -> Tensor:
    """Elementwise 1 - 4*sigmoid(x)*(1-sigmoid(x)); even, zero at 0, range [0,1).

    The mathematical range is [0,1); in float64 the value rounds to exactly
    1.0 once |x| exceeds roughly 38, as it would under any evaluation of the
    defining formula.
    """
    t = np.tanh(np.abs(x.data) * 0.5)
    out = t * t

    def bw(g):
        accumulate_grad(x, g * np.sign(x.data) * t * (1.0 - out))

    return apply_op(out, (x,), bw)


def dafm_weights(f_d: Tensor, params: DafmParams) -> Tensor:
    """Activated amplification weights for a differential feature map.

    W = delta(p_s * SP(f_d) + p_c * CP(f_d)) with SP the spatial average
    pool and CP the channel average pool, broadcast to [N,C,H,W].
    """
    if f_d.ndim != 4:
        raise ValueError(f"dafm_weights expects [N,C,H,W], got {f_d.shape}")
    n, c, h, w = f_d.shape
    if params.p_s.shape != (c,):
        raise ValueError(f"p_s has shape {params.p_s.shape}, stage has {c} channels")
    if params.p_c.shape != (h, w):
        raise ValueError(f"p_c has shape {params.p_c.shape}, stage extent is {(h, w)}")
    sp = pool(f_d, "spatial_avg")
    cp = pool(f_d, "channel_avg")
    scaled_sp = mul(sp, expand(reshape(params.p_s, (1, c, 1, 1)), (n, c, 1, 1)))
    scaled_cp = mul(cp, expand(reshape(params.p_c, (1, 1, h, w)), (n, 1, h, w)))
    return delta_activation(broadcast_add(scaled_sp, scaled_cp))


def dafm_fuse(
    f_r: Tensor, f_n: Tensor, params_r: DafmParams, params_n: DafmParams
) -> tuple[Tensor, Tensor]:
    """Fuse the two branch features, returning one map per branch.

    Each branch sees its own sign of the difference (d for RGB, -d for
    normals), amplifies it by dafm_weights, concatenates the result onto its
    own features and reprojects 2C -> C with a 1x1 convolution.
    """
    if f_r.shape != f_n.shape:
        raise ValueError(f"branch shapes differ: {f_r.shape} vs {f_n.shape}")
    outs = []
    for f_b, d, params in (
        (f_r, sub(f_r, f_n), params_r),
        (f_n, sub(f_n, f_r), params_n),
    ):
        amplified = mul(d, dafm_weights(d, params))
        cat = channel_concat(f_b, amplified)
        outs.append(conv2d(cat, params.reproject_w, params.reproject_b))
    return outs[0], outs[1]
