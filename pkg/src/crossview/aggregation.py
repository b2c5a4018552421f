"""Cross-branch spatial attention and descriptor aggregation.

The final RGB and normal feature maps are premapped, split into channel
halves, and paired across branches.  Each pairing is pooled to an
average/max stack, convolved, and squashed into spatial interaction
weights; those reweight the halves, which are projected back to full width
as global attention maps.  A residual application of the attention followed
by a per-channel spatial linear map and a single L2 normalization produces
one unit descriptor per branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    channel_concat,
    channel_split,
    conv2d,
    expand,
    l2_normalize,
    linear,
    mul,
    pool,
    reshape,
    sigmoid,
)

INTERACTION_KERNEL = 7
INTERACTION_PAD = 3


@dataclass
class JciaParams:
    """Learned aggregation parameters for one model head.

    Channel maps (premap C->C, project C/2->C) are stored as 1x1
    convolutions; the interaction conv is a 7x7 2->2 convolution shared by
    both pairings; spatial_agg maps the flattened H*W positions of each
    channel down to d values.
    """

    premap_r_w: Parameter
    premap_r_b: Parameter
    premap_n_w: Parameter
    premap_n_b: Parameter
    interaction_w: Parameter
    interaction_b: Parameter
    project_r_w: Parameter
    project_r_b: Parameter
    project_n_w: Parameter
    project_n_b: Parameter
    agg_r_w: Parameter
    agg_r_b: Parameter
    agg_n_w: Parameter
    agg_n_b: Parameter
    d: int

    def parameters(self) -> list[Parameter]:
        return [
            self.premap_r_w,
            self.premap_r_b,
            self.premap_n_w,
            self.premap_n_b,
            self.interaction_w,
            self.interaction_b,
            self.project_r_w,
            self.project_r_b,
            self.project_n_w,
            self.project_n_b,
            self.agg_r_w,
            self.agg_r_b,
            self.agg_n_w,
            self.agg_n_b,
        ]


@dataclass
class JointDescriptor:
    """Batched unit descriptors per branch; ``joint`` is their concatenation."""

    g_r: Tensor
    g_n: Tensor

    @property
    def joint(self) -> np.ndarray:
        return np.concatenate([self.g_r.data, self.g_n.data], axis=-1)


def init_jcia_params(
    rng: np.random.Generator, channels: int, height: int, width: int, d: int, prefix: str
) -> JciaParams:
    if channels % 2 != 0:
        raise ValueError(f"channel count must be even, got {channels}")
    if d < 1:
        raise ValueError(f"aggregation dimension must be >= 1, got {d}")
    half = channels // 2
    hw = height * width
    k = INTERACTION_KERNEL

    def u(shape, fan_in):
        return rng.uniform(-np.sqrt(6.0 / fan_in), np.sqrt(6.0 / fan_in), size=shape)

    return JciaParams(
        premap_r_w=Parameter(f"{prefix}.premap_r_w", u((channels, channels, 1, 1), channels)),
        premap_r_b=Parameter(f"{prefix}.premap_r_b", np.zeros(channels)),
        premap_n_w=Parameter(f"{prefix}.premap_n_w", u((channels, channels, 1, 1), channels)),
        premap_n_b=Parameter(f"{prefix}.premap_n_b", np.zeros(channels)),
        interaction_w=Parameter(f"{prefix}.interaction_w", u((2, 2, k, k), 2 * k * k)),
        interaction_b=Parameter(f"{prefix}.interaction_b", np.zeros(2)),
        project_r_w=Parameter(f"{prefix}.project_r_w", u((channels, half, 1, 1), half)),
        project_r_b=Parameter(f"{prefix}.project_r_b", np.zeros(channels)),
        project_n_w=Parameter(f"{prefix}.project_n_w", u((channels, half, 1, 1), half)),
        project_n_b=Parameter(f"{prefix}.project_n_b", np.zeros(channels)),
        agg_r_w=Parameter(f"{prefix}.agg_r_w", u((hw, d), hw)),
        agg_r_b=Parameter(f"{prefix}.agg_r_b", np.zeros(d)),
        agg_n_w=Parameter(f"{prefix}.agg_n_w", u((hw, d), hw)),
        agg_n_b=Parameter(f"{prefix}.agg_n_b", np.zeros(d)),
        d=d,
    )


def spatial_interaction_weights(
    fp_r1: Tensor, fp_n1: Tensor, fp_r2: Tensor, fp_n2: Tensor, params: JciaParams
) -> tuple[Tensor, Tensor]:
    """Per-pairing [N,2,H,W] attention weights, every entry in (0,1)."""
    shape = fp_r1.shape
    for t in (fp_n1, fp_r2, fp_n2):
        if t.shape != shape:
            raise ValueError(f"split shapes differ: {shape} vs {t.shape}")
    out = []
    for a, b in ((fp_r1, fp_n1), (fp_r2, fp_n2)):
        stacked = pool(channel_concat(a, b), "channel_avgmax")
        conv = conv2d(
            stacked, params.interaction_w, params.interaction_b, stride=1, pad=INTERACTION_PAD
        )
        out.append(sigmoid(conv))
    return out[0], out[1]


def global_attention_weights(
    splits: tuple[Tensor, Tensor, Tensor, Tensor],
    sw_r: Tensor,
    sw_n: Tensor,
    params: JciaParams,
) -> tuple[Tensor, Tensor]:
    """Project the attention-weighted half-width sums back to C channels."""
    fp_r1, fp_n1, fp_r2, fp_n2 = splits
    half_shape = fp_r1.shape
    out = []
    for (a, b), sw, w, bias in (
        ((fp_r1, fp_n1), sw_r, params.project_r_w, params.project_r_b),
        ((fp_r2, fp_n2), sw_n, params.project_n_w, params.project_n_b),
    ):
        if sw.shape != (half_shape[0], 2) + half_shape[2:]:
            raise ValueError(f"attention weights shape {sw.shape} does not match splits {half_shape}")
        w0, w1 = channel_split(sw, 2)
        mixed = add(
            mul(expand(w0, half_shape), a),
            mul(expand(w1, half_shape), b),
        )
        out.append(conv2d(mixed, w, bias))
    return out[0], out[1]


def jcia_forward(f_r: Tensor, f_n: Tensor, params: JciaParams) -> JointDescriptor:
    """Aggregate final branch features into unit descriptors.

    Attention is computed from premapped channel halves; the input features
    are residually reweighted (f + f * GW), spatially aggregated per channel
    to d values, flattened, and normalized once per branch.
    """
    if f_r.shape != f_n.shape:
        raise ValueError(f"branch shapes differ: {f_r.shape} vs {f_n.shape}")
    n, c, h, w = f_r.shape
    if c % 2 != 0:
        raise ValueError(f"channel count must be even, got {c}")
    if params.premap_r_w.shape != (c, c, 1, 1):
        raise ValueError(
            f"params built for {params.premap_r_w.shape[1]} channels, input has {c}"
        )
    if params.agg_r_w.shape[0] != h * w:
        raise ValueError(
            f"params built for {params.agg_r_w.shape[0]} positions, input has {h * w}"
        )

    fp_r = conv2d(f_r, params.premap_r_w, params.premap_r_b)
    fp_n = conv2d(f_n, params.premap_n_w, params.premap_n_b)
    fp_r1, fp_r2 = channel_split(fp_r, 2)
    fp_n1, fp_n2 = channel_split(fp_n, 2)
    splits = (fp_r1, fp_n1, fp_r2, fp_n2)
    sw_r, sw_n = spatial_interaction_weights(*splits, params)
    gw_r, gw_n = global_attention_weights(splits, sw_r, sw_n, params)

    gs = []
    for f_b, gw, agg_w, agg_b in (
        (f_r, gw_r, params.agg_r_w, params.agg_r_b),
        (f_n, gw_n, params.agg_n_w, params.agg_n_b),
    ):
        f_bar = add(f_b, mul(f_b, gw))
        flat = reshape(f_bar, (n, c, h * w))
        agg = linear(flat, agg_w, agg_b)
        gs.append(l2_normalize(reshape(agg, (n, c * params.d))))
    return JointDescriptor(g_r=gs[0], g_n=gs[1])
