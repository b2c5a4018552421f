"""Dual-branch backbone with stagewise fusion, attention head, and classifier.

Each branch (RGB, surface normals) runs four 3x3 stride-2 conv+relu stages
with independent weights; after stages 1-3 the branches exchange
differential information through fusion, and the final maps are aggregated
into unit descriptors by the attention head.  Per branch, the descriptor
feeds a two-layer classifier producing an intermediate vector (for metric
learning) and class logits.  One model instance serves both drone and
satellite imagery; there is no per-view parameter set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregation import JciaParams, JointDescriptor, init_jcia_params, jcia_forward
from .fusion import DafmParams, dafm_fuse, init_dafm_params

CHECKPOINT_MAGIC = b"JRNM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    input_size: tuple[int, int] = (64, 64)
    d: int = 3
    cls: int = 10
    v_dim: int = 512
    seed: int = 0
    fusion: bool = True

    def validate(self) -> None:
        if len(self.stage_channels) != 4:
            raise ValueError(f"expected 4 stages, got {len(self.stage_channels)}")
        if any(c < 2 or c % 2 != 0 for c in self.stage_channels):
            raise ValueError(f"stage channels must be even and >= 2: {self.stage_channels}")
        if self.cls < 2:
            raise ValueError(f"class count must be >= 2, got {self.cls}")
        if self.d < 1:
            raise ValueError(f"aggregation dimension must be >= 1, got {self.d}")
        if self.v_dim < 1:
            raise ValueError(f"intermediate vector size must be >= 1, got {self.v_dim}")
        if min(self.input_size) < 16:
            raise ValueError(f"input size too small for 4 stride-2 stages: {self.input_size}")

    def stage_sizes(self) -> list[tuple[int, int]]:
        """Spatial extent after each stage (3x3, stride 2, pad 1)."""
        h, w = self.input_size
        sizes = []
        for _ in range(4):
            h = (h - 1) // 2 + 1
            w = (w - 1) // 2 + 1
            sizes.append((h, w))
        return sizes

    @property
    def descriptor_dim(self) -> int:
        """Length of one branch descriptor (joint is twice this)."""
        return self.d * self.stage_channels[-1]


@dataclass
class ConvStage:
    w: ad.Parameter
    b: ad.Parameter


@dataclass
class DualBranchModel:
    config: ModelConfig
    stages_r: list[ConvStage]
    stages_n: list[ConvStage]
    dafm: list[tuple[DafmParams, DafmParams]]
    jcia: JciaParams
    head_r: list[ad.Parameter] = field(default_factory=list)
    head_n: list[ad.Parameter] = field(default_factory=list)

    def parameters(self) -> list[ad.Parameter]:
        out: list[ad.Parameter] = []
        for st in self.stages_r + self.stages_n:
            out += [st.w, st.b]
        for pr, pn in self.dafm:
            out += pr.parameters() + pn.parameters()
        out += self.jcia.parameters()
        out += self.head_r + self.head_n
        return out

    def parameter_groups(self) -> dict[str, list[ad.Parameter]]:
        groups = {
            "backbone_rgb": [p for st in self.stages_r for p in (st.w, st.b)],
            "backbone_normal": [p for st in self.stages_n for p in (st.w, st.b)],
            "jcia": self.jcia.parameters(),
            "classifier_rgb": list(self.head_r),
            "classifier_normal": list(self.head_n),
        }
        if self.dafm:
            groups["dafm"] = [p for pr, pn in self.dafm for p in pr.parameters() + pn.parameters()]
        return groups

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_model(config: ModelConfig) -> DualBranchModel:
    """Deterministically initialize a model from its config seed.

    Weights draw from uniform(-sqrt(6/fan_in), sqrt(6/fan_in)); all biases
    start at zero and fusion pool scales at one.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    def uconv(name, c_out, c_in, k):
        # uniform(-sqrt(6/fan_in), +) keeps activation variance stable through relu.
        bound = np.sqrt(6.0 / (c_in * k * k))
        return ConvStage(
            w=ad.Parameter(f"{name}.w", rng.uniform(-bound, bound, (c_out, c_in, k, k))),
            b=ad.Parameter(f"{name}.b", np.zeros(c_out)),
        )

    def ulin(name, fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return [
            ad.Parameter(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out))),
            ad.Parameter(f"{name}.b", np.zeros(fan_out)),
        ]

    chans = config.stage_channels
    sizes = config.stage_sizes()
    stages_r = [uconv(f"rgb.stage{i + 1}", chans[i], 3 if i == 0 else chans[i - 1], 3) for i in range(4)]
    stages_n = [uconv(f"normal.stage{i + 1}", chans[i], 3 if i == 0 else chans[i - 1], 3) for i in range(4)]
    dafm = []
    if config.fusion:
        for i in range(3):
            h, w = sizes[i]
            dafm.append(
                (
                    init_dafm_params(rng, chans[i], h, w, f"dafm{i + 1}.rgb"),
                    init_dafm_params(rng, chans[i], h, w, f"dafm{i + 1}.normal"),
                )
            )
    h4, w4 = sizes[3]
    jcia = init_jcia_params(rng, chans[3], h4, w4, config.d, "jcia")
    g_len = config.descriptor_dim
    head_r = ulin("classifier_rgb.fc1", g_len, config.v_dim) + ulin(
        "classifier_rgb.fc2", config.v_dim, config.cls
    )
    head_n = ulin("classifier_normal.fc1", g_len, config.v_dim) + ulin(
        "classifier_normal.fc2", config.v_dim, config.cls
    )
    return DualBranchModel(
        config=config,
        stages_r=stages_r,
        stages_n=stages_n,
        dafm=dafm,
        jcia=jcia,
        head_r=head_r,
        head_n=head_n,
    )


def extract_features(
    model: DualBranchModel, x_r: ad.Tensor, x_n: ad.Tensor
) -> tuple[ad.Tensor, ad.Tensor]:
    """Run both branches through the backbone, fusing after stages 1-3."""
    expected = (3,) + tuple(model.config.input_size)
    for name, x in (("rgb", x_r), ("normal", x_n)):
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"{name} input must be [N,{expected[0]},{expected[1]},{expected[2]}], got {x.shape}")
    f_r, f_n = x_r, x_n
    for i in range(4):
        f_r = ad.relu(ad.conv2d(f_r, model.stages_r[i].w, model.stages_r[i].b, stride=2, pad=1))
        f_n = ad.relu(ad.conv2d(f_n, model.stages_n[i].w, model.stages_n[i].b, stride=2, pad=1))
        if i < 3 and model.dafm:
            f_r, f_n = dafm_fuse(f_r, f_n, model.dafm[i][0], model.dafm[i][1])
    return f_r, f_n


def forward(
    model: DualBranchModel, x_r: ad.Tensor, x_n: ad.Tensor
) -> tuple[JointDescriptor, ad.Tensor, ad.Tensor, ad.Tensor, ad.Tensor]:
    """Full pass: descriptor for retrieval, v for the triplet loss, z for CE."""
    f_r, f_n = extract_features(model, x_r, x_n)
    desc = jcia_forward(f_r, f_n, model.jcia)
    outs = []
    for g, head in ((desc.g_r, model.head_r), (desc.g_n, model.head_n)):
        w1, b1, w2, b2 = head
        v = ad.linear(g, w1, b1)
        z = ad.linear(ad.relu(v), w2, b2)
        outs.append((v, z))
    (v_r, z_r), (v_n, z_n) = outs
    return desc, v_r, v_n, z_r, z_n


def save_checkpoint(path, model: DualBranchModel) -> None:
    """Binary little-endian parameter dump, sorted by parameter name."""
    params = sorted(model.parameters(), key=lambda p: p.name)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in model")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, model: DualBranchModel) -> None:
    """Load a checkpoint into an already-built model, matching by name."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    loaded: dict[str, np.ndarray] = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        loaded[name] = data.astype(np.float64)
    by_name = {p.name: p for p in model.parameters()}
    missing = sorted(set(by_name) - set(loaded))
    extra = sorted(set(loaded) - set(by_name))
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing {missing}, unexpected {extra}")
    for name, data in loaded.items():
        p = by_name[name]
        if p.data.shape != data.shape:
            raise ValueError(f"shape mismatch for {name}: model {p.data.shape}, file {data.shape}")
        p.data = data.copy()
        p.grad = None


def parameter_count(model: DualBranchModel) -> int:
    return sum(p.data.size for p in model.parameters())
