"""Toy-scale trainer and embedder for the dual-branch model.

Batches are composed as P classes x 2 views x S samples so the triplet
miner always finds a cross-view positive and a different-class negative.
Optimization is plain SGD with momentum; every step's loss terms are kept
in a log so runs can be compared and reproduced exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import BatchLabels, batch_objective
from .model import DualBranchModel, forward
from .retrieval import VIEW_DRONE, VIEW_SATELLITE
from .synthdata import load_sample, scan_split

_VIEW_CODES = {"drone": VIEW_DRONE, "satellite": VIEW_SATELLITE}


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float = 0.001
    momentum: float = 0.9
    margin: float = 0.3
    classes_per_batch: int = 8
    samples_per_class: int = 2
    use_normals: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.classes_per_batch < 2:
            raise ValueError(f"need >= 2 classes per batch, got {self.classes_per_batch}")
        if self.samples_per_class < 1:
            raise ValueError(f"need >= 1 sample per class per view, got {self.samples_per_class}")


@dataclass
class DataSet:
    """One split loaded into memory, channels-first, values in [-1, 1]."""

    class_ids: list[int]  # label index -> original class id
    rgb: np.ndarray  # [M, 3, H, W]
    normals: np.ndarray  # [M, 3, H, W]
    labels: np.ndarray  # [M] contiguous label indices
    views: np.ndarray  # [M] view codes

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_size(self) -> tuple[int, int]:
        return self.rgb.shape[2], self.rgb.shape[3]


def load_dataset(root, split: str) -> DataSet:
    """Load a split written by the dataset generator.

    RGB is rescaled from [0, 1] to [-1, 1] so both input channels share the
    normal maps' range.  Labels are contiguous indices in sorted class-id
    order; the original ids are kept for descriptor files.
    """
    records = scan_split(root, split)
    class_ids = sorted({r.class_id for r in records})
    label_of = {cid: i for i, cid in enumerate(class_ids)}
    rgb_rows = []
    normal_rows = []
    labels = []
    views = []
    size = None
    for record in records:
        rgb, normal = load_sample(record)
        if size is None:
            size = rgb.shape[:2]
        elif rgb.shape[:2] != size:
            raise ValueError(
                f"{record.image_path}: image size {rgb.shape[:2]} differs from {size}"
            )
        rgb_rows.append(np.transpose(rgb * 2.0 - 1.0, (2, 0, 1)))
        normal_rows.append(np.transpose(normal, (2, 0, 1)))
        labels.append(label_of[record.class_id])
        views.append(_VIEW_CODES[record.view])
    return DataSet(
        class_ids=class_ids,
        rgb=np.stack(rgb_rows),
        normals=np.stack(normal_rows),
        labels=np.array(labels, dtype=np.int64),
        views=np.array(views, dtype=np.int64),
    )


def sample_batch(data: DataSet, rng, classes_per_batch: int, samples_per_class: int) -> np.ndarray:
    """Indices for one P x 2 x S batch; every chosen class covers both views."""
    pools: dict[tuple[int, int], np.ndarray] = {}
    for label in range(len(data.class_ids)):
        for view in (VIEW_DRONE, VIEW_SATELLITE):
            pool = np.flatnonzero((data.labels == label) & (data.views == view))
            if pool.size == 0:
                raise ValueError(
                    f"class id {data.class_ids[label]} has no samples for view {view}"
                )
            pools[(label, view)] = pool
    n_classes = len(data.class_ids)
    if n_classes < 2:
        raise ValueError(f"batch sampling needs >= 2 classes, got {n_classes}")
    p = min(classes_per_batch, n_classes)
    chosen = rng.choice(n_classes, size=p, replace=False)
    parts = []
    for label in chosen:
        for view in (VIEW_DRONE, VIEW_SATELLITE):
            pool = pools[(int(label), view)]
            parts.append(rng.choice(pool, size=samples_per_class, replace=pool.size < samples_per_class))
    return np.concatenate(parts)


@dataclass
class TrainResult:
    loss_log: list[tuple[int, float, float, float]]  # step, total, triplet, ce

    @property
    def final_loss(self) -> float:
        return self.loss_log[-1][1]


def train(model: DualBranchModel, data: DataSet, cfg: TrainConfig) -> TrainResult:
    """SGD-with-momentum training loop over seeded P x 2 x S batches."""
    cfg.validate()
    if data.image_size != tuple(model.config.input_size):
        raise ValueError(
            f"dataset images are {data.image_size}, model expects {tuple(model.config.input_size)}"
        )
    if len(data.class_ids) != model.config.cls:
        raise ValueError(
            f"dataset has {len(data.class_ids)} classes, classifier expects {model.config.cls}"
        )
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity = {p.name: np.zeros_like(p.data) for p in params}
    log: list[tuple[int, float, float, float]] = []
    for step in range(cfg.steps):
        idx = sample_batch(data, rng, cfg.classes_per_batch, cfg.samples_per_class)
        x_r = ad.Tensor(data.rgb[idx])
        x_n = ad.Tensor(data.normals[idx] if cfg.use_normals else data.rgb[idx])
        labels = BatchLabels(class_ids=data.labels[idx], views=data.views[idx])
        try:
            with ad.Tape() as tape:
                _, v_r, v_n, z_r, z_n = forward(model, x_r, x_n)
                total, trip, ce = batch_objective(v_r, v_n, z_r, z_n, labels, margin=cfg.margin)
                ad.backward(total, tape)
        except FloatingPointError as exc:
            raise FloatingPointError(f"non-finite loss at step {step}: {exc}") from None
        total_val = total.item()
        if not np.isfinite(total_val):
            raise FloatingPointError(f"non-finite loss at step {step}: total={total_val}")
        for p in params:
            if p.grad is None:
                continue
            vel = cfg.momentum * velocity[p.name] + p.grad
            velocity[p.name] = vel
            p.data = p.data - cfg.lr * vel
        model.zero_grads()
        log.append((step, total_val, trip.item(), ce.item()))
    return TrainResult(loss_log=log)


def write_loss_log(path, result: TrainResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step total triplet ce"]
    for step, total, trip, ce in result.loss_log:
        lines.append(f"{step} {total:.10g} {trip:.10g} {ce:.10g}")
    path.write_text("\n".join(lines) + "\n")


def embed_dataset(
    model: DualBranchModel, data: DataSet, use_normals: bool = True, batch_size: int = 16
) -> list[tuple[int, int, np.ndarray]]:
    """Joint descriptors for every sample, re-normalized to unit length.

    The two halves of the joint descriptor are unit vectors, so the raw
    concatenation has norm sqrt(2); dividing it out keeps cosine ranking
    equal to the per-branch average the aggregation head defines.
    """
    if data.image_size != tuple(model.config.input_size):
        raise ValueError(
            f"dataset images are {data.image_size}, model expects {tuple(model.config.input_size)}"
        )
    out: list[tuple[int, int, np.ndarray]] = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x_r = ad.Tensor(data.rgb[idx])
        x_n = ad.Tensor(data.normals[idx] if use_normals else data.rgb[idx])
        desc, _, _, _, _ = forward(model, x_r, x_n)
        joint = desc.joint
        joint = joint / np.linalg.norm(joint, axis=1, keepdims=True)
        for row, i in enumerate(idx):
            out.append(
                (data.class_ids[int(data.labels[i])], int(data.views[i]), joint[row].copy())
            )
    return out
