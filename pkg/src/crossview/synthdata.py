"""Procedural cross-view dataset: paired RGB and surface-normal images.

Each class is one tiny scene: a smooth random heightfield lit from a fixed
direction over a low-frequency color texture.  The top-down render plays the
satellite role; drone views are seeded projective warps of that render, with
photometric jitter applied to the RGB channel only so the normal channel
stays photometry-invariant.  Normal maps are computed analytically from the
heightfield gradient and encoded as RGB = round((n + 1) / 2 * 255); warped
normal maps are re-normalized per pixel before encoding (interpolation
shortens vectors slightly) but are never re-oriented by the warp.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import homography_from_quad, project_points
from .imageio import read_image, write_image

SPLITS = ("train", "query", "gallery")
VIEWS = ("drone", "satellite")

_LIGHT = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
_TEXTURE_GRID = 8


@dataclass(frozen=True)
class SceneSpec:
    classes: int
    views: int
    size: int = 64
    gaussians: int = 6
    warp: float = 0.15
    jitter: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 1:
            raise ValueError(f"need at least 1 class, got {self.classes}")
        if self.views < 1:
            raise ValueError(f"need at least 1 drone view per class, got {self.views}")
        if self.size < 16:
            raise ValueError(f"image size must be >= 16, got {self.size}")
        if not 1 <= self.gaussians <= 64:
            raise ValueError(f"heightfield bump count must lie in 1..64, got {self.gaussians}")
        if not 0.0 <= self.warp <= 0.25:
            raise ValueError(f"warp fraction must lie in [0, 0.25], got {self.warp}")
        if not 0.0 <= self.jitter <= 0.5:
            raise ValueError(f"jitter magnitude must lie in [0, 0.5], got {self.jitter}")


# ---------------------------------------------------------------------------
# normal-map encoding


def encode_normals(normals: np.ndarray) -> np.ndarray:
    """Unit vectors [..., 3] to uint8 RGB via (n + 1) / 2."""
    return np.clip(np.round((normals + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def decode_normals(image: np.ndarray) -> np.ndarray:
    """Inverse of encode_normals, without re-normalizing."""
    return image.astype(np.float64) / 255.0 * 2.0 - 1.0


def _unit_normals(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    normals = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    return normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def normal_map_from_gradient(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Encoded normal map for heightfield slopes (image coords, y down)."""
    return encode_normals(_unit_normals(gx, gy))


# ---------------------------------------------------------------------------
# scene synthesis


def _heightfield_gradient(rng, size: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(size, dtype=np.float64)
    x, y = np.meshgrid(xs, xs, indexing="xy")
    gx = np.zeros((size, size))
    gy = np.zeros((size, size))
    for _ in range(count):
        cx, cy = rng.uniform(0.1 * size, 0.9 * size, size=2)
        sigma = rng.uniform(0.08 * size, 0.25 * size)
        amp = rng.uniform(-0.8, 0.8) * sigma
        bump = amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma * sigma))
        gx += bump * (-(x - cx) / (sigma * sigma))
        gy += bump * (-(y - cy) / (sigma * sigma))
    return gx, gy


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    g = coarse.shape[0]
    pos = np.linspace(0.0, g - 1.0, size)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, g - 2)
    frac = pos - i0
    rows = coarse[i0] * (1.0 - frac)[:, None, None] + coarse[i0 + 1] * frac[:, None, None]
    return rows[:, i0] * (1.0 - frac)[None, :, None] + rows[:, i0 + 1] * frac[None, :, None]


def _render_satellite(rng, size: int, gaussians: int) -> tuple[np.ndarray, np.ndarray]:
    """One scene's top-down RGB (float 0..255) and encoded normal map."""
    gx, gy = _heightfield_gradient(rng, size, gaussians)
    normals = _unit_normals(gx, gy)
    normal_map = encode_normals(normals)
    texture = _upsample(rng.uniform(0.15, 0.95, size=(_TEXTURE_GRID, _TEXTURE_GRID, 3)), size)
    lambertian = np.clip(normals @ _LIGHT, 0.0, 1.0)
    rgb = texture * (0.35 + 0.65 * lambertian)[..., None] * 255.0
    return rgb, normal_map


# ---------------------------------------------------------------------------
# projective drone views


def warp_quad(rng, size: int, warp: float) -> np.ndarray:
    """Source quad for one drone view: image corners pushed inward."""
    s = float(size - 1)
    corners = np.array([[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]])
    inward = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    return corners + inward * rng.uniform(0.0, max(warp * size, 1e-9), size=(4, 2))


def _bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1.0 - fx) + image[y0, x0 + 1] * fx
    bottom = image[y0 + 1, x0] * (1.0 - fx) + image[y0 + 1, x0 + 1] * fx
    return top * (1.0 - fy) + bottom * fy


def _warp_image(image: np.ndarray, h_inv: np.ndarray, size: int) -> np.ndarray:
    us = np.arange(size, dtype=np.float64)
    u, v = np.meshgrid(us, us, indexing="xy")
    src = project_points(h_inv, np.stack([u, v], axis=-1).reshape(-1, 2)).reshape(size, size, 2)
    return _bilinear(image, src[..., 0], src[..., 1])


def _drone_view(rng, spec: SceneSpec, sat_rgb: np.ndarray, sat_normal: np.ndarray):
    s = float(spec.size - 1)
    quad = warp_quad(rng, spec.size, spec.warp)
    corners = np.array([[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]])
    h_mat = homography_from_quad(quad, corners)
    h_inv = np.linalg.inv(h_mat)
    h_inv /= h_inv[2, 2]
    rgb = _warp_image(sat_rgb, h_inv, spec.size)
    normal = _warp_image(sat_normal.astype(np.float64), h_inv, spec.size)
    decoded = normal / 255.0 * 2.0 - 1.0
    norms = np.maximum(np.linalg.norm(decoded, axis=-1, keepdims=True), 1e-9)
    normal_out = encode_normals(decoded / norms)
    # Photometric jitter touches RGB only; draws happen unconditionally so a
    # zero magnitude still consumes the same random stream.
    gain = 1.0 + spec.jitter * rng.uniform(-1.0, 1.0)
    channel = 1.0 + (spec.jitter / 3.0) * rng.uniform(-1.0, 1.0, size=3)
    bias = spec.jitter * rng.uniform(-0.5, 0.5) * 255.0
    rgb_out = np.clip(np.round(rgb * gain * channel + bias), 0, 255).astype(np.uint8)
    return rgb_out, normal_out


# ---------------------------------------------------------------------------
# dataset emission


def generate_dataset(spec: SceneSpec, out_root) -> dict[str, int]:
    """Write the full split/view/class tree; returns per-split file counts."""
    spec.validate()
    out_root = Path(out_root)
    counts = {split: 0 for split in SPLITS}
    for cid in range(spec.classes):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, cid]))
        sat_rgb, sat_normal = _render_satellite(rng, spec.size, spec.gaussians)
        sat_rgb_u8 = np.clip(np.round(sat_rgb), 0, 255).astype(np.uint8)
        for split in SPLITS:
            base = out_root / split / "satellite" / str(cid)
            write_image(base / "0.png", sat_rgb_u8)
            write_image(base / "0_normal.png", sat_normal)
            counts[split] += 2
        for split in SPLITS:
            for index in range(spec.views):
                rgb, normal = _drone_view(rng, spec, sat_rgb, sat_normal)
                base = out_root / split / "drone" / str(cid)
                write_image(base / f"{index}.png", rgb)
                write_image(base / f"{index}_normal.png", normal)
                counts[split] += 2
    return counts


@dataclass(frozen=True)
class SampleRecord:
    class_id: int
    view: str
    index: int
    image_path: Path
    normal_path: Path


def scan_split(root, split: str) -> list[SampleRecord]:
    """Enumerate one split's samples in a deterministic order."""
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"split directory not found: {base}")
    records: list[SampleRecord] = []
    for view in VIEWS:
        view_dir = base / view
        if not view_dir.is_dir():
            raise FileNotFoundError(f"view directory not found: {view_dir}")
        for class_dir in sorted(view_dir.iterdir(), key=lambda p: p.name):
            if not class_dir.is_dir():
                continue
            try:
                cid = int(class_dir.name)
            except ValueError:
                raise ValueError(f"class directory name is not an integer id: {class_dir}") from None
            images = [p for p in class_dir.glob("*.png") if not p.stem.endswith("_normal")]
            for image_path in sorted(images, key=lambda p: int(p.stem)):
                normal_path = image_path.with_name(f"{image_path.stem}_normal.png")
                if not normal_path.is_file():
                    raise ValueError(f"missing normal sibling for {image_path}")
                records.append(SampleRecord(cid, view, int(image_path.stem), image_path, normal_path))
    records.sort(key=lambda r: (r.view, r.class_id, r.index))
    return records


def load_sample(record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    """RGB and normal images as float arrays in [0, 1] and [-1, 1]."""
    rgb = read_image(record.image_path).astype(np.float64) / 255.0
    normal = decode_normals(read_image(record.normal_path))
    return rgb, normal
