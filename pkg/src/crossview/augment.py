"""3D geographic augmentation: new instances from a sparse reconstruction.

The point cloud is aligned so the ground is z=0, candidate instance centers
are laid out on a 3x3 proportion grid of the annotated satellite image and
back-projected onto the ground plane, and each selected center is cropped
from the satellite image and from every drone image whose frustum footprint
gives it enough room.  All geometry is exact ray/plane and homography math;
randomness enters only through the seeded plane fit and center sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_image, write_image
from .reconstruction import (
    Camera,
    ImagePose,
    Reconstruction,
    parse_reconstruction,
)

GRID_FRACTIONS = (0.25, 0.5, 0.75)
DEFAULT_D_MIN = 96.0
DEFAULT_D_MAX = 256.0
RANSAC_ITERATIONS = 500


class PlaneFitError(ValueError):
    """Point cloud unusable for plane fitting (too few or collinear points)."""


class EmptyNeighborhoodError(ValueError):
    """No reconstruction points inside the height-offset square."""


class HorizonError(ValueError):
    """A frustum corner ray does not descend toward the ground plane."""


class PoseError(ValueError):
    """Camera is not above the ground plane."""


class DegenerateQuadError(ValueError):
    """Quad correspondences do not determine an invertible homography."""


class ProjectionError(ValueError):
    """Homogeneous projection landed at infinity."""


@dataclass(frozen=True)
class GroundFrame:
    """Rigid map x' = R x + t taking reconstruction coords to ground coords."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.rotation.T + self.translation

    def apply_pose(self, pose) -> "AlignedPose":
        r_img = pose.rotation() if isinstance(pose, ImagePose) else pose.rotation
        t_img = pose.tvec if isinstance(pose, ImagePose) else pose.translation
        r_new = r_img @ self.rotation.T
        return AlignedPose(
            image_id=pose.id if isinstance(pose, ImagePose) else pose.image_id,
            name=pose.name,
            camera_id=pose.camera_id,
            rotation=r_new,
            translation=t_img - r_new @ self.translation,
        )


@dataclass(frozen=True)
class AlignedPose:
    image_id: int
    name: str
    camera_id: int
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class SatAnnotation:
    image_path: Path
    width: int
    height: int
    plane_quad: np.ndarray  # TL, TR, BR, BL on the ground plane

    @property
    def pixel_quad(self) -> np.ndarray:
        w, h = float(self.width), float(self.height)
        return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


@dataclass
class InstanceCrop:
    instance_id: int
    view: str
    source: Path
    homography: np.ndarray
    center: np.ndarray
    projected_center: np.ndarray
    d_cut: float
    crop_rect: tuple[int, int, int, int]  # x0, y0, x1, y1 in source pixels


@dataclass
class AugmentResult:
    crops: list[InstanceCrop]
    warnings: list[str]


# ---------------------------------------------------------------------------
# ground-plane alignment


def _rotation_to_z(normal: np.ndarray) -> np.ndarray:
    """Rotation taking the unit vector ``normal`` to +Z."""
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.clip(normal @ z, -1.0, 1.0))
    axis = np.cross(normal, z)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])  # half turn about X
    axis = axis / s
    kx, ky, kz = axis
    k_mat = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    angle = np.arctan2(s, c)
    return np.eye(3) + np.sin(angle) * k_mat + (1 - np.cos(angle)) * (k_mat @ k_mat)


def fit_ground_frame(
    recon: Reconstruction, override: GroundFrame | None = None, seed: int = 0
) -> GroundFrame:
    """Align the reconstruction so the dominant plane becomes z = 0.

    Least-median-of-squares plane search (500 seeded hypotheses from point
    triples), SVD refit on inliers within 3x the best hypothesis's median
    deviation, normal oriented so most camera centers end up above the
    plane, and the inlier centroid translated onto the plane.
    """
    if override is not None:
        return override
    pts = recon.xyz
    if pts.shape[0] < 3:
        raise PlaneFitError(f"plane fit needs >= 3 points, got {pts.shape[0]}")
    rng = np.random.default_rng(seed)
    best_score = np.inf
    best = None
    for _ in range(RANSAC_ITERATIONS):
        i, j, l = rng.choice(pts.shape[0], size=3, replace=False)
        p0, p1, p2 = pts[i], pts[j], pts[l]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        score = float(np.median(np.abs((pts - p0) @ n)))
        if score < best_score:
            best_score = score
            best = (n, p0)
    if best is None:
        raise PlaneFitError("all sampled point triples were collinear")
    n0, p0 = best
    threshold = 3.0 * best_score + 1e-12
    inliers = pts[np.abs((pts - p0) @ n0) <= threshold]
    centroid = inliers.mean(axis=0)
    centered = inliers - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals.size < 3 or svals[1] < 1e-12:
        raise PlaneFitError("inlier set is collinear; plane is underdetermined")
    normal = vt[2]
    centers = np.array([img.center() for img in recon.images.values()])
    if centers.size:
        above = np.count_nonzero((centers - centroid) @ normal > 0)
        if above * 2 < centers.shape[0]:
            normal = -normal
    rotation = _rotation_to_z(normal)
    translation = np.array([0.0, 0.0, -(rotation @ centroid)[2]])
    return GroundFrame(rotation=rotation, translation=translation)


def height_offset(xyz_aligned: np.ndarray, c, r: float) -> float:
    """Mean z of points in the axis-aligned square of half-size r around c."""
    if r <= 0:
        raise ValueError(f"neighborhood half-size must be positive, got {r}")
    cx, cy = float(c[0]), float(c[1])
    inside = (np.abs(xyz_aligned[:, 0] - cx) <= r) & (np.abs(xyz_aligned[:, 1] - cy) <= r)
    if not inside.any():
        raise EmptyNeighborhoodError(f"no points within {r} of ({cx}, {cy})")
    return float(xyz_aligned[inside, 2].mean())


# ---------------------------------------------------------------------------
# projection geometry


def frustum_footprint(camera: Camera, pose: AlignedPose) -> np.ndarray:
    """Ground-plane quad hit by the corner rays, in pixel-corner order."""
    center = pose.center
    if center[2] <= 0:
        raise PoseError(f"camera center z = {center[2]:.6g} is not above the plane")
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    w, h = float(camera.width), float(camera.height)
    corners = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    out = np.empty((4, 2))
    rt = pose.rotation.T
    for idx, (u, v) in enumerate(corners):
        direction = rt @ np.array([(u - cx) / fx, (v - cy) / fy, 1.0])
        if direction[2] >= 0:
            raise HorizonError(
                f"corner ray ({u:.0f}, {v:.0f}) of image {pose.name!r} does not descend"
            )
        lam = -center[2] / direction[2]
        out[idx] = (center + lam * direction)[:2]
    return out


def homography_from_quad(plane_quad, pixel_quad) -> np.ndarray:
    """Direct linear transform from 4 plane->pixel correspondences, h33 = 1."""
    src = np.asarray(plane_quad, dtype=np.float64)
    dst = np.asarray(pixel_quad, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError(f"expected two 4x2 quads, got {src.shape} and {dst.shape}")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise DegenerateQuadError("quad correspondences give a singular system") from None
    mat = np.append(h, 1.0).reshape(3, 3)
    try:
        check = project_points(mat, src)
    except ProjectionError:
        raise DegenerateQuadError("solved homography maps a source vertex to infinity") from None
    if not np.allclose(check, dst, atol=1e-6):
        raise DegenerateQuadError("solved homography fails to reproduce its correspondences")
    return mat


def project_points(h_mat: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a homography to [...,2] points with dehomogenization."""
    pts = np.asarray(points, dtype=np.float64)
    hom = pts @ h_mat[:, :2].T + h_mat[:, 2]
    w = hom[..., 2]
    if np.any(np.abs(w) < 1e-12):
        raise ProjectionError("point mapped to infinity (homogeneous w ~ 0)")
    return hom[..., :2] / w[..., None]


def project_center(h_mat: np.ndarray, c) -> np.ndarray:
    return project_points(h_mat, np.asarray(c, dtype=np.float64).reshape(1, 2))[0]


def crop_size(d: float, d_min: float = DEFAULT_D_MIN, d_max: float = DEFAULT_D_MAX) -> float | None:
    """Piecewise crop half-size: full d_max, pass-through, or no crop."""
    if not (0 < d_min < d_max):
        raise ValueError(f"thresholds must satisfy 0 < d_min < d_max, got {d_min}, {d_max}")
    if d >= d_max:
        return float(d_max)
    if d >= d_min:
        return float(d)
    return None


# ---------------------------------------------------------------------------
# instance generation


def parse_sat_annotation(path) -> SatAnnotation:
    """Plain-text annotation: image path, 'W H', then 4 'x y' plane vertices."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 6:
        raise ValueError(f"{path}: annotation needs 6 non-empty lines, got {len(lines)}")
    image_path = Path(lines[0])
    if not image_path.is_absolute():
        image_path = path.parent / image_path
    try:
        width, height = (int(f) for f in lines[1].split())
        quad = np.array([[float(a) for a in ln.split()] for ln in lines[2:6]])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed annotation: {exc}") from None
    if quad.shape != (4, 2):
        raise ValueError(f"{path}: expected 4 'x y' vertex lines")
    if width <= 0 or height <= 0:
        raise ValueError(f"{path}: non-positive image size {width}x{height}")
    cross = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        cross.append(a[0] * b[1] - a[1] * b[0])
    cross = np.array(cross)
    if np.any(np.abs(cross) < 1e-12) or not (np.all(cross > 0) or np.all(cross < 0)):
        raise ValueError(f"{path}: plane vertices must form a convex quadrilateral")
    return SatAnnotation(image_path=image_path, width=width, height=height, plane_quad=quad)


def _edge_distance(point, width, height) -> float:
    x, y = float(point[0]), float(point[1])
    return min(x, width - x, y, height - y)


def _integer_rect(center, half_size, width, height) -> tuple[int, int, int, int]:
    size = int(round(2.0 * half_size))
    x0 = int(round(center[0] - half_size))
    y0 = int(round(center[1] - half_size))
    x0 = min(max(x0, 0), width - size)
    y0 = min(max(y0, 0), height - size)
    return x0, y0, x0 + size, y0 + size


def generate_instances(
    recon_dir,
    sat_annotation,
    out_dir,
    k: int,
    r: float | None = None,
    d_min: float = DEFAULT_D_MIN,
    d_max: float = DEFAULT_D_MAX,
    seed: int = 0,
    images_dir=None,
    ground_override: GroundFrame | None = None,
) -> AugmentResult:
    """Run the full augmentation pipeline and write crops under out_dir.

    Drone image files are resolved relative to images_dir (default: the
    reconstruction directory).  Candidate centers that fail the satellite
    crop-size test are discarded before the k centers are sampled; a center
    whose neighborhood holds no points, or that yields no drone crops, is
    recorded as a warning rather than an instance.
    """
    if not 1 <= k <= 9:
        raise ValueError(f"k must lie in 1..9, got {k}")
    recon_dir = Path(recon_dir)
    out_dir = Path(out_dir)
    images_dir = Path(images_dir) if images_dir is not None else recon_dir
    ann = sat_annotation if isinstance(sat_annotation, SatAnnotation) else parse_sat_annotation(sat_annotation)

    recon = parse_reconstruction(recon_dir)
    frame = fit_ground_frame(recon, override=ground_override, seed=seed)
    xyz = frame.apply_points(recon.xyz)
    poses = [frame.apply_pose(img) for img in sorted(recon.images.values(), key=lambda im: im.id)]

    h_sat = homography_from_quad(ann.plane_quad, ann.pixel_quad)
    h_sat_inv = np.linalg.inv(h_sat)
    h_sat_inv /= h_sat_inv[2, 2]

    if r is None:
        r = 0.05 * float(np.linalg.norm(ann.plane_quad[0] - ann.plane_quad[2]))

    # Nine candidates: proportion grid on the satellite image, back-projected.
    candidates = []
    for row, fy in enumerate(GRID_FRACTIONS):
        for col, fx in enumerate(GRID_FRACTIONS):
            pixel = np.array([fx * ann.width, fy * ann.height])
            plane_c = project_center(h_sat_inv, pixel)
            d_sat = _edge_distance(pixel, ann.width, ann.height)
            d_cut_sat = crop_size(d_sat, d_min, d_max)
            if d_cut_sat is not None:
                candidates.append((3 * row + col, plane_c, pixel, d_cut_sat))

    warnings: list[str] = []
    rng = np.random.default_rng(seed)
    if len(candidates) < k:
        warnings.append(
            f"only {len(candidates)} of 9 candidate centers pass the satellite crop test; requested {k}"
        )
        chosen = list(range(len(candidates)))
    else:
        chosen = sorted(rng.choice(len(candidates), size=k, replace=False).tolist())

    sat_image = read_image(ann.image_path)
    if sat_image.shape[:2] != (ann.height, ann.width):
        raise ValueError(
            f"satellite image is {sat_image.shape[1]}x{sat_image.shape[0]}, annotation says {ann.width}x{ann.height}"
        )

    crops: list[InstanceCrop] = []
    for idx in chosen:
        instance_id, plane_c, sat_pixel, d_cut_sat = candidates[idx]
        try:
            z_bar = height_offset(xyz, plane_c, r)
        except EmptyNeighborhoodError:
            warnings.append(f"instance {instance_id}: no points within r={r:.6g}; skipped")
            continue
        shift = GroundFrame(rotation=np.eye(3), translation=np.array([0.0, 0.0, -z_bar]))
        shifted_poses = [shift.apply_pose(p) for p in poses]

        instance_crops: list[InstanceCrop] = []
        rect = _integer_rect(sat_pixel, d_cut_sat, ann.width, ann.height)
        instance_crops.append(
            InstanceCrop(
                instance_id=instance_id,
                view="satellite",
                source=ann.image_path,
                homography=h_sat,
                center=plane_c.copy(),
                projected_center=sat_pixel.copy(),
                d_cut=d_cut_sat,
                crop_rect=rect,
            )
        )
        drone_count = 0
        for pose in shifted_poses:
            camera = recon.cameras[pose.camera_id]
            footprint = frustum_footprint(camera, pose)
            pixel_corners = np.array(
                [[0.0, 0.0], [camera.width, 0.0], [camera.width, camera.height], [0.0, camera.height]],
                dtype=np.float64,
            )
            h_drone = homography_from_quad(footprint, pixel_corners)
            c_tilde = project_center(h_drone, plane_c)
            d_cut = crop_size(_edge_distance(c_tilde, camera.width, camera.height), d_min, d_max)
            if d_cut is None:
                continue
            rect_d = _integer_rect(c_tilde, d_cut, camera.width, camera.height)
            instance_crops.append(
                InstanceCrop(
                    instance_id=instance_id,
                    view="drone",
                    source=images_dir / pose.name,
                    homography=h_drone,
                    center=plane_c.copy(),
                    projected_center=c_tilde,
                    d_cut=d_cut,
                    crop_rect=rect_d,
                )
            )
            drone_count += 1
        if drone_count == 0:
            warnings.append(f"instance {instance_id}: no drone image passes the crop test; dropped")
            continue
        crops.extend(instance_crops)

    _write_crops(crops, sat_image, ann.image_path, out_dir)
    _write_metadata(crops, out_dir)
    return AugmentResult(crops=crops, warnings=warnings)


def _write_crops(crops, sat_image, sat_path, out_dir) -> None:
    source_cache: dict[Path, np.ndarray] = {sat_path: sat_image}
    for crop in crops:
        img = source_cache.get(crop.source)
        if img is None:
            img = read_image(crop.source)
            source_cache[crop.source] = img
        x0, y0, x1, y1 = crop.crop_rect
        h, w = img.shape[:2]
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"crop rectangle {crop.crop_rect} outside {w}x{h} source {crop.source}")
        out_path = (
            out_dir
            / str(crop.instance_id)
            / crop.view
            / f"{crop.source.stem}_c{crop.instance_id}.png"
        )
        write_image(out_path, img[y0:y1, x0:x1])


def _write_metadata(crops, out_dir) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for crop in sorted(crops, key=lambda c: (c.instance_id, c.view, str(c.source))):
        records.append(
            {
                "instance_id": crop.instance_id,
                "view": crop.view,
                "source": str(crop.source),
                "homography": [float(v) for v in crop.homography.reshape(-1)],
                "center": [float(v) for v in crop.center],
                "projected_center": [float(v) for v in crop.projected_center],
                "d_cut": float(crop.d_cut),
                "crop_rect": list(crop.crop_rect),
            }
        )
    with open(out_dir / "metadata.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
