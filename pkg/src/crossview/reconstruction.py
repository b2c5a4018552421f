"""Sparse-reconstruction text format: parsing and pose math.

Reads the standard three-file text layout (cameras.txt, images.txt,
points3D.txt) with '#' comments.  Only the two undistorted pinhole camera
models are supported.  Poses follow the world-to-camera convention
x_cam = R(q) * x_world + t with quaternions stored (w, x, y, z); the camera
center is C = -R^T t.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_MODELS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


class ReconstructionParseError(ValueError):
    """Malformed line in a reconstruction file; message carries file:line."""


class UnsupportedCameraModelError(ValueError):
    """Camera model outside the supported pinhole family."""


class ReconstructionIntegrityError(ValueError):
    """Cross-reference or invariant violation in otherwise well-formed files."""


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Camera:
    id: int
    model: str
    width: int
    height: int
    params: tuple[float, ...]

    @property
    def fx(self) -> float:
        return self.params[0]

    @property
    def fy(self) -> float:
        return self.params[0] if self.model == "SIMPLE_PINHOLE" else self.params[1]

    @property
    def cx(self) -> float:
        return self.params[-2]

    @property
    def cy(self) -> float:
        return self.params[-1]

    @property
    def k(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ImagePose:
    id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str

    def rotation(self) -> np.ndarray:
        return quaternion_to_rotation(self.qvec)

    def center(self) -> np.ndarray:
        return -self.rotation().T @ self.tvec


@dataclass
class Reconstruction:
    cameras: dict[int, Camera]
    images: dict[int, ImagePose]
    xyz: np.ndarray
    rgb: np.ndarray
    point_errors: np.ndarray


def _fail(path, lineno, why):
    raise ReconstructionParseError(f"{path}:{lineno}: {why}")


def _floats(path, lineno, fields):
    try:
        return [float(f) for f in fields]
    except ValueError:
        _fail(path, lineno, f"expected numeric fields, got {fields!r}")


def _int(path, lineno, field, what):
    try:
        return int(field)
    except ValueError:
        _fail(path, lineno, f"expected integer {what}, got {field!r}")


def parse_cameras(path) -> dict[int, Camera]:
    cameras: dict[int, Camera] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) < 4:
                _fail(path, lineno, f"camera line needs id, model, width, height; got {len(fields)} fields")
            cam_id = _int(path, lineno, fields[0], "camera id")
            model = fields[1]
            if model not in SUPPORTED_MODELS:
                raise UnsupportedCameraModelError(
                    f"{path}:{lineno}: unsupported camera model {model!r}"
                    f" (supported: {sorted(SUPPORTED_MODELS)})"
                )
            width = _int(path, lineno, fields[2], "width")
            height = _int(path, lineno, fields[3], "height")
            if width <= 0 or height <= 0:
                _fail(path, lineno, f"non-positive image size {width}x{height}")
            params = _floats(path, lineno, fields[4:])
            if len(params) != SUPPORTED_MODELS[model]:
                _fail(
                    path,
                    lineno,
                    f"{model} expects {SUPPORTED_MODELS[model]} parameters, got {len(params)}",
                )
            if cam_id in cameras:
                raise ReconstructionIntegrityError(f"{path}:{lineno}: duplicate camera id {cam_id}")
            cameras[cam_id] = Camera(cam_id, model, width, height, tuple(params))
    return cameras


def parse_images(path) -> dict[int, ImagePose]:
    images: dict[int, ImagePose] = {}
    expecting_pose = True
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                continue
            if expecting_pose:
                if not line:
                    continue
                fields = line.split()
                if len(fields) < 10:
                    _fail(path, lineno, f"image line needs 10 fields, got {len(fields)}")
                img_id = _int(path, lineno, fields[0], "image id")
                q = _floats(path, lineno, fields[1:5])
                t = _floats(path, lineno, fields[5:8])
                cam_id = _int(path, lineno, fields[8], "camera id")
                name = " ".join(fields[9:])
                if img_id in images:
                    raise ReconstructionIntegrityError(f"{path}:{lineno}: duplicate image id {img_id}")
                images[img_id] = ImagePose(
                    img_id, np.array(q), np.array(t), cam_id, name
                )
                expecting_pose = False
            else:
                # The 2D-observation line; content (possibly empty) is skipped.
                expecting_pose = True
    return images


def parse_points(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xyz, rgb, errs = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) < 8:
                _fail(path, lineno, f"point line needs at least 8 fields, got {len(fields)}")
            _int(path, lineno, fields[0], "point id")
            xyz.append(_floats(path, lineno, fields[1:4]))
            rgb.append([_int(path, lineno, f, "color") for f in fields[4:7]])
            errs.append(_floats(path, lineno, fields[7:8])[0])
    if xyz:
        return (
            np.array(xyz, dtype=np.float64),
            np.array(rgb, dtype=np.uint8),
            np.array(errs, dtype=np.float64),
        )
    return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8), np.zeros(0)


def parse_reconstruction(directory) -> Reconstruction:
    """Parse and cross-validate a reconstruction directory."""
    directory = Path(directory)
    for fname in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (directory / fname).exists():
            raise FileNotFoundError(f"missing {fname} in {directory}")
    cameras = parse_cameras(directory / "cameras.txt")
    images = parse_images(directory / "images.txt")
    xyz, rgb, errs = parse_points(directory / "points3D.txt")
    for img in images.values():
        if img.camera_id not in cameras:
            raise ReconstructionIntegrityError(
                f"image {img.id} ({img.name!r}) references missing camera {img.camera_id}"
            )
        norm = float(np.linalg.norm(img.qvec))
        if abs(norm - 1.0) > 1e-6:
            raise ReconstructionIntegrityError(
                f"image {img.id} quaternion norm {norm:.8f} deviates from 1 by more than 1e-6"
            )
    return Reconstruction(cameras=cameras, images=images, xyz=xyz, rgb=rgb, point_errors=errs)
