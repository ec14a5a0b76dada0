"""Pinhole multi-camera model, epipolar and trifocal tests, DLT triangulation.

Conventions: world frame is right-handed, z up, origin at a floor corner of the
aviary. A camera maps a world point ``X`` to camera coordinates ``R @ X + t``;
pixel centres sit on integer ``(u, v)`` coordinates. There is no lens
distortion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometry, StageIOError

BEHIND_DEPTH = 1e-9
DEFAULT_WIDTH = 1920
DEFAULT_HEIGHT = 1200


class Pixel(NamedTuple):
    u: float
    v: float
    camera_id: int = -1


@dataclass(frozen=True, eq=False)
class CameraModel:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int = DEFAULT_WIDTH
    image_height: int = DEFAULT_HEIGHT
    _P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError(f"camera {self.id}: rotation is not a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError(f"camera {self.id}: principal point outside the image")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        P = self.K @ np.hstack([R, t[:, None]])
        P.setflags(write=False)
        object.__setattr__(self, "_P", P)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix."""
        return self._P

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, id, position, target, fx, fy=None, cx=None, cy=None,
                width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT, up=(0.0, 0.0, 1.0)):
        """Build a camera at ``position`` whose optical axis points at ``target``."""
        position = np.asarray(position, dtype=float)
        z = np.asarray(target, dtype=float) - position
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.vstack([x, y, z])
        return cls(id=id, fx=fx, fy=fy if fy is not None else fx,
                   cx=cx if cx is not None else (width - 1) / 2.0,
                   cy=cy if cy is not None else (height - 1) / 2.0,
                   rotation=R, translation=-R @ position,
                   image_width=width, image_height=height)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection of ``(N, 3)`` points.

        Returns ``(uv, depth)``. Rows with depth <= 1e-9 hold NaN pixels.
        """
        pc = self.to_camera(np.atleast_2d(points))
        depth = pc[:, 2]
        uv = np.full((len(pc), 2), np.nan)
        ok = depth > BEHIND_DEPTH
        uv[ok, 0] = self.fx * pc[ok, 0] / depth[ok] + self.cx
        uv[ok, 1] = self.fy * pc[ok, 1] / depth[ok] + self.cy
        return uv, depth

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.atleast_2d(uv)
        with np.errstate(invalid="ignore"):
            return ((uv[:, 0] >= -0.5 + margin) & (uv[:, 0] <= self.image_width - 0.5 - margin)
                    & (uv[:, 1] >= -0.5 + margin) & (uv[:, 1] <= self.image_height - 0.5 - margin))

    def to_dict(self) -> dict:
        return {
            "id": int(self.id), "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "R": [float(x) for x in self.rotation.ravel()],
            "t": [float(x) for x in self.translation],
            "width": int(self.image_width), "height": int(self.image_height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(id=int(d["id"]), fx=float(d["fx"]), fy=float(d["fy"]),
                   cx=float(d["cx"]), cy=float(d["cy"]),
                   rotation=np.asarray(d["R"], dtype=float).reshape(3, 3),
                   translation=np.asarray(d["t"], dtype=float),
                   image_width=int(d["width"]), image_height=int(d["height"]))


def project(camera: CameraModel, p) -> Pixel | None:
    """Project a world point; ``None`` means the point is behind the camera."""
    uv, depth = camera.project_points(np.asarray(p, dtype=float).reshape(1, 3))
    if not depth[0] > BEHIND_DEPTH:
        return None
    return Pixel(float(uv[0, 0]), float(uv[0, 1]), camera.id)


def save_calibration(cameras: Sequence[CameraModel], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1) + "\n")


def load_calibration(path) -> list[CameraModel]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise StageIOError(f"calibration file not found: {path}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise StageIOError(f"calibration file is not valid JSON: {path} ({exc})",
                           path=str(path)) from None
    return [CameraModel.from_dict(d) for d in data]


def _skew(t):
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def fundamental_matrix(camA: CameraModel, camB: CameraModel) -> np.ndarray:
    """F such that ``xB^T F xA = 0`` for corresponding pixels."""
    if np.linalg.norm(camA.center - camB.center) < 1e-9:
        raise DegenerateGeometry(f"cameras {camA.id} and {camB.id} share a centre")
    R = camB.rotation @ camA.rotation.T
    t = camB.translation - R @ camA.translation
    E = _skew(t) @ R
    F = np.linalg.inv(camB.K).T @ E @ np.linalg.inv(camA.K)
    return F / np.linalg.norm(F)


def _line_distance(lines, pts):
    # lines (..., 3), pts (..., 2)
    num = np.abs(lines[..., 0] * pts[..., 0] + lines[..., 1] * pts[..., 1] + lines[..., 2])
    return num / np.hypot(lines[..., 0], lines[..., 1])


def epipolar_distance_matrix(F: np.ndarray, uvA: np.ndarray, uvB: np.ndarray) -> np.ndarray:
    """Symmetric epipolar distances between all rows of ``uvA`` and ``uvB``.

    Entry ``[i, j]`` is the mean of the distance from ``uvB[j]`` to the epipolar
    line of ``uvA[i]`` and from ``uvA[i]`` to the line of ``uvB[j]``.
    """
    uvA = np.atleast_2d(uvA)
    uvB = np.atleast_2d(uvB)
    hA = np.hstack([uvA, np.ones((len(uvA), 1))])
    hB = np.hstack([uvB, np.ones((len(uvB), 1))])
    lB = hA @ F.T  # lines in B, one per A pixel
    lA = hB @ F    # lines in A, one per B pixel
    nB = np.hypot(lB[:, 0], lB[:, 1])
    nA = np.hypot(lA[:, 0], lA[:, 1])
    alg = hA @ F.T @ hB.T  # xB^T F xA for every pair
    absalg = np.abs(alg)
    return 0.5 * (absalg / nB[:, None] + absalg / nA[None, :])


def epipolar_distance(camA: CameraModel, camB: CameraModel, pixA, pixB) -> float:
    """Symmetric point-to-epipolar-line distance in pixels."""
    if camA.id > camB.id:
        # one canonical F per pair, so swapping the arguments is exact
        camA, camB, pixA, pixB = camB, camA, pixB, pixA
    F = fundamental_matrix(camA, camB)
    return float(epipolar_distance_matrix(F, np.array([pixA[:2]]), np.array([pixB[:2]]))[0, 0])


def _normalizer(cam: CameraModel) -> np.ndarray:
    s = 2.0 / max(cam.image_width, cam.image_height)
    return np.array([[s, 0.0, -s * cam.cx], [0.0, s, -s * cam.cy], [0.0, 0.0, 1.0]])


def triangulate_dlt(observations: Sequence[tuple[CameraModel, object]]) -> tuple[np.ndarray, float]:
    """Linear triangulation of one point from two or more views.

    Each pixel is Hartley-normalised with its camera's image size before the
    homogeneous system is solved by SVD. Returns the point and the RMS
    reprojection residual (pixels) over all observations.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("triangulation needs at least two observations")
    if len({cam.id for cam, _ in observations}) < len(observations):
        raise DegenerateGeometry("observations must come from distinct cameras")
    rows = []
    for cam, pix in observations:
        T = _normalizer(cam)
        P = T @ cam.P
        x = T @ np.array([pix[0], pix[1], 1.0])
        r1 = x[0] * P[2] - P[0]
        r2 = x[1] * P[2] - P[1]
        rows.append(r1 / np.linalg.norm(r1))
        rows.append(r2 / np.linalg.norm(r2))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] - s[-1] < 1e-12 * s[0]:
        raise DegenerateGeometry("DLT system has no unique null vector")
    X = vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X):
        raise DegenerateGeometry("triangulated point is at infinity")
    X = X[:3] / X[3]
    sq = []
    for cam, pix in observations:
        uv, depth = cam.project_points(X[None])
        if not depth[0] > BEHIND_DEPTH:
            sq.append(np.inf)
        else:
            sq.append((uv[0, 0] - pix[0]) ** 2 + (uv[0, 1] - pix[1]) ** 2)
    return X, float(np.sqrt(np.mean(sq)))


def dlt_rows(cam: CameraModel, uv: np.ndarray) -> np.ndarray:
    """Normalised DLT rows ``(N, 2, 4)`` contributed by pixels ``uv`` of one camera."""
    uv = np.atleast_2d(uv)
    T = _normalizer(cam)
    P = T @ cam.P
    x = uv[:, 0] * T[0, 0] + T[0, 2]
    y = uv[:, 1] * T[1, 1] + T[1, 2]
    r1 = x[:, None] * P[2] - P[0]
    r2 = y[:, None] * P[2] - P[1]
    rows = np.stack([r1, r2], axis=1)
    return rows / np.linalg.norm(rows, axis=2, keepdims=True)


def solve_dlt(A: np.ndarray) -> np.ndarray:
    """Batched homogeneous solve of ``(N, k, 4)`` systems; returns ``(N, 3)``.

    The solution is the eigenvector of ``A^T A`` with the smallest eigenvalue,
    i.e. the smallest right singular vector of ``A``.
    """
    if len(A) == 0:
        return np.zeros((0, 3))
    M = np.einsum("nki,nkj->nij", A, A)
    _, vecs = np.linalg.eigh(M)
    X = vecs[:, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def triangulate_pairs(camA: CameraModel, camB: CameraModel,
                      uvA: np.ndarray, uvB: np.ndarray) -> np.ndarray:
    """Batched two-view DLT for row-aligned pixel arrays; returns ``(N, 3)``."""
    if len(np.atleast_2d(uvA)) == 0 or np.size(uvA) == 0:
        return np.zeros((0, 3))
    return solve_dlt(np.concatenate([dlt_rows(camA, uvA), dlt_rows(camB, uvB)], axis=1))


def trifocal_check(camA: CameraModel, camB: CameraModel, camC: CameraModel,
                   pixA, pixB, active_pixels_C, tol: float = 3.0) -> bool:
    """Whether the A/B match reprojects into C within ``tol`` of an active pixel."""
    if len({camA.id, camB.id, camC.id}) < 3:
        raise ValueError("trifocal_check needs three distinct cameras")
    if tol <= 0:
        raise ValueError("tol must be positive")
    X, _ = triangulate_dlt([(camA, pixA), (camB, pixB)])
    active = np.array([[p[0], p[1]] for p in active_pixels_C], dtype=float).reshape(-1, 2)
    if len(active) == 0:
        return False
    uv, depth = camC.project_points(X[None])
    if not depth[0] > BEHIND_DEPTH:
        return False
    return bool(np.min(np.hypot(*(active - uv[0]).T)) <= tol)
