"""Camera calibration, ground-plane homographies and field-of-view masks.

Conventions:
  - world: x/y on the ground plane (meters), z up; the ground is z = 0.
  - camera: p_cam = R @ p_world + t; x right, y down, z forward (depth).
  - pixels: u = fx * x/z + cx (column), v = fy * y/z + cy (row); pixel centers
    sit on the integer lattice, so "inside the image" means 0 <= u <= W-1 and
    0 <= v <= H-1 (full bilinear support).
  - grid maps are arrays [height_cells, width_cells] indexed [row, col];
    continuous cell coordinates put cell centers on integers.

All objects here are immutable after construction and safe to share.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import DiffTensor, ShapeError, bilinear_sample


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class GroundGrid:
    """The scene ground-plane raster on which all maps live."""

    width_cells: int
    height_cells: int
    cell_size_m: float
    origin_m: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width_cells < 1 or self.height_cells < 1:
            raise ValueError(f"grid must have positive size, got {self.width_cells}x{self.height_cells}")
        if self.cell_size_m <= 0:
            raise ValueError(f"cell_size_m must be > 0, got {self.cell_size_m}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def extent_m(self) -> tuple[float, float]:
        return (self.width_cells * self.cell_size_m, self.height_cells * self.cell_size_m)

    def cell_to_world(self, cx, cy):
        """Continuous cell coords -> world meters; integer coords map to cell centers."""
        x = self.origin_m[0] + (np.asarray(cx, dtype=np.float64) + 0.5) * self.cell_size_m
        y = self.origin_m[1] + (np.asarray(cy, dtype=np.float64) + 0.5) * self.cell_size_m
        return x, y

    def world_to_cell(self, x, y):
        cx = (np.asarray(x, dtype=np.float64) - self.origin_m[0]) / self.cell_size_m - 0.5
        cy = (np.asarray(y, dtype=np.float64) - self.origin_m[1]) / self.cell_size_m - 0.5
        return cx, cy

    def cell_centers_world(self) -> np.ndarray:
        """[height_cells * width_cells, 2] world coords of all cell centers, row-major."""
        cy, cx = np.mgrid[0:self.height_cells, 0:self.width_cells]
        x, y = self.cell_to_world(cx.ravel(), cy.ravel())
        return np.stack([x, y], axis=1)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: intrinsics plus world-to-camera rigid pose."""

    intrinsics: np.ndarray      # 3x3, zero skew
    rotation: np.ndarray        # 3x3 orthonormal, world -> camera
    translation: np.ndarray     # 3-vector, world -> camera (meters)
    image_size: tuple[int, int]  # (W_img, H_img)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CalibrationError(f"focal lengths must be positive, got fx={K[0, 0]}, fy={K[1, 1]}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise CalibrationError("rotation matrix is not orthonormal within 1e-9")
        if abs(self.center()[2]) < 1e-9:
            raise CalibrationError("camera center lies on the ground plane z = 0")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project_points(self, pts_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points [N, 3] -> pixel coords [N, 2] and camera-frame depth [N]."""
        pts = np.asarray(pts_world, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.rotation.T + self.translation
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (cam @ self.intrinsics.T)
            uv = uv[:, :2] / uv[:, 2:3]
        return uv, depth

    def key(self) -> bytes:
        """Content hash key; cameras with identical calibration compare equal."""
        return (self.intrinsics.tobytes() + self.rotation.tobytes()
                + self.translation.tobytes() + bytes(str(self.image_size), "ascii"))

    @classmethod
    def look_at(cls, position, target, fx: float, fy: float, cx: float, cy: float,
                image_size: tuple[int, int]) -> "CameraModel":
        """Build a camera at ``position`` whose optical axis points at ``target``."""
        pos = np.asarray(position, dtype=np.float64)
        tgt = np.asarray(target, dtype=np.float64)
        fwd = tgt - pos
        norm = np.linalg.norm(fwd)
        if norm < 1e-12:
            raise CalibrationError("camera position and target coincide")
        z = fwd / norm
        up = np.array([0.0, 0.0, 1.0])
        if abs(np.dot(z, up)) > 0.999:
            up = np.array([0.0, 1.0, 0.0])  # degenerate straight-down view
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(intrinsics=K, rotation=R, translation=-R @ pos, image_size=tuple(image_size))


@dataclass(frozen=True, eq=False)
class FovMask:
    """Binary ground-grid visibility of one camera, defined at cell centers."""

    grid: GroundGrid
    mask: np.ndarray  # [height_cells, width_cells] in {0, 1}
    eroded: np.ndarray = field(default=None)  # one-cell erosion, used by the fusion model

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.shape != self.grid.shape:
            raise ShapeError(f"mask shape {m.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "mask", m.astype(np.float64))
        if self.eroded is None:
            object.__setattr__(self, "eroded", erode_mask(self.mask))

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def erode_mask(mask: np.ndarray) -> np.ndarray:
    """One-cell binary erosion (3x3 square structuring element)."""
    return ndimage.binary_erosion(mask > 0.5, structure=np.ones((3, 3)),
                                  border_value=0).astype(np.float64)


def dilate_mask(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask > 0.5, structure=np.ones((3, 3))).astype(np.float64)


def ground_to_image_homography(cam: CameraModel, grid: GroundGrid) -> np.ndarray:
    """3x3 matrix taking homogeneous cell coords (cx, cy, 1) to homogeneous pixels.

    The homogeneous scale of the result equals camera-frame depth, so callers
    can read the sign of the third row for a positive-depth test.
    """
    R, t, K = cam.rotation, cam.translation, cam.intrinsics
    h_world = K @ np.column_stack([R[:, 0], R[:, 1], t])
    cs = grid.cell_size_m
    ox, oy = grid.origin_m
    cell_to_world = np.array([[cs, 0.0, ox + 0.5 * cs],
                              [0.0, cs, oy + 0.5 * cs],
                              [0.0, 0.0, 1.0]])
    H = h_world @ cell_to_world
    if abs(np.linalg.det(H)) < 1e-15 * max(np.linalg.norm(H), 1.0) ** 3:
        raise CalibrationError("singular ground-to-image homography (camera center on the plane?)")
    return H


def fov_mask(cam: CameraModel, grid: GroundGrid) -> FovMask:
    """Per-cell visibility: cell center projects inside image bounds at positive depth."""
    centers = grid.cell_centers_world()
    pts = np.column_stack([centers, np.zeros(len(centers))])
    uv, depth = cam.project_points(pts)
    w_img, h_img = cam.image_size
    ok = (depth > 1e-9) & (uv[:, 0] >= 0) & (uv[:, 0] <= w_img - 1) \
        & (uv[:, 1] >= 0) & (uv[:, 1] <= h_img - 1)
    mask = ok.reshape(grid.shape).astype(np.float64)
    fm = FovMask(grid=grid, mask=mask)
    if fm.coverage == 0.0:
        import warnings
        warnings.warn("camera field-of-view mask is empty", stacklevel=2)
    return fm


def projection_grid(cam: CameraModel, grid: GroundGrid, feature_stride: int,
                    feature_shape: tuple[int, int]) -> np.ndarray:
    """Sampling grid [height_cells, width_cells, 2] in feature-map pixel coords.

    Cells behind the camera get coordinates far outside the source so bilinear
    sampling returns exactly 0 for them.
    """
    w_img, h_img = cam.image_size
    hf, wf = feature_shape
    if hf * feature_stride != h_img or wf * feature_stride != w_img:
        raise ShapeError(f"feature shape {feature_shape} x stride {feature_stride} "
                         f"does not match image size {(h_img, w_img)}")
    H = ground_to_image_homography(cam, grid)
    cy, cx = np.mgrid[0:grid.height_cells, 0:grid.width_cells]
    ones = np.ones_like(cx, dtype=np.float64)
    pts = np.stack([cx.astype(np.float64), cy.astype(np.float64), ones])
    proj = np.tensordot(H, pts, axes=1)  # [3, Hc, Wc]
    depth = proj[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = proj[0] / depth
        v = proj[1] / depth
    # pooled feature pixel i covers image pixels [stride*i, stride*i + stride),
    # centered at stride*i + (stride-1)/2
    half = (feature_stride - 1) / 2.0
    gu = (u - half) / feature_stride
    gv = (v - half) / feature_stride
    bad = ~(depth > 1e-9)
    gu = np.where(bad, -1e6, gu)
    gv = np.where(bad, -1e6, gv)
    return np.stack([gu, gv], axis=-1)


def project_with_grid(view_map: DiffTensor, sample_grid: np.ndarray) -> DiffTensor:
    """Resample a feature map onto the ground grid with a precomputed sampling grid."""
    return bilinear_sample(view_map, sample_grid)


def project_to_ground(view_map: DiffTensor, cam: CameraModel, grid: GroundGrid,
                      feature_stride: int) -> DiffTensor:
    """Warp an image-plane feature map [C, H_f, W_f] onto the ground grid.

    Each ground cell center samples the view map at its homography image, in
    feature-map pixels; cells outside the image or behind the camera read 0.
    Differentiable w.r.t. ``view_map``.
    """
    if view_map.values.ndim != 3:
        raise ShapeError(f"project_to_ground: expected [C, H_f, W_f], got {view_map.shape}")
    sample_grid = projection_grid(cam, grid, feature_stride, view_map.values.shape[1:])
    return project_with_grid(view_map, sample_grid)
