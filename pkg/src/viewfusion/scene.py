"""Synthetic multi-camera crowd scenes and dataset import/export.

A frame is rendered with deliberately crude graphics (gaussian blobs, painter
occlusion): the mechanism under test is fusion geometry, not photometry.

Seeding rule (documented): dataset seed S derives independent substreams via
numpy SeedSequence entropy tuples: calibration noise uses (S, 0), frame i uses
(S, 1, i).  Dataset generation is a pure function of (config, seed).

Dataset directory layout (versioned, see also README):

    calibration.yaml          grid, gt sigma, per-camera calibration
    frames/<id>/view<k>.pgm   8-bit PGM images, value = round(pixel * 255)
    frames/<id>/annotations.csv   header x_m,y_m then one row per person
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import CameraModel, FovMask, GroundGrid, fov_mask
from .pgm import read_pgm, write_pgm

DATASET_FORMAT_VERSION = 1


class PlacementError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Occluder:
    """Static opaque cylinder standing on the ground."""

    x_m: float
    y_m: float
    radius_m: float
    height_m: float


@dataclass(frozen=True)
class RenderConfig:
    image_size: tuple[int, int] = (64, 64)   # (W_img, H_img)
    blob_base_radius_px: float = 24.0        # blob radius = base * person_height / depth
    occlusion: bool = True
    noise_level: float = 0.02                # additive uniform noise in [0, noise_level]
    occluders: tuple[Occluder, ...] = ()
    occluder_intensity: float = 0.12


@dataclass(frozen=True)
class CalibNoise:
    rotation_deg_sigma: float = 0.0
    translation_m_sigma: float = 0.0


@dataclass
class SceneConfig:
    grid: GroundGrid
    cameras: list[CameraModel]
    people_count_range: tuple[int, int] = (5, 15)
    min_separation_m: float = 0.5
    person_height_m: float = 1.7
    render: RenderConfig = field(default_factory=RenderConfig)
    calib_noise: CalibNoise | None = None
    gt_sigma_cells: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.people_count_range
        if lo > hi or lo < 0:
            raise ValueError(f"invalid people_count_range {self.people_count_range}")
        if self.min_separation_m <= 0:
            raise ValueError("min_separation_m must be > 0")
        if len(self.cameras) < 2:
            raise ValueError(f"need >= 2 cameras, got {len(self.cameras)}")
        if self.gt_sigma_cells <= 0:
            raise ValueError("gt_sigma_cells must be > 0")
        w, h = self.render.image_size
        if w % 2 or h % 2:
            raise ValueError(f"image size must be even for the stride-2 extractor, got {w}x{h}")
        area = self.grid.extent_m[0] * self.grid.extent_m[1]
        # loose disk-packing bound: refuse configs that cannot host max count
        need = hi * np.pi * (self.min_separation_m / 2.0) ** 2 * 0.8
        if need > area:
            raise ValueError(f"grid area {area:.1f} m^2 cannot host {hi} people "
                             f"at min separation {self.min_separation_m} m")


@dataclass
class MultiViewFrame:
    images: list[np.ndarray]          # per view, [1, H_img, W_img] floats in [0, 1]
    people_world: np.ndarray          # [n_people, 2] ground coordinates (meters)
    scene_gt: np.ndarray              # [height_cells, width_cells]
    view_gts: list[np.ndarray]        # scene_gt * masks[i].mask, exactly
    masks: list[FovMask]              # true-camera visibility (shared across frames)
    cameras: list[CameraModel]        # render-side cameras
    model_cameras: list[CameraModel]  # projection cameras seen by the model
    model_masks: list[FovMask]        # visibility under model_cameras
    clean_images: list[np.ndarray] | None = None  # noise-free renders (generated data only)

    @property
    def n_views(self) -> int:
        return len(self.images)


@dataclass
class SimDataset:
    grid: GroundGrid
    cameras: list[CameraModel]
    model_cameras: list[CameraModel]
    masks: list[FovMask]
    model_masks: list[FovMask]
    frames: list[MultiViewFrame]
    gt_sigma_cells: float
    seed: int | None = None
    cfg: SceneConfig | None = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def n_views(self) -> int:
        return len(self.cameras)


# ---------------------------------------------------------------------------
# people and ground truth


def sample_people(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform rejection sampling of people positions with a minimum separation."""
    lo, hi = cfg.people_count_range
    count = int(rng.integers(lo, hi + 1))
    if count == 0:
        return np.zeros((0, 2))
    ox, oy = cfg.grid.origin_m
    ex, ey = cfg.grid.extent_m
    pts: list[np.ndarray] = []
    attempts = 0
    limit = 200 * count
    min_sq = cfg.min_separation_m ** 2
    while len(pts) < count:
        if attempts >= limit:
            raise PlacementError(
                f"placed only {len(pts)}/{count} people after {limit} attempts; "
                "lower the density (fewer people or smaller min_separation_m)")
        attempts += 1
        p = np.array([ox + rng.uniform(0, ex), oy + rng.uniform(0, ey)])
        if all(np.sum((p - q) ** 2) >= min_sq for q in pts):
            pts.append(p)
    return np.stack(pts)


def make_scene_gt(people: np.ndarray, grid: GroundGrid, kernel_sigma_cells: float) -> np.ndarray:
    """Sum of unit-peak isotropic gaussians at people's cell positions, truncated at 4 sigma."""
    if kernel_sigma_cells <= 0:
        raise ValueError("kernel_sigma_cells must be > 0")
    gt = np.zeros(grid.shape)
    if len(people) == 0:
        return gt
    reach = int(np.ceil(4.0 * kernel_sigma_cells))
    h, w = grid.shape
    for x_m, y_m in np.asarray(people, dtype=np.float64).reshape(-1, 2):
        cx, cy = grid.world_to_cell(x_m, y_m)
        cx, cy = float(cx), float(cy)
        if not (-0.5 <= cx <= w - 0.5 and -0.5 <= cy <= h - 0.5):
            warnings.warn(f"person at ({x_m:.2f}, {y_m:.2f}) m is outside the grid; skipped",
                          stacklevel=2)
            continue
        r0, r1 = max(0, int(np.floor(cy)) - reach), min(h, int(np.ceil(cy)) + reach + 1)
        c0, c1 = max(0, int(np.floor(cx)) - reach), min(w, int(np.ceil(cx)) + reach + 1)
        rr, cc = np.mgrid[r0:r1, c0:c1]
        d2 = (cc - cx) ** 2 + (rr - cy) ** 2
        patch = np.exp(-d2 / (2.0 * kernel_sigma_cells ** 2))
        patch[d2 > (4.0 * kernel_sigma_cells) ** 2] = 0.0
        gt[r0:r1, c0:c1] += patch
    return gt


# ---------------------------------------------------------------------------
# rendering


def _blob_patch(canvas: np.ndarray, u: float, v: float, radius: float,
                peak: float, overwrite: bool) -> None:
    h, w = canvas.shape
    r = int(np.ceil(radius))
    c0, c1 = int(np.floor(u)) - r, int(np.floor(u)) + r + 1
    r0, r1 = int(np.floor(v)) - r, int(np.floor(v)) + r + 1
    c0, c1 = max(0, c0), min(w, c1)
    r0, r1 = max(0, r0), min(h, r1)
    if c0 >= c1 or r0 >= r1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    d2 = (cc - u) ** 2 + (rr - v) ** 2
    inside = d2 <= radius ** 2
    vals = peak * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
    if overwrite:
        canvas[r0:r1, c0:c1][inside] = vals[inside]
    else:
        np.maximum(canvas[r0:r1, c0:c1], np.where(inside, vals, 0.0), out=canvas[r0:r1, c0:c1])


def _box_patch(canvas: np.ndarray, u0: float, u1: float, v0: float, v1: float,
               value: float, overwrite: bool) -> None:
    h, w = canvas.shape
    c0, c1 = max(0, int(np.floor(u0))), min(w, int(np.ceil(u1)) + 1)
    r0, r1 = max(0, int(np.floor(v0))), min(h, int(np.ceil(v1)) + 1)
    if c0 >= c1 or r0 >= r1:
        return
    if overwrite:
        canvas[r0:r1, c0:c1] = value
    else:
        np.maximum(canvas[r0:r1, c0:c1], value, out=canvas[r0:r1, c0:c1])


def render_view(people: np.ndarray, cam: CameraModel, cfg: SceneConfig,
                rng: np.random.Generator | None) -> np.ndarray:
    """Render one camera view: people as gaussian blobs, occluders as dark boxes.

    With occlusion on, items are painted far-to-near and nearer footprints
    overwrite farther ones.  Pass rng=None for a noise-free render.
    """
    w_img, h_img = cam.image_size
    canvas = np.zeros((h_img, w_img))
    render = cfg.render
    items = []  # (depth, kind, payload)
    people = np.asarray(people, dtype=np.float64).reshape(-1, 2)
    if len(people):
        pts = np.column_stack([people, np.zeros(len(people))])
        uv, depth = cam.project_points(pts)
        for (u, v), d in zip(uv, depth):
            if d <= 0.1:
                continue
            radius = float(np.clip(render.blob_base_radius_px * cfg.person_height_m / d,
                                   1.0, min(w_img, h_img) / 3.0))
            items.append((float(d), "person", (float(u), float(v), radius)))
    for occ in render.occluders:
        foot = np.array([[occ.x_m, occ.y_m, 0.0]])
        head = np.array([[occ.x_m, occ.y_m, occ.height_m]])
        (u_f, v_f), d = cam.project_points(foot)[0][0], cam.project_points(foot)[1][0]
        (u_h, v_h), _ = cam.project_points(head)[0][0], cam.project_points(head)[1][0]
        if d <= 0.1:
            continue
        half_w = cam.intrinsics[0, 0] * occ.radius_m / d
        items.append((float(d), "occluder",
                      (float(min(u_f, u_h) - half_w), float(max(u_f, u_h) + half_w),
                       float(min(v_f, v_h)), float(max(v_f, v_h)))))

    items.sort(key=lambda it: -it[0])  # far first
    for _, kind, payload in items:
        if kind == "person":
            u, v, radius = payload
            _blob_patch(canvas, u, v, radius, peak=1.0, overwrite=render.occlusion)
        else:
            u0, u1, v0, v1 = payload
            _box_patch(canvas, u0, u1, v0, v1, render.occluder_intensity,
                       overwrite=render.occlusion)

    if rng is not None and render.noise_level > 0:
        canvas = canvas + rng.uniform(0.0, render.noise_level, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)[None]


# ---------------------------------------------------------------------------
# frame and dataset generation


def perturb_camera(cam: CameraModel, noise: CalibNoise, rng: np.random.Generator) -> CameraModel:
    """Apply a small random rotation and translation offset to a camera pose."""
    rx, ry, rz = np.deg2rad(rng.normal(0.0, noise.rotation_deg_sigma, size=3))
    Rx = np.array([[1, 0, 0], [0, np.cos(rx), -np.sin(rx)], [0, np.sin(rx), np.cos(rx)]])
    Ry = np.array([[np.cos(ry), 0, np.sin(ry)], [0, 1, 0], [-np.sin(ry), 0, np.cos(ry)]])
    Rz = np.array([[np.cos(rz), -np.sin(rz), 0], [np.sin(rz), np.cos(rz), 0], [0, 0, 1]])
    dR = Rx @ Ry @ Rz
    dt = rng.normal(0.0, noise.translation_m_sigma, size=3)
    return CameraModel(intrinsics=cam.intrinsics.copy(),
                       rotation=dR @ cam.rotation,
                       translation=cam.translation + dt,
                       image_size=cam.image_size)


def _frame_from_people(people: np.ndarray, cfg: SceneConfig,
                       masks: list[FovMask], model_cams: list[CameraModel],
                       model_masks: list[FovMask],
                       rng: np.random.Generator | None) -> MultiViewFrame:
    scene_gt = make_scene_gt(people, cfg.grid, cfg.gt_sigma_cells)
    view_gts = [scene_gt * m.mask for m in masks]
    images = [render_view(people, cam, cfg, rng) for cam in cfg.cameras]
    clean = [render_view(people, cam, cfg, None) for cam in cfg.cameras]
    return MultiViewFrame(images=images, people_world=people, scene_gt=scene_gt,
                          view_gts=view_gts, masks=masks, cameras=cfg.cameras,
                          model_cameras=model_cams, model_masks=model_masks,
                          clean_images=clean)


def generate_frame(cfg: SceneConfig, rng: np.random.Generator,
                   masks: list[FovMask] | None = None,
                   model_cams: list[CameraModel] | None = None,
                   model_masks: list[FovMask] | None = None) -> MultiViewFrame:
    cfg.validate()
    if masks is None:
        masks = [fov_mask(c, cfg.grid) for c in cfg.cameras]
    if model_cams is None:
        model_cams = cfg.cameras
    if model_masks is None:
        model_masks = masks if model_cams is cfg.cameras else [fov_mask(c, cfg.grid) for c in model_cams]
    people = sample_people(cfg, rng)
    return _frame_from_people(people, cfg, masks, model_cams, model_masks, rng)


def generate_dataset(cfg: SceneConfig, n_frames: int, seed: int) -> SimDataset:
    """Deterministic dataset generation; see the module docstring for the seeding rule."""
    cfg.validate()
    masks = [fov_mask(c, cfg.grid) for c in cfg.cameras]
    if cfg.calib_noise is not None and (cfg.calib_noise.rotation_deg_sigma > 0
                                        or cfg.calib_noise.translation_m_sigma > 0):
        calib_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        model_cams = [perturb_camera(c, cfg.calib_noise, calib_rng) for c in cfg.cameras]
        model_masks = [fov_mask(c, cfg.grid) for c in model_cams]
    else:
        model_cams = cfg.cameras
        model_masks = masks
    frames = []
    for i in range(n_frames):
        rng_i = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        frames.append(generate_frame(cfg, rng_i, masks, model_cams, model_masks))
    return SimDataset(grid=cfg.grid, cameras=list(cfg.cameras), model_cameras=model_cams,
                      masks=masks, model_masks=model_masks, frames=frames,
                      gt_sigma_cells=cfg.gt_sigma_cells, seed=seed, cfg=cfg)


# ---------------------------------------------------------------------------
# on-disk datasets


def _camera_to_dict(cam: CameraModel) -> dict:
    return {
        "intrinsics": [float(v) for v in cam.intrinsics.ravel()],
        "rotation": [float(v) for v in cam.rotation.ravel()],
        "translation": [float(v) for v in cam.translation],
        "image_size": [int(cam.image_size[0]), int(cam.image_size[1])],
    }


def _camera_from_dict(d: dict, index: int) -> CameraModel:
    for key, n in (("intrinsics", 9), ("rotation", 9), ("translation", 3), ("image_size", 2)):
        if key not in d:
            raise DatasetError(f"calibration camera {index}: missing field '{key}'")
        if len(d[key]) != n:
            raise DatasetError(f"calibration camera {index}: field '{key}' has "
                               f"{len(d[key])} values, expected {n}")
    try:
        return CameraModel(intrinsics=np.array(d["intrinsics"], dtype=np.float64).reshape(3, 3),
                           rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                           translation=np.array(d["translation"], dtype=np.float64),
                           image_size=(int(d["image_size"][0]), int(d["image_size"][1])))
    except ValueError as e:
        raise DatasetError(f"calibration camera {index}: {e}") from e


def export_dataset(ds: SimDataset, root: str | Path) -> Path:
    """Write a dataset in the documented directory layout; deterministic bytes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    calib = {
        "format_version": DATASET_FORMAT_VERSION,
        "grid": {
            "width_cells": ds.grid.width_cells,
            "height_cells": ds.grid.height_cells,
            "cell_size_m": float(ds.grid.cell_size_m),
            "origin_m": [float(ds.grid.origin_m[0]), float(ds.grid.origin_m[1])],
        },
        "gt_sigma_cells": float(ds.gt_sigma_cells),
        "cameras": [_camera_to_dict(c) for c in ds.cameras],
    }
    with open(root / "calibration.yaml", "w") as f:
        yaml.safe_dump(calib, f, sort_keys=True)
    for i, frame in enumerate(ds.frames):
        fdir = root / "frames" / f"{i:06d}"
        fdir.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(frame.images):
            write_pgm(fdir / f"view{k}.pgm", img[0])
        with open(fdir / "annotations.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["x_m", "y_m"])
            for x, y in frame.people_world:
                wr.writerow([repr(float(x)), repr(float(y))])
    return root


def load_external_dataset(root: str | Path) -> SimDataset:
    """Load a dataset from the documented layout, rebuilding GT maps and masks."""
    root = Path(root)
    calib_path = root / "calibration.yaml"
    if not calib_path.exists():
        raise DatasetError(f"missing calibration file: {calib_path}")
    try:
        calib = yaml.safe_load(calib_path.read_text())
    except yaml.YAMLError as e:
        raise DatasetError(f"{calib_path}: invalid YAML: {e}") from e
    if not isinstance(calib, dict) or "grid" not in calib or "cameras" not in calib:
        raise DatasetError(f"{calib_path}: expected mapping with 'grid' and 'cameras'")
    g = calib["grid"]
    try:
        grid = GroundGrid(width_cells=int(g["width_cells"]), height_cells=int(g["height_cells"]),
                          cell_size_m=float(g["cell_size_m"]),
                          origin_m=(float(g["origin_m"][0]), float(g["origin_m"][1])))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{calib_path}: bad grid section: {e}") from e
    sigma = float(calib.get("gt_sigma_cells", 2.0))
    cameras = [_camera_from_dict(d, i) for i, d in enumerate(calib["cameras"])]
    masks = [fov_mask(c, grid) for c in cameras]

    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise DatasetError(f"missing frames directory: {frames_dir}")
    frames = []
    for fdir in sorted(frames_dir.iterdir()):
        if not fdir.is_dir():
            continue
        images = []
        for k in range(len(cameras)):
            img_path = fdir / f"view{k}.pgm"
            if not img_path.exists():
                raise DatasetError(f"{fdir.name}: missing image for camera {k}: {img_path}")
            images.append(read_pgm(img_path)[None])
        ann_path = fdir / "annotations.csv"
        if not ann_path.exists():
            raise DatasetError(f"{fdir.name}: missing annotations file: {ann_path}")
        people = []
        with open(ann_path, newline="") as f:
            rows = list(csv.reader(f))
        for r, row in enumerate(rows):
            if not row or row[0].strip() == "x_m":
                continue
            try:
                people.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as e:
                raise DatasetError(f"{ann_path}: row {r}: {e}") from e
        people_arr = np.array(people, dtype=np.float64).reshape(-1, 2)
        scene_gt = make_scene_gt(people_arr, grid, sigma)
        frames.append(MultiViewFrame(
            images=images, people_world=people_arr, scene_gt=scene_gt,
            view_gts=[scene_gt * m.mask for m in masks], masks=masks,
            cameras=cameras, model_cameras=cameras, model_masks=masks))
    return SimDataset(grid=grid, cameras=cameras, model_cameras=cameras, masks=masks,
                      model_masks=masks, frames=frames, gt_sigma_cells=sigma)
