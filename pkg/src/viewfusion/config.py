"""Experiment configuration: YAML serialization, validation, content hashing.

The canonical serialized form (sorted keys, plain scalars) is the identity of
an experiment: its SHA-256 prefix is embedded in every output file so any
result can be traced back to the exact configuration and seed that produced it.
Serialization and parsing are exact inverses on the canonical form.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import CameraModel, GroundGrid
from .model import ModelConfig
from .optim import OptimizerConfig
from .scene import CalibNoise, Occluder, RenderConfig, SceneConfig
from .train import AdaptConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    threshold: float = 0.4
    nms_radius_cells: float = 2.0
    t_cells: float = 4.0
    t_meters: float | None = None
    view_counts: list[int] = field(default_factory=lambda: [3, 5])
    resamples: int = 5


@dataclass
class ExperimentConfig:
    scene: SceneConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adapt: AdaptConfig | None = None
    n_train_frames: int = 50
    n_val_frames: int = 20
    output_dir: str = "out"
    seed: int = 0

    def validate(self) -> None:
        self.scene.validate()
        self.model.validate()
        self.train.validate(len(self.scene.cameras))
        if self.adapt is not None:
            self.adapt.validate()
        if self.n_train_frames < 1 or self.n_val_frames < 1:
            raise ConfigError("frame counts must be >= 1")


# ---------------------------------------------------------------------------
# to plain dicts


def _grid_to_dict(g: GroundGrid) -> dict:
    return {"width_cells": g.width_cells, "height_cells": g.height_cells,
            "cell_size_m": float(g.cell_size_m),
            "origin_m": [float(g.origin_m[0]), float(g.origin_m[1])]}


def _camera_to_dict(c: CameraModel) -> dict:
    return {"intrinsics": [float(v) for v in c.intrinsics.ravel()],
            "rotation": [float(v) for v in c.rotation.ravel()],
            "translation": [float(v) for v in c.translation],
            "image_size": [int(c.image_size[0]), int(c.image_size[1])]}


def _scene_to_dict(s: SceneConfig) -> dict:
    d = {
        "grid": _grid_to_dict(s.grid),
        "cameras": [_camera_to_dict(c) for c in s.cameras],
        "people_count_range": [int(s.people_count_range[0]), int(s.people_count_range[1])],
        "min_separation_m": float(s.min_separation_m),
        "person_height_m": float(s.person_height_m),
        "render": {
            "image_size": [int(s.render.image_size[0]), int(s.render.image_size[1])],
            "blob_base_radius_px": float(s.render.blob_base_radius_px),
            "occlusion": bool(s.render.occlusion),
            "noise_level": float(s.render.noise_level),
            "occluders": [{"x_m": float(o.x_m), "y_m": float(o.y_m),
                           "radius_m": float(o.radius_m), "height_m": float(o.height_m)}
                          for o in s.render.occluders],
            "occluder_intensity": float(s.render.occluder_intensity),
        },
        "calib_noise": None if s.calib_noise is None else {
            "rotation_deg_sigma": float(s.calib_noise.rotation_deg_sigma),
            "translation_m_sigma": float(s.calib_noise.translation_m_sigma)},
        "gt_sigma_cells": float(s.gt_sigma_cells),
        "seed": int(s.seed),
    }
    return d


def _simple_to_dict(obj) -> dict:
    out = {}
    for k, v in obj.__dict__.items():
        if isinstance(v, OptimizerConfig):
            out[k] = _simple_to_dict(v)
        elif isinstance(v, (list, tuple)):
            out[k] = [float(x) if isinstance(x, float) else int(x) for x in v]
        elif isinstance(v, (np.floating, float)):
            out[k] = float(v)
        elif isinstance(v, (np.integer, int)) and not isinstance(v, bool):
            out[k] = int(v)
        else:
            out[k] = v
    return out


def to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "scene": _scene_to_dict(cfg.scene),
        "model": _simple_to_dict(cfg.model),
        "train": _simple_to_dict(cfg.train),
        "eval": _simple_to_dict(cfg.eval),
        "adapt": None if cfg.adapt is None else _simple_to_dict(cfg.adapt),
        "n_train_frames": int(cfg.n_train_frames),
        "n_val_frames": int(cfg.n_val_frames),
        "output_dir": str(cfg.output_dir),
        "seed": int(cfg.seed),
    }


# ---------------------------------------------------------------------------
# from plain dicts


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing required field '{key}'")
    return d[key]


def _grid_from_dict(d: dict) -> GroundGrid:
    return GroundGrid(width_cells=int(_require(d, "width_cells", "grid")),
                      height_cells=int(_require(d, "height_cells", "grid")),
                      cell_size_m=float(_require(d, "cell_size_m", "grid")),
                      origin_m=tuple(float(v) for v in d.get("origin_m", [0.0, 0.0])))


def _camera_from_dict(d: dict, i: int) -> CameraModel:
    try:
        return CameraModel(
            intrinsics=np.array(_require(d, "intrinsics", f"camera {i}"), dtype=np.float64).reshape(3, 3),
            rotation=np.array(_require(d, "rotation", f"camera {i}"), dtype=np.float64).reshape(3, 3),
            translation=np.array(_require(d, "translation", f"camera {i}"), dtype=np.float64),
            image_size=tuple(int(v) for v in _require(d, "image_size", f"camera {i}")))
    except ValueError as e:
        raise ConfigError(f"camera {i}: {e}") from e


def _scene_from_dict(d: dict) -> SceneConfig:
    r = d.get("render", {})
    render = RenderConfig(
        image_size=tuple(int(v) for v in r.get("image_size", (64, 64))),
        blob_base_radius_px=float(r.get("blob_base_radius_px", 24.0)),
        occlusion=bool(r.get("occlusion", True)),
        noise_level=float(r.get("noise_level", 0.02)),
        occluders=tuple(Occluder(**{k: float(v) for k, v in o.items()})
                        for o in r.get("occluders", [])),
        occluder_intensity=float(r.get("occluder_intensity", 0.12)),
    )
    cn = d.get("calib_noise")
    calib_noise = None if cn is None else CalibNoise(
        rotation_deg_sigma=float(cn.get("rotation_deg_sigma", 0.0)),
        translation_m_sigma=float(cn.get("translation_m_sigma", 0.0)))
    return SceneConfig(
        grid=_grid_from_dict(_require(d, "grid", "scene")),
        cameras=[_camera_from_dict(c, i) for i, c in enumerate(_require(d, "cameras", "scene"))],
        people_count_range=tuple(int(v) for v in d.get("people_count_range", (5, 15))),
        min_separation_m=float(d.get("min_separation_m", 0.5)),
        person_height_m=float(d.get("person_height_m", 1.7)),
        render=render, calib_noise=calib_noise,
        gt_sigma_cells=float(d.get("gt_sigma_cells", 2.0)),
        seed=int(d.get("seed", 0)))


def _dataclass_from_dict(cls, d: dict, where: str):
    known = {f for f in cls().__dict__}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    kwargs = dict(d)
    if "optimizer" in kwargs and isinstance(kwargs["optimizer"], dict):
        kwargs["optimizer"] = OptimizerConfig(**kwargs["optimizer"])
    return cls(**kwargs)


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be a mapping")
    cfg = ExperimentConfig(
        scene=_scene_from_dict(_require(d, "scene", "experiment")),
        model=_dataclass_from_dict(ModelConfig, d.get("model", {}), "model"),
        train=_dataclass_from_dict(TrainConfig, d.get("train", {}), "train"),
        eval=_dataclass_from_dict(EvalConfig, d.get("eval", {}), "eval"),
        adapt=None if d.get("adapt") is None
        else _dataclass_from_dict(AdaptConfig, d["adapt"], "adapt"),
        n_train_frames=int(d.get("n_train_frames", 50)),
        n_val_frames=int(d.get("n_val_frames", 20)),
        output_dir=str(d.get("output_dir", "out")),
        seed=int(d.get("seed", 0)))
    return cfg


# ---------------------------------------------------------------------------
# YAML and hashing


def to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def from_yaml(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    return from_dict(data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return from_yaml(path.read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(to_yaml(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_yaml(cfg).encode("utf-8")).hexdigest()[:12]
