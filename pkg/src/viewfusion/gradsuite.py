"""Finite-difference verification of every differentiable operation and of the
end-to-end training loss on a tiny two-camera frame.

Random inputs are kept away from relu kinks (|x| >= 0.1 with h = 1e-4) so the
central-difference reference is valid.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, GradCheckReport, grad_check
from .geometry import CameraModel, GroundGrid
from .model import ModelConfig, forward, frame_losses, init_model_params
from .scene import RenderConfig, SceneConfig, generate_frame

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _off_kink(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform magnitudes in [0.1, 1.1] with random signs: clear of relu kinks."""
    return rng.uniform(0.1, 1.1, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.3, 1.3, size=shape)


def op_level_checks(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    results: list[tuple[str, GradCheckReport]] = []

    def check(name, build_loss, params, tolerance=OP_TOLERANCE):
        results.append((name, grad_check(build_loss, params, h=1e-4, tolerance=tolerance)))

    a = DiffTensor.param(_off_kink(rng, (2, 3, 3)), name="a")
    b = DiffTensor.param(_off_kink(rng, (2, 3, 3)), name="b")
    pos = DiffTensor.param(_positive(rng, (2, 3, 3)), name="pos")

    check("add", lambda p: ad.sum_all(ad.add(p["a"], p["b"])), {"a": a, "b": b})
    check("sub", lambda p: ad.sum_all(ad.sub(p["a"], p["b"])), {"a": a, "b": b})
    check("elementwise_mul", lambda p: ad.sum_all(ad.elementwise_mul(p["a"], p["b"])),
          {"a": a, "b": b})
    check("div", lambda p: ad.sum_all(ad.div(p["a"], p["pos"])), {"a": a, "pos": pos})
    check("scalar_mul", lambda p: ad.sum_all(ad.scalar_mul(p["a"], 1.7)), {"a": a})
    check("add_scalar", lambda p: ad.sum_all(ad.add_scalar(p["a"], -0.4)), {"a": a})
    check("relu", lambda p: ad.sum_all(ad.relu(p["a"])), {"a": a})
    check("softplus", lambda p: ad.sum_all(ad.softplus(p["a"])), {"a": a})
    check("sum_all", lambda p: ad.sum_all(p["a"]), {"a": a})
    check("mean_all", lambda p: ad.mean_all(p["a"]), {"a": a})
    check("mean_per_sample",
          lambda p: ad.sum_all(ad.mean_per_sample(p["a"])), {"a": a})
    check("sum_over_views",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.sum_over_views([p["a"], p["b"], p["a"]]),
                                                  p["pos"])),
          {"a": a, "b": b, "pos": pos})
    check("sum_axis0",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.sum_axis0(p["a"]),
                                                  ad.sum_axis0(p["b"]))),
          {"a": a, "b": b})
    check("tile_axis0",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.tile_axis0(p["a"], 3),
                                                  DiffTensor.const(_off_kink(rng, (3, 2, 3, 3))))),
          {"a": a})

    one_ch = DiffTensor.param(_off_kink(rng, (2, 1, 4, 4)), name="one_ch")
    check("tile_channels",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.tile_channels(p["one_ch"], 3),
                                                  DiffTensor.const(_off_kink(rng, (2, 3, 4, 4))))),
          {"one_ch": one_ch})

    check("stack_views",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.stack_views([p["a"], p["b"]]),
                                                  DiffTensor.const(_off_kink(rng, (2, 2, 3, 3))))),
          {"a": a, "b": b})

    def unstack_loss(p):
        parts = ad.unstack_views(p["a"])
        return ad.sum_all(ad.elementwise_mul(parts[0], parts[1]))

    check("unstack_views", unstack_loss, {"a": a})

    chw = DiffTensor.param(_off_kink(rng, (2, 4, 4)), name="chw")
    check("expand_batch_dim",
          lambda p: ad.mean_all(ad.expand_batch_dim(p["chw"])), {"chw": chw})

    x = DiffTensor.param(_off_kink(rng, (2, 6, 6)), name="x")
    k = DiffTensor.param(_off_kink(rng, (3, 2, 3, 3)) * 0.5, name="k")
    bias = DiffTensor.param(_off_kink(rng, (3,)), name="bias")
    check("conv2d",
          lambda p: ad.sum_all(ad.conv2d(p["x"], p["k"], p["bias"], padding=1)),
          {"x": x, "k": k, "bias": bias})
    xb = DiffTensor.param(_off_kink(rng, (2, 2, 5, 5)), name="xb")
    check("conv2d_batched",
          lambda p: ad.sum_all(ad.conv2d(p["xb"], p["k"], p["bias"], padding=0)),
          {"xb": xb, "k": k, "bias": bias})

    pool_in = DiffTensor.param(_off_kink(rng, (2, 4, 6)), name="pool_in")
    check("avg_pool2",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.avg_pool2(p["pool_in"]),
                                                  DiffTensor.const(_off_kink(rng, (2, 2, 3))))),
          {"pool_in": pool_in})

    img = DiffTensor.param(_off_kink(rng, (2, 5, 5)), name="img")
    grid = rng.uniform(-0.8, 4.8, size=(3, 4, 2))  # includes out-of-bounds samples
    check("bilinear_sample",
          lambda p: ad.sum_all(ad.elementwise_mul(ad.bilinear_sample(p["img"], grid),
                                                  DiffTensor.const(_off_kink(rng, (2, 3, 4))))),
          {"img": img})

    t = DiffTensor.const(_off_kink(rng, (2, 3, 3)))
    check("mse", lambda p: ad.mse(p["a"], t), {"a": a})
    check("sse", lambda p: ad.sse(p["a"], t), {"a": a})
    logits = DiffTensor.param(_off_kink(rng, (4,)), name="logits")
    check("bce_with_logits",
          lambda p: ad.bce_with_logits(p["logits"], 1.0), {"logits": logits})

    return results


# ---------------------------------------------------------------------------
# end-to-end check


def tiny_model_config() -> ModelConfig:
    return ModelConfig(extractor_channels=[2, 3], decoder_view_channels=[2],
                       decoder_scene_channels=[2], weight_subnet_channels=[2, 1])


def tiny_two_view_frame(seed: int = 0):
    grid = GroundGrid(width_cells=6, height_cells=6, cell_size_m=0.5)
    center = (1.5, 1.5, 0.0)
    cams = [
        CameraModel.look_at((-1.0, 1.5, 2.5), center, fx=9.0, fy=9.0, cx=5.5, cy=5.5,
                            image_size=(12, 12)),
        CameraModel.look_at((4.0, 0.0, 3.0), center, fx=9.0, fy=9.0, cx=5.5, cy=5.5,
                            image_size=(12, 12)),
    ]
    scene = SceneConfig(grid=grid, cameras=cams, people_count_range=(2, 3),
                        min_separation_m=0.6, person_height_m=1.7,
                        render=RenderConfig(image_size=(12, 12), blob_base_radius_px=4.0,
                                            occlusion=False, noise_level=0.0),
                        gt_sigma_cells=1.0, seed=seed)
    rng = np.random.default_rng(seed)
    return generate_frame(scene, rng)


def model_level_check(seed: int = 0, tolerance: float = MODEL_TOLERANCE) -> tuple[str, GradCheckReport]:
    """Finite-difference check of the total loss through the whole pipeline."""
    cfg = tiny_model_config()
    frame = tiny_two_view_frame(seed)
    params = init_model_params(cfg, np.random.default_rng(seed + 1))

    def build_loss(p):
        out = forward(frame, [0, 1], p, cfg)
        _, _, total = frame_losses(out, frame, cfg)
        return total

    return ("model_total_loss", grad_check(build_loss, params, h=1e-4, tolerance=tolerance))


def full_suite(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    results = op_level_checks(seed)
    results.append(model_level_check(seed))
    return results
