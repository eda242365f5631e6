"""Four-stage multi-view detection model.

Per frame: shared feature extraction on every selected view, homography
projection onto the ground grid, shared per-view decoding into a people map
V_i, a weight subnet turning each V_i into a contribution map, masked
normalization of those maps across views, weighted summation of the projected
features, and a final scene decoder producing V_s.

All ground-grid maps are [1, height_cells, width_cells]; per-view stacks add a
leading view axis.  Views are processed in ascending camera-index order
internally so reductions are bit-reproducible under input permutations.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .geometry import projection_grid
from .scene import MultiViewFrame

FUSION_MODES = ("supervised-weighted", "unsupervised-weighted", "masked-average")
WEIGHT_ACTIVATIONS = ("relu", "softplus")

FEATURE_STRIDE = 2  # one 2x2 mean-pool after the first extractor conv


@dataclass
class ModelConfig:
    input_channels: int = 1
    extractor_channels: list[int] = field(default_factory=lambda: [8, 16, 16])
    decoder_view_channels: list[int] = field(default_factory=lambda: [16])
    decoder_scene_channels: list[int] = field(default_factory=lambda: [16])
    # last entry must be 1 (the raw contribution map)
    weight_subnet_channels: list[int] = field(default_factory=lambda: [16, 16, 8, 1])
    norm_epsilon: float = 1e-6          # keeps the weight denominator away from 0
    view_loss_weight: float = 1.0       # balance between scene and per-view losses
    fusion_mode: str = "supervised-weighted"
    weight_activation: str = "relu"

    def validate(self) -> None:
        if not self.extractor_channels:
            raise ValueError("extractor_channels must be non-empty")
        if self.weight_subnet_channels[-1] != 1:
            raise ValueError("last weight_subnet channel count must be 1, got "
                             f"{self.weight_subnet_channels[-1]}")
        if self.norm_epsilon <= 0:
            raise ValueError("norm_epsilon must be > 0")
        if self.view_loss_weight < 0:
            raise ValueError("view_loss_weight must be >= 0")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode '{self.fusion_mode}'")
        if self.weight_activation not in WEIGHT_ACTIVATIONS:
            raise ValueError(f"unknown weight_activation '{self.weight_activation}'")

    @property
    def feature_channels(self) -> int:
        return self.extractor_channels[-1]

    def hash(self) -> str:
        payload = repr(sorted(self.__dict__.items())).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


@dataclass
class ForwardOutput:
    view_indices: list[int]            # in caller order
    view_preds: list[np.ndarray]       # V_i values, [1, Hc, Wc], caller order
    weight_maps_raw: list[np.ndarray]  # subnet outputs before mask/normalize
    weight_maps: list[np.ndarray]      # normalized W_i
    fused: np.ndarray                  # [C_f, Hc, Wc]
    scene_pred: np.ndarray             # [1, Hc, Wc]
    masks_eroded: list[np.ndarray]     # model-side masks used in the normalization
    # graph handles for loss construction (views stacked in ascending index order)
    view_pred_stack: DiffTensor = None
    scene_tensor: DiffTensor = None
    fused_tensor: DiffTensor = None
    feature_stack: DiffTensor = None
    sorted_indices: list[int] = None


# ---------------------------------------------------------------------------
# parameters


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int,
               bias_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    # fan-in scaled uniform: U(-a, a) with a = sqrt(6 / fan_in)
    fan_in = c_in * k * k
    a = np.sqrt(6.0 / fan_in)
    kernel = rng.uniform(-a, a, size=(c_out, c_in, k, k))
    bias = np.full(c_out, bias_value)
    return kernel, bias


def _add_conv_stack(params: dict, rng: np.random.Generator, prefix: str,
                    channels: list[int], c_in: int, final_bias: float = 0.0) -> None:
    for i, c_out in enumerate(channels):
        bias_value = final_bias if i == len(channels) - 1 else 0.0
        k, b = _conv_init(rng, c_out, c_in, 3, bias_value)
        params[f"{prefix}.conv{i}.kernel"] = DiffTensor.param(k, name=f"{prefix}.conv{i}.kernel")
        params[f"{prefix}.conv{i}.bias"] = DiffTensor.param(b, name=f"{prefix}.conv{i}.bias")
        c_in = c_out


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, DiffTensor]:
    cfg.validate()
    params: dict[str, DiffTensor] = {}
    _add_conv_stack(params, rng, "extractor", cfg.extractor_channels, cfg.input_channels)
    cf = cfg.feature_channels
    # decoders: hidden channels from config, then a 1-channel head; the head bias
    # starts slightly positive so the final relu is not born dead
    _add_conv_stack(params, rng, "view_decoder", cfg.decoder_view_channels + [1], cf,
                    final_bias=0.05)
    _add_conv_stack(params, rng, "scene_decoder", cfg.decoder_scene_channels + [1], cf,
                    final_bias=0.05)
    _add_conv_stack(params, rng, "weight_subnet", cfg.weight_subnet_channels, 1,
                    final_bias=0.1)
    return params


def param_blocks(params: dict[str, DiffTensor]) -> dict[str, list[str]]:
    blocks: dict[str, list[str]] = {}
    for name in params:
        blocks.setdefault(name.split(".")[0], []).append(name)
    return blocks


# ---------------------------------------------------------------------------
# subnets


def _conv_stack_apply(x: DiffTensor, params: dict, prefix: str, n_layers: int,
                      final_activation: str | None = "relu") -> DiffTensor:
    for i in range(n_layers):
        x = ad.conv2d(x, params[f"{prefix}.conv{i}.kernel"], params[f"{prefix}.conv{i}.bias"],
                      padding=1)
        last = i == n_layers - 1
        act = final_activation if last else "relu"
        if act == "relu":
            x = ad.relu(x)
        elif act == "softplus":
            x = ad.softplus(x)
        elif act is None:
            pass
    return x


def extract_features(image: DiffTensor, params: dict, cfg: ModelConfig) -> DiffTensor:
    """Shared strided extractor: [.., C_img, H, W] -> [.., C_f, H/2, W/2]."""
    chans = cfg.extractor_channels
    x = ad.conv2d(image, params["extractor.conv0.kernel"], params["extractor.conv0.bias"],
                  padding=1)
    x = ad.relu(x)
    x = ad.avg_pool2(x)
    for i in range(1, len(chans)):
        x = ad.conv2d(x, params[f"extractor.conv{i}.kernel"], params[f"extractor.conv{i}.bias"],
                      padding=1)
        x = ad.relu(x)
    return x


def decode_view(projected: DiffTensor, params: dict, cfg: ModelConfig) -> DiffTensor:
    """Shared per-view decoder on the ground grid, nonnegative 1-channel output."""
    return _conv_stack_apply(projected, params, "view_decoder",
                             len(cfg.decoder_view_channels) + 1, final_activation="relu")


def decode_scene(fused: DiffTensor, params: dict, cfg: ModelConfig) -> DiffTensor:
    return _conv_stack_apply(fused, params, "scene_decoder",
                             len(cfg.decoder_scene_channels) + 1, final_activation="relu")


def weight_subnet_apply(view_pred: DiffTensor, params: dict, cfg: ModelConfig) -> DiffTensor:
    return _conv_stack_apply(view_pred, params, "weight_subnet",
                             len(cfg.weight_subnet_channels),
                             final_activation=cfg.weight_activation)


def normalize_weights_np(raws: list[np.ndarray], masks: list[np.ndarray],
                         epsilon: float) -> list[np.ndarray]:
    """Reference (non-differentiable) masked weight normalization."""
    masked = [r * m for r, m in zip(raws, masks)]
    denom = np.sum(masked, axis=0) + epsilon
    return [m / denom for m in masked]


def weight_maps(view_preds: list[DiffTensor], masks: list[np.ndarray],
                params: dict, cfg: ModelConfig) -> tuple[list[DiffTensor], list[DiffTensor]]:
    """Per-view contribution maps: raw subnet outputs and masked-normalized weights.

    W_i = (raw_i * M_i) / (sum_j raw_j * M_j + epsilon); zero wherever M_i is
    zero and finite everywhere, including cells no view covers.
    """
    if not view_preds:
        raise ValueError("weight_maps: need at least one view")
    n = len(view_preds)
    stack = ad.stack_views(view_preds)  # [n, 1, Hc, Wc]
    raw = weight_subnet_apply(stack, params, cfg)
    mask_stack = DiffTensor.const(np.stack([m[None] for m in masks]))
    masked = ad.elementwise_mul(raw, mask_stack)
    denom = ad.add_scalar(ad.sum_axis0(masked), cfg.norm_epsilon)
    normalized = ad.div(masked, ad.tile_axis0(denom, n))
    return ad.unstack_views(raw), ad.unstack_views(normalized)


def fuse(features: list[DiffTensor], weights: list[DiffTensor]) -> DiffTensor:
    """Weighted sum of projected view features, channels tiled explicitly."""
    if len(features) != len(weights):
        raise ValueError(f"fuse: {len(features)} feature maps vs {len(weights)} weight maps")
    cf = features[0].values.shape[0]
    terms = [ad.elementwise_mul(f, ad.tile_channels(w, cf))
             for f, w in zip(features, weights)]
    return ad.sum_over_views(terms)


# ---------------------------------------------------------------------------
# full forward pass


def forward(frame: MultiViewFrame, view_subset: list[int] | np.ndarray,
            params: dict[str, DiffTensor], cfg: ModelConfig) -> ForwardOutput:
    """Run the full pipeline on a subset of a frame's views.

    Outputs keep the caller's view order; reductions always run in ascending
    camera-index order, so permuting ``view_subset`` permutes the per-view
    outputs and leaves the fused map and scene prediction bit-identical.
    """
    subset = [int(i) for i in view_subset]
    if not subset:
        raise ValueError("forward: empty view subset")
    if len(set(subset)) != len(subset):
        raise ValueError(f"forward: duplicate view indices in {subset}")
    order = sorted(range(len(subset)), key=lambda j: subset[j])
    sorted_idx = [subset[j] for j in order]
    n = len(sorted_idx)
    cf = cfg.feature_channels

    images = ad.DiffTensor.const(np.stack([frame.images[i] for i in sorted_idx]))
    feats = extract_features(images, params, cfg)  # [n, C_f, H/2, W/2]
    grids = np.stack([
        projection_grid(frame.model_cameras[i], _frame_grid(frame), FEATURE_STRIDE,
                        feats.values.shape[2:])
        for i in sorted_idx])
    f_views = ad.bilinear_sample(feats, grids)     # [n, C_f, Hc, Wc]
    v_views = decode_view(f_views, params, cfg)    # [n, 1, Hc, Wc]

    eroded = [frame.model_masks[i].eroded for i in sorted_idx]
    mask_stack = DiffTensor.const(np.stack([m[None] for m in eroded]))
    if cfg.fusion_mode == "masked-average":
        denom_np = np.sum([m[None] for m in eroded], axis=0) + cfg.norm_epsilon
        w_norm = DiffTensor.const(np.stack([m[None] / denom_np for m in eroded]))
        w_raw = mask_stack
    else:
        w_raw = weight_subnet_apply(v_views, params, cfg)
        masked = ad.elementwise_mul(w_raw, mask_stack)
        denom = ad.add_scalar(ad.sum_axis0(masked), cfg.norm_epsilon)
        w_norm = ad.div(masked, ad.tile_axis0(denom, n))

    fused = ad.sum_axis0(ad.elementwise_mul(f_views, ad.tile_channels(w_norm, cf)))
    scene = decode_scene(fused, params, cfg)

    # back to caller order
    pos = {cam: p for p, cam in enumerate(sorted_idx)}
    caller_pos = [pos[i] for i in subset]
    return ForwardOutput(
        view_indices=subset,
        view_preds=[v_views.values[p].copy() for p in caller_pos],
        weight_maps_raw=[w_raw.values[p].copy() for p in caller_pos],
        weight_maps=[w_norm.values[p].copy() for p in caller_pos],
        fused=fused.values.copy(),
        scene_pred=scene.values.copy(),
        masks_eroded=[eroded[p] for p in caller_pos],
        view_pred_stack=v_views,
        scene_tensor=scene,
        fused_tensor=fused,
        feature_stack=f_views,
        sorted_indices=sorted_idx,
    )


def _frame_grid(frame: MultiViewFrame):
    return frame.masks[0].grid


# ---------------------------------------------------------------------------
# losses


def loss_view(view_pred_stack: DiffTensor, view_gts: np.ndarray) -> DiffTensor:
    """Mean over views of the per-view summed squared error."""
    gts = np.asarray(view_gts, dtype=np.float64)
    if gts.shape != view_pred_stack.values.shape:
        raise ad.ShapeError(f"loss_view: prediction stack {view_pred_stack.shape} vs "
                            f"targets {gts.shape}")
    n = gts.shape[0]
    return ad.scalar_mul(ad.sse(view_pred_stack, DiffTensor.const(gts)), 1.0 / n)


def loss_scene(scene_pred: DiffTensor, scene_gt: np.ndarray) -> DiffTensor:
    gt = np.asarray(scene_gt, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    return ad.mse(scene_pred, DiffTensor.const(gt))


def loss_total(scene_loss: DiffTensor, view_loss: DiffTensor, view_loss_weight: float) -> DiffTensor:
    return ad.add(scene_loss, ad.scalar_mul(view_loss, view_loss_weight))


def frame_losses(out: ForwardOutput, frame: MultiViewFrame, cfg: ModelConfig,
                 restrict_to_union: bool = True) -> tuple[DiffTensor, DiffTensor, DiffTensor]:
    """(scene loss, view loss, total) for a forward pass on one frame.

    The scene target is restricted to the union of the selected views' true
    masks: people no selected camera can see are not supervised.
    """
    gts = np.stack([frame.view_gts[i][None] for i in out.sorted_indices])
    lv = loss_view(out.view_pred_stack, gts)
    scene_gt = frame.scene_gt
    if restrict_to_union:
        union = union_mask(frame, out.sorted_indices)
        scene_gt = scene_gt * union
    ls = loss_scene(out.scene_tensor, scene_gt)
    return ls, lv, loss_total(ls, lv, cfg.view_loss_weight)


def union_mask(frame: MultiViewFrame, view_subset) -> np.ndarray:
    m = np.zeros_like(frame.masks[0].mask)
    for i in view_subset:
        np.maximum(m, frame.masks[i].mask, out=m)
    return m


# ---------------------------------------------------------------------------
# checkpoints (parameter file plus a config echo, guarded by the config hash)


def save_model_checkpoint(path, params: dict[str, DiffTensor], cfg: ModelConfig) -> None:
    from dataclasses import asdict

    from .checkpoint import save_params
    save_params(path, {n: p for n, p in params.items() if not n.startswith("_")},
                meta={"model_config": asdict(cfg), "model_config_hash": cfg.hash()})


def load_model_checkpoint(path, expected_cfg: ModelConfig) -> dict[str, DiffTensor]:
    from .checkpoint import CheckpointError, load_params
    params, meta = load_params(path)
    got = meta.get("model_config_hash")
    want = expected_cfg.hash()
    if got != want:
        raise CheckpointError(f"{path}: model config hash mismatch "
                              f"(checkpoint {got}, expected {want}); refusing to load")
    return params
