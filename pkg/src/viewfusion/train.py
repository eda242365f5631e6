"""Training schedule: counting pretrain, per-view decoding, joint training,
plus discriminator-based domain adaptation for new scenes.

Every stage is a pure function of (dataset, params, config, seed): optimizer
steps are strictly serialized and all randomness flows from seeded generators,
so repeated runs produce bit-identical loss logs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .metrics import MatchResult, aggregate, extract_detections, match
from .model import (ModelConfig, _conv_init, decode_scene, extract_features, forward,
                    frame_losses, union_mask)
from .optim import Optimizer, OptimizerConfig
from .scene import MultiViewFrame, SimDataset


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage1_epochs: int = 2
    stage2_epochs: int = 5
    stage3_epochs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    views_per_sample: int = 5
    resamples_per_frame: int = 5
    eval_resamples: int = 5
    seed: int = 0
    eval_every: int = 2            # epochs between validation passes in stage 3
    detect_threshold: float = 0.4
    nms_radius_cells: float = 2.0
    match_t_cells: float = 4.0

    def validate(self, n_views: int) -> None:
        if self.views_per_sample > n_views:
            raise ValueError(f"views_per_sample={self.views_per_sample} exceeds "
                             f"available views ({n_views})")
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.optimizer.validate()


@dataclass
class AdaptConfig:
    target_label_fraction: float = 0.05
    discriminator_channels: list[int] = field(default_factory=lambda: [8, 8])
    adversarial_loss_weight: float = 0.1
    epochs: int = 5
    discriminator_lr: float = 1e-3
    steps_per_epoch: int = 50
    seed: int = 0
    discriminator_input: str = "fused"  # or "per-view"

    def validate(self) -> None:
        if not (0.0 < self.target_label_fraction <= 1.0):
            raise ValueError("target_label_fraction must be in (0, 1]")
        if self.discriminator_input not in ("fused", "per-view"):
            raise ValueError(f"unknown discriminator_input '{self.discriminator_input}'")


@dataclass
class LossLog:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step: int, loss_view: float, loss_scene: float,
               loss_total: float, lr: float) -> None:
        self.rows.append((step, loss_view, loss_scene, loss_total, lr))

    def to_csv(self) -> str:
        lines = ["step,loss_view,loss_scene,loss_total,lr"]
        for step, lv, ls, lt, lr in self.rows:
            lines.append(f"{step},{lv!r},{ls!r},{lt!r},{lr!r}")
        return "\n".join(lines) + "\n"


def select_views(frame: MultiViewFrame, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of k distinct view indices, ascending."""
    n = frame.n_views
    if k > n:
        raise ValueError(f"cannot select {k} views from {n}")
    return np.sort(rng.choice(n, size=k, replace=False))


def _check_finite(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{stage}: non-finite loss {value} at step {step}; "
                               "reduce the learning rate")


# ---------------------------------------------------------------------------
# stage 1: counting pretrain


def _counting_target(frame: MultiViewFrame, view: int) -> np.ndarray:
    img = (frame.clean_images or frame.images)[view][0]
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))[None]


def stage1_pretrain(dataset: SimDataset, params: dict[str, DiffTensor],
                    cfg: ModelConfig, tcfg: TrainConfig,
                    log: LossLog | None = None) -> dict[str, DiffTensor]:
    """Train the extractor plus a throwaway 1x1 counting head on per-view blob mass.

    The head regresses the rendered blob map pooled to feature resolution; it
    is dropped from the returned parameter set.
    """
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 100]))
    k, b = _conv_init(rng, 1, cfg.feature_channels, 1, bias_value=0.0)
    params = dict(params)
    params["count_head.kernel"] = DiffTensor.param(k, name="count_head.kernel")
    params["count_head.bias"] = DiffTensor.param(b, name="count_head.bias")
    trainable = {n: p for n, p in params.items()
                 if n.startswith(("extractor.", "count_head."))}
    opt = Optimizer(tcfg.optimizer)
    step = 0
    for _ in range(tcfg.stage1_epochs):
        frame_order = rng.permutation(len(dataset.frames))
        for fi in frame_order:
            frame = dataset.frames[fi]
            view = int(rng.integers(frame.n_views))
            feats = extract_features(DiffTensor.const(frame.images[view]), params, cfg)
            pred = ad.conv2d(feats, params["count_head.kernel"], params["count_head.bias"])
            pred = ad.relu(pred)
            loss = ad.mse(pred, DiffTensor.const(_counting_target(frame, view)))
            _check_finite(float(loss.values), "stage1", step)
            opt.zero_grad(trainable)
            ad.backward(loss)
            opt.step(trainable)
            if log is not None:
                log.append(step, 0.0, float(loss.values), float(loss.values), opt.learning_rate)
            step += 1
    counting_mass_error = counting_head_mass_error(dataset, params, cfg)
    params["_counting_mass_error"] = DiffTensor.const(np.asarray(counting_mass_error))
    for key in ("count_head.kernel", "count_head.bias"):
        params.pop(key)
    return params


def counting_head_mass_error(dataset: SimDataset, params: dict[str, DiffTensor],
                             cfg: ModelConfig, max_frames: int = 20) -> float:
    """Mean relative error of predicted vs true total blob mass on training frames."""
    errs = []
    for frame in dataset.frames[:max_frames]:
        for view in range(frame.n_views):
            feats = extract_features(DiffTensor.const(frame.images[view]), params, cfg)
            pred = ad.relu(ad.conv2d(feats, params["count_head.kernel"],
                                     params["count_head.bias"]))
            true_mass = float(_counting_target(frame, view).sum())
            if true_mass < 1e-6:
                continue
            errs.append(abs(float(pred.values.sum()) - true_mass) / true_mass)
    return float(np.mean(errs)) if errs else 0.0


# ---------------------------------------------------------------------------
# stages 2 and 3


def _train_epochs(dataset: SimDataset, params: dict[str, DiffTensor], cfg: ModelConfig,
                  tcfg: TrainConfig, *, epochs: int, objective: str,
                  trainable: dict[str, DiffTensor], rng: np.random.Generator,
                  log: LossLog | None, stage: str,
                  val_dataset: SimDataset | None = None,
                  step_offset: int = 0) -> tuple[dict[str, DiffTensor], int]:
    opt = Optimizer(tcfg.optimizer)
    step = step_offset
    best_score = -math.inf
    best_snapshot = None
    for epoch in range(epochs):
        frame_order = rng.permutation(len(dataset.frames))
        for fi in frame_order:
            frame = dataset.frames[fi]
            for _ in range(tcfg.resamples_per_frame):
                subset = select_views(frame, min(tcfg.views_per_sample, frame.n_views), rng)
                out = forward(frame, subset, params, cfg)
                ls, lv, lt = frame_losses(out, frame, cfg)
                loss = lv if objective == "view" else lt
                _check_finite(float(loss.values), stage, step)
                opt.zero_grad(trainable)
                ad.backward(loss)
                opt.step(trainable)
                if log is not None:
                    log.append(step, float(lv.values), float(ls.values),
                               float(lt.values), opt.learning_rate)
                step += 1
        if val_dataset is not None and (epoch % tcfg.eval_every == tcfg.eval_every - 1
                                        or epoch == epochs - 1):
            score = _validation_score(val_dataset, params, cfg, tcfg, objective)
            if score > best_score:
                best_score = score
                best_snapshot = {n: p.values.copy() for n, p in params.items()}
    if best_snapshot is not None:
        for n, p in params.items():
            p.values[...] = best_snapshot[n]
    return params, step


def _validation_score(val: SimDataset, params, cfg, tcfg, objective: str) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 999]))
    if objective == "view":
        # stage 2 has no scene prediction worth scoring; track -loss_view
        tot = 0.0
        for frame in val.frames:
            subset = select_views(frame, min(tcfg.views_per_sample, frame.n_views), rng)
            out = forward(frame, subset, params, cfg)
            _, lv, _ = frame_losses(out, frame, cfg)
            tot += float(lv.values)
        return -tot
    rep = evaluate_dataset(val, params, cfg, tcfg.views_per_sample,
                           resamples=1, seed=tcfg.seed + 999,
                           threshold=tcfg.detect_threshold,
                           nms_radius=tcfg.nms_radius_cells, t_cells=tcfg.match_t_cells)
    return rep.f1


def stage2_train_single_view(dataset: SimDataset, params: dict[str, DiffTensor],
                             cfg: ModelConfig, tcfg: TrainConfig,
                             log: LossLog | None = None,
                             val_dataset: SimDataset | None = None) -> dict[str, DiffTensor]:
    """Minimize the per-view decoding loss over extractor and view decoder."""
    tcfg.validate(dataset.n_views)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 200]))
    trainable = {n: p for n, p in params.items()
                 if n.startswith(("extractor.", "view_decoder."))}
    params, _ = _train_epochs(dataset, params, cfg, tcfg, epochs=tcfg.stage2_epochs,
                              objective="view", trainable=trainable, rng=rng, log=log,
                              stage="stage2", val_dataset=val_dataset)
    return params


def stage3_train_joint(dataset: SimDataset, params: dict[str, DiffTensor],
                       cfg: ModelConfig, tcfg: TrainConfig,
                       log: LossLog | None = None,
                       val_dataset: SimDataset | None = None,
                       step_offset: int = 0) -> dict[str, DiffTensor]:
    """Minimize scene loss + weight * view loss over all parameters."""
    tcfg.validate(dataset.n_views)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 300]))
    trainable = {n: p for n, p in params.items() if not n.startswith("_")}
    params, _ = _train_epochs(dataset, params, cfg, tcfg, epochs=tcfg.stage3_epochs,
                              objective="total", trainable=trainable, rng=rng, log=log,
                              stage="stage3", val_dataset=val_dataset,
                              step_offset=step_offset)
    return params


def run_full_training(train_ds: SimDataset, val_ds: SimDataset | None,
                      cfg: ModelConfig, tcfg: TrainConfig,
                      log: LossLog | None = None) -> dict[str, DiffTensor]:
    """The complete schedule; stages honour the fusion-mode ablation semantics.

    supervised-weighted runs all three stages; the unsupervised and
    masked-average variants skip the per-view supervision (no stage 2, zero
    view-loss weight), so their weighting receives no per-view guidance.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    from .model import init_model_params
    params = init_model_params(cfg, rng)
    if tcfg.stage1_epochs > 0:
        params = stage1_pretrain(train_ds, params, cfg, tcfg, log=log)
    if cfg.fusion_mode == "supervised-weighted":
        if tcfg.stage2_epochs > 0:
            params = stage2_train_single_view(train_ds, params, cfg, tcfg, log=log)
    else:
        cfg = ModelConfig(**{**cfg.__dict__, "view_loss_weight": 0.0})
    params = stage3_train_joint(train_ds, params, cfg, tcfg, log=log, val_dataset=val_ds)
    return {n: p for n, p in params.items() if not n.startswith("_")}


# ---------------------------------------------------------------------------
# evaluation on a dataset


def evaluate_dataset(dataset: SimDataset, params: dict[str, DiffTensor], cfg: ModelConfig,
                     views: int, resamples: int, seed: int, threshold: float,
                     nms_radius: float, t_cells: float,
                     t_meters: float | None = None,
                     collect_frames: list | None = None):
    """Subset-protocol evaluation: random view subsets, GT restricted to their union."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    results: list[MatchResult] = []
    n_draws = 1 if views >= dataset.n_views else resamples
    for frame in dataset.frames:
        for _ in range(n_draws):
            subset = select_views(frame, min(views, frame.n_views), rng)
            out = forward(frame, subset, params, cfg)
            dets = extract_detections(out.scene_pred, threshold, nms_radius)
            gt = visible_people_cells(frame, subset)
            mr = match(dets, gt, t_cells)
            results.append(mr)
            if collect_frames is not None:
                collect_frames.append((out, mr, subset))
    return aggregate(results, t_cells, t_meters)


def visible_people_cells(frame: MultiViewFrame, view_subset) -> np.ndarray:
    """Ground-truth people (cell coords) visible in the union of the subset's masks."""
    union = union_mask(frame, view_subset)
    grid = frame.masks[0].grid
    out = []
    for x_m, y_m in frame.people_world:
        cx, cy = grid.world_to_cell(x_m, y_m)
        r, c = int(round(float(cy))), int(round(float(cx)))
        if 0 <= r < union.shape[0] and 0 <= c < union.shape[1] and union[r, c] > 0.5:
            out.append((float(cx), float(cy)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# domain adaptation


def init_discriminator_params(acfg: AdaptConfig, feature_channels: int,
                              rng: np.random.Generator) -> dict[str, DiffTensor]:
    params: dict[str, DiffTensor] = {}
    c_in = feature_channels
    for i, c_out in enumerate(acfg.discriminator_channels):
        k, b = _conv_init(rng, c_out, c_in, 3)
        params[f"disc.conv{i}.kernel"] = DiffTensor.param(k, name=f"disc.conv{i}.kernel")
        params[f"disc.conv{i}.bias"] = DiffTensor.param(b, name=f"disc.conv{i}.bias")
        c_in = c_out
    k, b = _conv_init(rng, 1, c_in, 1)
    params["disc.head.kernel"] = DiffTensor.param(k, name="disc.head.kernel")
    params["disc.head.bias"] = DiffTensor.param(b, name="disc.head.bias")
    return params


def discriminator_logits(features: DiffTensor, dparams: dict[str, DiffTensor],
                         acfg: AdaptConfig) -> DiffTensor:
    """Small convnet + global pooling -> per-sample domain logits [N]."""
    x = features if features.values.ndim == 4 else ad.expand_batch_dim(features)
    for i in range(len(acfg.discriminator_channels)):
        x = ad.relu(ad.conv2d(x, dparams[f"disc.conv{i}.kernel"],
                              dparams[f"disc.conv{i}.bias"], padding=1))
        h, w = x.values.shape[-2:]
        if h % 2 == 0 and w % 2 == 0 and min(h, w) >= 4:
            x = ad.avg_pool2(x)
    x = ad.conv2d(x, dparams["disc.head.kernel"], dparams["disc.head.bias"])
    return ad.mean_per_sample(x)


def _adapt_features(frame: MultiViewFrame, subset, params, cfg: ModelConfig,
                    acfg: AdaptConfig, reverse_scale: float = 0.0):
    out = forward(frame, subset, params, cfg)
    feats = out.fused_tensor if acfg.discriminator_input == "fused" else out.feature_stack
    if reverse_scale:
        feats = ad.grad_reverse(feats, reverse_scale)
    return out, feats


def finetune(dataset: SimDataset, params: dict[str, DiffTensor], cfg: ModelConfig,
             tcfg: TrainConfig, log: LossLog | None = None) -> dict[str, DiffTensor]:
    """Plain joint fine-tuning on a (typically small) labeled dataset."""
    return stage3_train_joint(dataset, params, cfg, tcfg, log=log)


def labeled_target_split(target: SimDataset, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic labeled/unlabeled frame index split of the target train set."""
    n = len(target.frames)
    n_labeled = max(1, int(math.ceil(fraction * n)))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 55])).permutation(n)
    return sorted(int(i) for i in perm[:n_labeled]), sorted(int(i) for i in perm[n_labeled:])


def adapt(source_dataset: SimDataset, target_dataset: SimDataset,
          params: dict[str, DiffTensor], cfg: ModelConfig, tcfg: TrainConfig,
          acfg: AdaptConfig, log: LossLog | None = None) -> dict[str, DiffTensor]:
    """Adversarial fine-tuning against a source/target domain discriminator.

    Alternates (a) discriminator steps classifying fused features as source vs
    target (labels 0/1) on detached features, and (b) model steps minimizing
    source + labeled-target detection losses while a reversed-gradient branch
    pushes target features toward the source distribution.  If the
    discriminator stays at accuracy 1.0 for a whole epoch the adversary is
    degenerate and a warning is emitted.
    """
    acfg.validate()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([acfg.seed, 400]))
    labeled_idx, _ = labeled_target_split(target_dataset, acfg.target_label_fraction,
                                          acfg.seed)
    dparams = init_discriminator_params(acfg, cfg.feature_channels, rng)
    model_opt = Optimizer(tcfg.optimizer)
    disc_opt = Optimizer(OptimizerConfig(kind="adam", learning_rate=acfg.discriminator_lr))
    trainable = {n: p for n, p in params.items() if not n.startswith("_")}
    step = 0
    k_src = min(tcfg.views_per_sample, source_dataset.n_views)
    k_tgt = min(tcfg.views_per_sample, target_dataset.n_views)
    for _ in range(acfg.epochs):
        correct = 0
        total = 0
        for _ in range(acfg.steps_per_epoch):
            src = source_dataset.frames[int(rng.integers(len(source_dataset.frames)))]
            tgt_any = target_dataset.frames[int(rng.integers(len(target_dataset.frames)))]
            tgt_lab = target_dataset.frames[labeled_idx[int(rng.integers(len(labeled_idx)))]]
            sub_src = select_views(src, k_src, rng)
            sub_tgt = select_views(tgt_any, k_tgt, rng)
            sub_lab = select_views(tgt_lab, k_tgt, rng)

            # (a) discriminator step on detached features
            _, f_src = _adapt_features(src, sub_src, params, cfg, acfg)
            _, f_tgt = _adapt_features(tgt_any, sub_tgt, params, cfg, acfg)
            z_src = discriminator_logits(f_src.detach(), dparams, acfg)
            z_tgt = discriminator_logits(f_tgt.detach(), dparams, acfg)
            d_loss = ad.add(ad.bce_with_logits(z_src, 0.0), ad.bce_with_logits(z_tgt, 1.0))
            disc_opt.zero_grad(dparams)
            ad.backward(d_loss)
            disc_opt.step(dparams)
            correct += int((z_src.values < 0).sum()) + int((z_tgt.values > 0).sum())
            total += z_src.values.size + z_tgt.values.size

            # (b) model step: detection losses plus reversed adversarial branch
            out_src = forward(src, sub_src, params, cfg)
            _, _, lt_src = frame_losses(out_src, src, cfg)
            out_lab = forward(tgt_lab, sub_lab, params, cfg)
            _, _, lt_lab = frame_losses(out_lab, tgt_lab, cfg)
            loss = ad.add(lt_src, lt_lab)
            if acfg.adversarial_loss_weight > 0:
                out_adv, f_adv = _adapt_features(tgt_any, sub_tgt, params, cfg, acfg,
                                                 reverse_scale=acfg.adversarial_loss_weight)
                z_adv = discriminator_logits(f_adv, dparams, acfg)
                # reversed gradient: the model maximizes the discriminator's loss
                loss = ad.add(loss, ad.bce_with_logits(z_adv, 1.0))
            _check_finite(float(loss.values), "adapt", step)
            model_opt.zero_grad(trainable)
            for p in dparams.values():
                p.zero_grad()
            ad.backward(loss)
            model_opt.step(trainable)
            if log is not None:
                log.append(step, float(d_loss.values), float(lt_src.values),
                           float(loss.values), model_opt.learning_rate)
            step += 1
        check_degenerate_discriminator(correct, total)
    return params


def check_degenerate_discriminator(correct: int, total: int) -> bool:
    """Warn when the discriminator classified every sample of an epoch correctly."""
    if total > 0 and correct == total:
        warnings.warn("discriminator accuracy pinned at 1.0 for a full epoch; "
                      "the adversary is degenerate", stacklevel=2)
        return True
    return False
