"""Training loop, checkpoints, resume, and the finite-difference gradient check."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import (
    LabeledImage,
    MaskSpec,
    PatchBatch,
    SparseLabelSet,
    make_batches,
)
from .errors import ConfigError, NumericError
from .head import GmmPrior, TemperatureSchedule, anneal_temperature
from .inference import evaluate_many, segment_image
from .losses import (
    LossBreakdown,
    LossWeights,
    contrastive_loss,
    cross_entropy_loss,
    entropy_loss,
    inpainting_loss,
    kl_hierarchy_loss,
    mask_region,
    total_loss,
)
from .model import EpsSegModel, ModelConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "inpaint", "ce", "kl", "cl", "entropy", "total", "tau", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: str = "cosine"  # "cosine" or "none"
    lr_min_factor: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    unlabeled_fraction: float = 0.5
    augment: bool = False
    kl_ramp: float = 0.1  # fraction of steps for the linear KL warm-up; 0 disables
    ce_on_softmax: bool = False  # CE on softmax(logits) instead of the Gumbel sample
    entropy_phase_steps: int = 0  # extra steps with entropy_weight > 0 after the main phase
    entropy_phase_weight: float = 0.1
    checkpoint_every: int = 0
    validate_every: int = 0
    val_stride: int = 4

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")

    @property
    def total_steps(self) -> int:
        return self.steps + self.entropy_phase_steps


@dataclass
class TrainState:
    step: int
    model: EpsSegModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    best_dice: float = -1.0


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 7]).generate_state(1)[0])


def learning_rate(cfg: TrainConfig, t: int) -> float:
    if cfg.lr_decay == "none" or cfg.total_steps <= 1:
        return cfg.lr
    frac = min(t / cfg.total_steps, 1.0)
    lo = cfg.lr * cfg.lr_min_factor
    return lo + 0.5 * (cfg.lr - lo) * (1 + math.cos(math.pi * frac))


def temperature(cfg: TrainConfig, t: int) -> float:
    return anneal_temperature(cfg.schedule, t, cfg.steps)


def effective_weights(cfg: TrainConfig, t: int) -> LossWeights:
    w = cfg.weights
    ramp_steps = int(cfg.kl_ramp * cfg.steps)
    if ramp_steps > 0 and t < ramp_steps:
        w = replace(w, alpha2=w.alpha2 * (t + 1) / ramp_steps)
    if t >= cfg.steps and cfg.entropy_phase_steps > 0:
        w = replace(w, entropy_weight=cfg.entropy_phase_weight)
    return w


def init_state(model_cfg: ModelConfig, cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = EpsSegModel(model_cfg).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return TrainState(0, model, opt, cfg)


def compute_losses(
    model: EpsSegModel,
    batch: PatchBatch,
    weights: LossWeights,
    tau: float,
    noise_seed,
    ce_on_softmax: bool = False,
) -> LossBreakdown:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(batch.masked).to(dtype)
    target = torch.from_numpy(batch.targets).to(dtype)
    labels = torch.from_numpy(batch.labels)
    out = model(x, labels, tau=tau, noise_seed=noise_seed)
    side = target.shape[-1]
    y_ce = torch.softmax(out.logits, -1) if ce_on_softmax else out.y
    parts = {
        "inpaint": inpainting_loss(mask_region(out.prediction, side), target),
        "ce": cross_entropy_loss(y_ce, labels).value,
        "kl": kl_hierarchy_loss(out.latents, out.component, model.prior),
        "cl": contrastive_loss(out.latents.posterior_means(), labels, weights.margin, weights.lam).value,
        "entropy": entropy_loss(out.y, labels).value,
    }
    return total_loss(parts, weights)


def train_step(state: TrainState, batch: PatchBatch) -> tuple[TrainState, LossBreakdown]:
    """One optimizer update. On a non-finite loss or gradient the parameters and
    optimizer are left untouched and the returned breakdown has a NaN total."""
    cfg, t = state.config, state.step
    lr = learning_rate(cfg, t)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    try:
        bd = compute_losses(
            state.model, batch, effective_weights(cfg, t), temperature(cfg, t), step_seed(cfg.seed, t), cfg.ce_on_softmax
        )
    except NumericError as exc:
        log.warning("step %d aborted: %s", t, exc)
        nan = float("nan")
        return state, LossBreakdown(nan, nan, nan, nan, nan, nan)
    bd.total.backward()
    bad = [n for n, p in state.model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        log.warning("step %d aborted: non-finite gradient in %s", t, bad[0])
        state.optimizer.zero_grad(set_to_none=True)
        return state, replace(bd, total=torch.tensor(float("nan")))
    state.optimizer.step()
    state.step = t + 1
    return state, bd


# ---------------------------------------------------------------- checkpoints


def save_state(state: TrainState, path) -> Path:
    arrays = ckpt.module_arrays(state.model)
    opt_meta, opt_arrays = ckpt.optimizer_arrays(state.optimizer)
    arrays.update(opt_arrays)
    meta = {
        "model_config": state.model.cfg.to_json(),
        "train_config": config_to_json(state.config),
        "step": state.step,
        "best_dice": state.best_dice,
        "optimizer": opt_meta,
        "prior": state.model.prior.to_json(),
    }
    return ckpt.write_archive(path, meta, arrays)


def load_state(path, train_config: Optional[TrainConfig] = None) -> TrainState:
    from .config import model_config_from_json, train_config_from_json

    meta, arrays = ckpt.read_archive(path)
    model_cfg = model_config_from_json(meta["model_config"])
    cfg = train_config or train_config_from_json(meta["train_config"])
    dtype = torch.from_numpy(arrays[next(k for k in sorted(arrays) if k.startswith("model/"))]).dtype
    model = EpsSegModel(model_cfg).to(dtype)
    ckpt.load_module_arrays(model, arrays)
    model.prior = GmmPrior.from_json(meta["prior"])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ckpt.load_optimizer_arrays(opt, meta["optimizer"], arrays)
    return TrainState(int(meta["step"]), model, opt, cfg, float(meta["best_dice"]))


def parameter_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def config_to_json(cfg) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------- fit


@dataclass
class TrainData:
    images: Sequence[LabeledImage]
    labels: SparseLabelSet
    mask: MaskSpec = field(default_factory=MaskSpec)
    val_images: Sequence[LabeledImage] = ()


def validation_dice(model: EpsSegModel, images: Sequence[LabeledImage], stride: int) -> float:
    segs = [segment_image(im, model, stride=stride) for im in images]
    return evaluate_many(segs, [im.labels for im in images], model.cfg.num_classes).mean


def format_row(step: int, bd: LossBreakdown, tau: float, lr: float) -> dict:
    row = {"step": step, **{k: repr(v) for k, v in bd.as_floats().items()}}
    row.update(tau=repr(tau), lr=repr(lr))
    return row


def fit(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data: TrainData,
    out_dir=None,
    resume_from=None,
    on_validate: Optional[Callable[[int, float], None]] = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.total_steps`` updates. Returns the final state and the log rows
    written during this call (rows from step ``k+1`` when resuming at ``k``)."""
    state = load_state(resume_from, cfg) if resume_from else init_state(model_cfg, cfg)
    out = Path(out_dir) if out_dir else None
    log_path = out / "train_log.csv" if out else None
    rows: list[dict] = []
    if out:
        out.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_from and log_path.exists():
            # drop rows past the checkpoint so a resumed log matches an uninterrupted one
            with open(log_path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["step"]) <= state.step]
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, LOG_FIELDS)
            w.writeheader()
            w.writerows(kept)
    if state.step >= cfg.total_steps:
        if out:
            save_state(state, out / "final.ckpt")
        return state, rows

    batches = make_batches(
        data.images,
        data.labels,
        cfg.unlabeled_fraction,
        cfg.batch_size,
        model_cfg.patch_side,
        data.mask,
        cfg.seed,
        start=state.step,
        augment=cfg.augment,
    )
    aborted_in_a_row = 0
    for batch in batches:
        t = batch.index
        if t >= cfg.total_steps:
            break
        tau, lr = temperature(cfg, t), learning_rate(cfg, t)
        state, bd = train_step(state, batch)
        if state.step == t:  # aborted: skip this batch
            state.step = t + 1
            aborted_in_a_row += 1
            if aborted_in_a_row >= 10:
                raise NumericError(f"10 consecutive non-finite steps ending at step {t}")
            continue
        aborted_in_a_row = 0
        row = format_row(state.step, bd, tau, lr)
        rows.append(row)
        if log_path:
            with open(log_path, "a", newline="") as fh:
                csv.DictWriter(fh, LOG_FIELDS).writerow(row)
        if cfg.validate_every and data.val_images and state.step % cfg.validate_every == 0:
            dice = validation_dice(state.model, data.val_images, cfg.val_stride)
            log.info("step %d  validation mean Dice %.4f", state.step, dice)
            if on_validate:
                on_validate(state.step, dice)
            if dice > state.best_dice:
                state.best_dice = dice
                if out:
                    save_state(state, out / "best.ckpt")
        if out and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_state(state, out / f"step_{state.step:07d}.ckpt")
    if out:
        save_state(state, out / "final.ckpt")
    return state, rows


# ---------------------------------------------------------------- gradient check


LOSS_TERMS = ("inpaint", "ce", "kl", "cl", "entropy")


@dataclass
class GradCheckReport:
    loss: str
    max_rel_error: float
    coords: int
    failures: list  # (parameter name, flat index, analytic, numeric, rel error)
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check_config(num_classes: int = 3) -> ModelConfig:
    """An L=2, 8-channel model for gradient checks."""
    return ModelConfig(
        num_levels=2, channels=(8, 8), top_latent_dim=4, num_classes=num_classes,
        patch_side=11, blocks_per_level=1, latent_channels=2, head_hidden=8,
    )


def _toy_batch(cfg: ModelConfig, batch_size: int, mask: MaskSpec, seed: int) -> PatchBatch:
    rng = np.random.default_rng(seed)
    P = cfg.patch_side
    patches = rng.random((batch_size, P, P))
    lo, hi = mask.bounds(P)
    masked = patches.copy()
    masked[:, lo:hi, lo:hi] = mask.fill_value
    labels = np.arange(batch_size) % (cfg.num_classes + 1) - 1  # mix of NONE and every class
    return PatchBatch(patches, masked, patches[:, lo:hi, lo:hi].copy(), labels, np.zeros((batch_size, 3), np.int64))


def grad_check(
    loss: str = "all",
    model_cfg: Optional[ModelConfig] = None,
    batch_size: int = 8,
    coords: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> list[GradCheckReport]:
    """Central differences vs autograd on randomly probed parameter coordinates, float64.

    The relative error of one coordinate is |a - n| / max(|a|, |n|, floor). Only
    parameters that the term actually depends on are probed.
    """
    names = LOSS_TERMS if loss == "all" else (loss,)
    for n in names:
        if n not in LOSS_TERMS:
            raise ConfigError(f"unknown loss term {n!r}")
    model_cfg = model_cfg or grad_check_config()
    torch.manual_seed(seed)
    model = EpsSegModel(model_cfg).double()
    mask = MaskSpec(1)
    batch = _toy_batch(model_cfg, batch_size, mask, seed)
    weights = LossWeights(margin=1.0)  # small margin keeps negative pairs inside the hinge
    reports = []
    for name in names:

        def term() -> torch.Tensor:
            bd = compute_losses(model, batch, weights, tau=0.7, noise_seed=seed + 1)
            return getattr(bd, name)

        model.zero_grad(set_to_none=True)
        term().backward()
        params = [(n, p) for n, p in model.named_parameters() if p.grad is not None and p.grad.abs().max() > 0]
        sizes = np.array([p.numel() for _, p in params])
        rng = np.random.default_rng([seed, LOSS_TERMS.index(name)])
        total = int(sizes.sum())
        flat = rng.choice(total, size=min(coords, total), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        failures, worst = [], 0.0
        for g in flat:
            k = int(np.searchsorted(offsets, g, side="right") - 1)
            pname, p = params[k]
            idx = int(g - offsets[k])
            analytic = float(p.grad.view(-1)[idx])
            with torch.no_grad():
                orig = p.view(-1)[idx].item()
                p.view(-1)[idx] = orig + step
                up = float(term())
                p.view(-1)[idx] = orig - step
                down = float(term())
                p.view(-1)[idx] = orig
            numeric = (up - down) / (2 * step)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, rel)
            if rel >= tolerance:
                failures.append((pname, idx, analytic, numeric, rel))
        reports.append(GradCheckReport(name, worst, len(flat), failures, tolerance))
    return reports
