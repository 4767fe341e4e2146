"""Train-then-evaluate runs and the ablation sweeps built on them."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, apply_overrides
from .data import (
    LabeledImage,
    SparseLabelSet,
    SynthSpec,
    load_images,
    sample_sparse_labels,
    synth_generate,
)
from .errors import ConfigError
from .inference import EvalReport, evaluate_many, segment_image
from .train import TrainData, TrainState, fit

log = logging.getLogger(__name__)

CACHE_ENV = "EPS_SEG_CACHE"


@dataclass
class Datasets:
    train: list
    test: list
    val: list


def _cached_load(path: str, manifest: str, num_classes: int) -> list[LabeledImage]:
    """Load a manifest dataset, reusing normalized arrays under $EPS_SEG_CACHE."""
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return load_images(path, manifest, num_classes)
    root = Path(path)
    mpath = Path(manifest) if Path(manifest).is_absolute() else root / manifest
    key = hashlib.sha256((str(root.resolve()) + mpath.read_text()).encode()).hexdigest()[:16]
    f = Path(cache) / f"images_{key}.npz"
    if f.exists():
        with np.load(f) as z:
            ids = json.loads(str(z["ids"]))
            return [LabeledImage(z[f"p{i}"], z[f"l{i}"], name) for i, name in enumerate(ids)]
    images = load_images(path, manifest, num_classes)
    f.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"p{i}": im.pixels for i, im in enumerate(images)}
    arrays.update({f"l{i}": im.labels for i, im in enumerate(images)})
    np.savez(f, ids=json.dumps([im.id for im in images]), **arrays)
    return images


def build_datasets(cfg: RunConfig) -> Datasets:
    d, C = cfg.data, cfg.model.num_classes
    if d.train is None:
        def synth(n, offset):
            if n == 0:
                return []
            return synth_generate(
                SynthSpec(C, d.synth_side, n, d.synth_noise_std, cfg.seed + offset, d.synth_cells)
            )

        return Datasets(synth(d.synth_train_images, 0), synth(d.synth_test_images, 10_000), synth(d.synth_val_images, 20_000))
    load = lambda p: _cached_load(p, d.manifest, C) if p else []
    return Datasets(load(d.train), load(d.test), load(d.val))


def sparse_labels_for(cfg: RunConfig, images) -> SparseLabelSet:
    if cfg.data.labels_csv:
        return SparseLabelSet.from_csv(cfg.data.labels_csv, cfg.data.budget_fraction)
    return sample_sparse_labels(
        images, cfg.data.budget_fraction, cfg.seed, cfg.data.stratified, cfg.mask.side, cfg.model.num_classes
    )


@dataclass
class RunResult:
    seed: int
    report: Optional[EvalReport]
    state: TrainState
    log_rows: list
    n_labels: int
    seconds: float

    @property
    def mean_dice(self) -> float:
        return self.report.mean if self.report else float("nan")


def run(cfg: RunConfig, out_dir=None, datasets: Optional[Datasets] = None) -> RunResult:
    """Train on the configured data and evaluate Dice on the test images."""
    t0 = time.perf_counter()
    ds = datasets or build_datasets(cfg)
    labels = sparse_labels_for(cfg, ds.train)
    state, rows = fit(
        cfg.model,
        cfg.train,
        TrainData(ds.train, labels, cfg.mask, ds.val),
        out_dir=out_dir,
    )
    report = None
    if ds.test:
        mask = cfg.mask if cfg.inference.inference_mask else None
        segs = [
            segment_image(im, state.model, cfg.inference.stride, cfg.inference.batch_size, mask)
            for im in ds.test
        ]
        report = evaluate_many(segs, [im.labels for im in ds.test], cfg.model.num_classes)
    return RunResult(cfg.seed, report, state, rows, len(labels), time.perf_counter() - t0)


# ---------------------------------------------------------------- ablations

LABEL_BUDGETS = (0.0005, 0.0001, 0.00005, 0.000025)
MASK_SIDES = (1, 3, 5, 9)


def loss_term_settings() -> list[tuple[str, dict]]:
    """Strip to a plain HVAE with a probe head, then add one component at a time."""
    vanilla = {
        "model.prior": "normal",
        "model.use_film": False,
        "model.detach_head": True,
        "train.weights.alpha3": 0.0,
    }
    gmm = dict(vanilla, **{"model.prior": "gmm", "model.use_film": True})
    cl = dict(gmm, **{"train.weights.alpha3": RunConfig().train.weights.alpha3})
    full = dict(cl, **{"model.detach_head": False})
    return [("vanilla", vanilla), ("+GMM", gmm), ("+CL", cl), ("+CE(full)", full)]


def ablation_settings(axis: str, base: RunConfig) -> list[tuple[str, dict]]:
    if axis == "loss_terms":
        return loss_term_settings()
    if axis == "label_budget":
        return [(f"{100 * f:g}%", {"data.budget_fraction": f}) for f in LABEL_BUDGETS]
    if axis == "mask_size":
        return [(str(s), {"mask.side": s}) for s in MASK_SIDES]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose loss_terms, label_budget or mask_size")


def ablate(axis: str, base: RunConfig, seeds: Sequence[int], out_csv=None, cache: Optional[dict] = None) -> list[dict]:
    """Run every setting of ``axis`` for each seed; one CSV row per setting."""
    rows = []
    for name, overrides in ablation_settings(axis, base):
        dice = []
        for seed in seeds:
            cfg = apply_overrides(base.with_seed(seed), overrides)
            key = json.dumps(cfg.to_json(), sort_keys=True)
            if cache is not None and key in cache:
                result = cache[key]
            else:
                result = run(cfg)
                if cache is not None:
                    cache[key] = result
            log.info("%s=%s seed=%d mean Dice %.4f", axis, name, seed, result.mean_dice)
            dice.append(result.mean_dice)
        row = {"axis": axis, "setting": name, "seeds": " ".join(map(str, seeds)),
               "per_seed_dice": " ".join(f"{v:.6f}" for v in dice), "mean_dice": float(np.mean(dice))}
        rows.append(row)
        if out_csv:
            _write_rows(out_csv, rows)
    return rows


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
