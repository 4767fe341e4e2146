"""Command-line entry point: ``eps-seg <command> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure. Failures also
print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .data import MANIFEST_NAME, MaskSpec, SynthSpec, load_images, sample_sparse_labels, save_images, synth_generate, synth_sidecar
from .errors import ConfigError, DataError, EpsSegError, NumericError

log = logging.getLogger("epsseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = apply_overrides(cfg, _parse_set(getattr(args, "set", None)))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _num_classes(data_dir: Path, given) -> int | None:
    if given is not None:
        return given
    sidecar = data_dir / "synth.json"
    if sidecar.exists():
        return json.loads(sidecar.read_text())["synth_spec"]["num_classes"]
    return None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> dict:
    spec = SynthSpec(args.num_classes, args.side, args.num_images, args.noise_std, args.seed or 0, args.cells)
    images = synth_generate(spec)
    manifest = save_images(images, args.out, synth_sidecar(spec))
    return {"manifest": str(manifest), "images": len(images)}


def cmd_sample_labels(args) -> dict:
    data = Path(args.data)
    if not 0 < args.fraction <= 1:
        raise ConfigError(f"--fraction must be in (0, 1], got {args.fraction}")
    C = _num_classes(data, args.num_classes)
    images = load_images(data, args.manifest, C)
    labels = sample_sparse_labels(images, args.fraction, args.seed or 0, args.stratified, args.mask_side, C)
    out = Path(args.out) if args.out else data / "sparse_labels.csv"
    labels.to_csv(out)
    C = C or int(max(im.labels.max() for im in images)) + 1
    counts = labels.class_counts(C)
    total = sum(im.labels.size for im in images)
    for c, n in enumerate(counts):
        print(f"class {c}: {n}")
    return {"csv": str(out), "entries": len(labels), "per_class": counts, "budget": int(np.floor(args.fraction * total + 1e-9))}


def cmd_train(args) -> dict:
    from .experiment import build_datasets, sparse_labels_for
    from .inference import evaluate_many, segment_image, write_report
    from .train import TrainData, fit

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n")
    ds = build_datasets(cfg)
    labels = sparse_labels_for(cfg, ds.train)
    labels.to_csv(out / "sparse_labels.csv")
    state, rows = fit(
        cfg.model, cfg.train, TrainData(ds.train, labels, cfg.mask, ds.val), out_dir=out,
        resume_from=args.resume,
        on_validate=lambda step, dice: print(f"step {step} validation mean Dice {dice:.4f}", flush=True),
    )
    result = {"steps": state.step, "checkpoint": str(out / "final.ckpt"), "log": str(out / "train_log.csv")}
    if ds.test:
        mask = cfg.mask if cfg.inference.inference_mask else None
        segs = [segment_image(im, state.model, cfg.inference.stride, cfg.inference.batch_size, mask) for im in ds.test]
        report = evaluate_many(segs, [im.labels for im in ds.test], cfg.model.num_classes)
        write_report(report, out / "test_report.json")
        result["test_mean_dice"] = report.mean
    return result


def cmd_predict(args) -> dict:
    from .inference import evaluate, evaluate_many, segment_image, write_overlay, write_report, write_segmentation
    from .train import load_state

    state = load_state(args.checkpoint)
    model = state.model
    data = Path(args.data)
    images = load_images(data, args.manifest, model.cfg.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = MaskSpec(args.mask_side) if args.inference_mask else None
    segs, per_image = [], {}
    for im in images:
        seg = segment_image(im, model, args.stride, inference_mask=mask)
        write_segmentation(seg, out / f"{im.id}_seg.png")
        if args.overlay:
            write_overlay(im.pixels, seg.labels, out / f"{im.id}_overlay.png")
        per_image[im.id] = evaluate(seg, im.labels, model.cfg.num_classes).mean
        segs.append(seg)
    report = evaluate_many(segs, [im.labels for im in images], model.cfg.num_classes)
    write_report(report, out / "report.json", {"per_image_mean_dice": per_image, "stride": args.stride})
    return {"images": len(images), "mean_dice": report.mean, "out": str(out)}


def cmd_eval(args) -> dict:
    from .inference import evaluate_many, read_segmentation, write_report

    data = Path(args.data)
    C = _num_classes(data, args.num_classes)
    truths = load_images(data, args.manifest, C)
    preds = []
    for im in truths:
        path = Path(args.pred) / f"{im.id}_seg.png"
        if not path.exists():
            raise DataError(f"missing prediction {path}")
        pred = read_segmentation(path)
        if pred.shape != im.labels.shape:
            raise DataError(f"{path}: shape {pred.shape} != truth {im.labels.shape}")
        preds.append(pred)
    C = C or int(max(max(p.max() for p in preds), max(t.labels.max() for t in truths))) + 1
    report = evaluate_many(preds, [t.labels for t in truths], C)
    if args.out:
        write_report(report, args.out)
    return report.to_json()


def cmd_gradcheck(args) -> dict:
    from .train import grad_check

    reports = grad_check(args.loss, coords=args.coords, tolerance=args.tolerance, seed=args.seed or 0)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.loss:8s} max_rel_err={r.max_rel_error:.3e} coords={r.coords}")
        for name, idx, a, n, rel in r.failures[:10]:
            print(f"    {name}[{idx}] analytic={a:.6e} numeric={n:.6e} rel={rel:.2e}")
    failed = [r.loss for r in reports if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return {"passed": [r.loss for r in reports]}


def cmd_ablate(args) -> dict:
    from .experiment import ablate

    cfg = _run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(args.axis, cfg, seeds, out_csv=args.out)
    for row in rows:
        print(f"{row['setting']:>12s}  mean Dice {row['mean_dice']:.4f}  ({row['per_seed_dice']})")
    return {"csv": args.out, "settings": len(rows)}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eps-seg", description="Sparsely supervised HVAE segmentation.")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic textured dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--num-classes", type=int, default=3)
    s.add_argument("--side", type=int, default=256)
    s.add_argument("--num-images", type=int, default=8)
    s.add_argument("--noise-std", type=float, default=0.05)
    s.add_argument("--cells", type=int, default=8)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample-labels", help="draw a sparse label set under a pixel budget")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", default=MANIFEST_NAME)
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--mask-side", type=int, default=MaskSpec().side)
    s.add_argument("--num-classes", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sample_labels)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment images with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", default=MANIFEST_NAME)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--inference-mask", action="store_true", help="zero the center window at inference too")
    s.add_argument("--mask-side", type=int, default=MaskSpec().side)
    s.add_argument("--overlay", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="Dice of saved predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", default=MANIFEST_NAME)
    s.add_argument("--num-classes", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    s.add_argument("--loss", choices=["inpaint", "ce", "kl", "cl", "entropy", "all"], default="all")
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="run an ablation sweep")
    s.add_argument("--axis", required=True, choices=["mask_size", "label_budget", "loss_terms"])
    s.add_argument("--config", default=None)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--out", default="ablation.csv")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except EpsSegError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}), file=sys.stderr)
        return exc.exit_code
    if result is not None:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
