"""Command-line front end.

Commands: gen-data, train, eval, export-simplex, geodesic-sweep, ablate,
grad-check. Exit codes: 0 success, 1 usage error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as dat
from . import train as tr
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, load_config, save_config
from .model import SegmentationModel
from .simplex import SimplexWeight, geodesic, project_to_simplex, sphere_embed
from .tensor import Tensor
from .transport import SinkhornConvergenceError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class UsageError(ValueError):
    pass


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _restore_model(ckpt_path: str) -> tuple[SegmentationModel, RunConfig]:
    state, cfg = load_checkpoint(ckpt_path)
    model = SegmentationModel(
        cfg.model_config(), seed=cfg.seed, identity_phi=cfg.freeze_identity_phi
    )
    model.load_state(state)
    return model, cfg


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if cfg.data_train_per_domain < 1 or cfg.data_val < 1 or cfg.data_test < 1:
        raise UsageError("split sizes must all be at least 1")
    gen = dat.GeneratorConfig(
        image_size=cfg.image_size,
        classes=cfg.classes,
        noise_sigma=cfg.noise_sigma,
        bias_strength=cfg.bias_strength,
    )
    n = cfg.data_train_per_domain
    samples = dat.generate("source", n, cfg.seed, gen, split="train")
    target_train = dat.generate("target", n, cfg.seed + 1, gen, split="train")
    for s in target_train:
        s.label = None  # unlabeled by contract
    samples += target_train
    samples += dat.generate("target", cfg.data_val, cfg.seed + 2, gen, split="val")
    samples += dat.generate("target", cfg.data_test, cfg.seed + 3, gen, split="test")
    out = Path(args.out)
    manifest = dat.save_dataset(samples, out)
    save_config(cfg, out / "gen_config.cfg")
    print(f"wrote {len(samples)} samples to {out}")
    for key in sorted(manifest.counts):
        print(f"  {key}: {manifest.counts[key]}")
    print(f"  manifest hash: {manifest.config_hash}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    result = tr.train_run(cfg, args.data, args.out, quiet=args.quiet)
    print(f"best validation dice: {result.best_val_dice:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _restore_model(args.checkpoint)
    manifest = dat.load_manifest(args.data)
    samples = dat.load_split(args.data, manifest, args.domain, args.split)
    if not samples:
        raise UsageError(f"split {args.domain}/{args.split} is empty")
    rows = tr.evaluate(model, samples, cfg.classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"eval_{args.domain}_{args.split}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "dice_mean", "dice_std", "assd_mean", "assd_std"])
        for r in rows:
            writer.writerow([r.name, f"{r.dice_mean:.6f}", f"{r.dice_std:.6f}",
                             f"{r.assd_mean:.6f}", f"{r.assd_std:.6f}"])
    print(f"{'region':<8} {'DSC':>16} {'ASSD (px)':>16}")
    for r in rows:
        print(f"{r.name:<8} {r.dice_mean:7.4f} +- {r.dice_std:5.4f} "
              f"{r.assd_mean:8.3f} +- {r.assd_std:6.3f}")
    print(f"csv: {csv_path}")
    return EXIT_OK


def cmd_export_simplex(args) -> int:
    model, cfg = _restore_model(args.checkpoint)
    manifest = dat.load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in manifest.entries:
        s = dat.load_sample(args.data, entry, load_label=False)
        from . import tensor as T

        with T.no_grad():
            bundle = model.forward(Tensor(s.image[None]), train=False)
        w = project_to_simplex(bundle.weights.data[0])
        emb = sphere_embed(w)
        rows.append((entry["index"], s.domain, s.slice_index, w.w, emb.t))
    m = cfg.anchors
    csv_path = out / "simplex_export.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "domain", "slice_index"]
            + [f"w{i + 1}" for i in range(m)]
            + [f"t{i + 1}" for i in range(m)]
        )
        for idx, dom, sl, w, t in rows:
            writer.writerow([idx, dom, f"{sl:.6f}"]
                            + [f"{v:.12g}" for v in w] + [f"{v:.12g}" for v in t])
    if not args.no_svg:
        from . import viz

        emb = np.stack([r[4] for r in rows])
        doms = [r[1] for r in rows]
        sls = np.array([r[2] for r in rows])
        viz.simplex_scatter_svg(emb, doms, sls, out / "simplex_scatter.svg")
        print(f"svg: {out / 'simplex_scatter.svg'}")
    print(f"exported {len(rows)} rows to {csv_path}")
    return EXIT_OK


def _parse_weight(text: str, m: int) -> SimplexWeight:
    vals = np.array([float(v) for v in text.split(",")])
    if len(vals) != m:
        raise UsageError(f"weight needs {m} components, got {len(vals)}")
    try:
        return SimplexWeight(vals)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_geodesic_sweep(args) -> int:
    model, cfg = _restore_model(args.checkpoint)
    w_start = _parse_weight(args.w_start, cfg.anchors)
    w_end = _parse_weight(args.w_end, cfg.anchors)
    if args.steps < 1:
        raise UsageError("steps must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from . import tensor as T

    ts = np.linspace(0.0, 1.0, args.steps + 1)
    labels = []
    rows = []
    for t in ts:
        w = geodesic(w_start, w_end, float(t))
        with T.no_grad():
            logits = model.segment_from_weights(w)
        lab = np.argmax(logits.data[0], axis=0)
        labels.append(lab)
        rows.append([f"{t:.6f}"] + [f"{v:.12g}" for v in w.w])
    csv_path = out / "geodesic_sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"w{i + 1}" for i in range(cfg.anchors)])
        writer.writerows(rows)
    from . import viz

    strip_path = out / "geodesic_strip.png"
    viz.label_strip_png(labels, strip_path)
    print(f"sweep columns: {len(labels)}")
    print(f"csv: {csv_path}")
    print(f"strip: {strip_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    rows = tr.run_ablations(cfg, args.data, args.out, quiet=args.quiet)
    out = Path(args.out)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        # steps_to_converge counts optimizer steps, not epochs
        writer.writerow(["variant", "mean_dice", "mean_assd", "steps_to_converge"])
        for r in rows:
            writer.writerow([r["variant"], f"{r['mean_dice']:.6f}",
                             f"{r['mean_assd']:.6f}", r["steps_to_converge"]])
    print(f"{'variant':<14} {'dice':>8} {'assd':>8} {'steps':>7}")
    for r in rows:
        print(f"{r['variant']:<14} {r['mean_dice']:8.4f} {r['mean_assd']:8.3f} "
              f"{r['steps_to_converge']:7d}")
    print(f"csv: {csv_path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import TERMS, run_grad_check

    results = run_grad_check(seed=args.seed if args.seed is not None else 0)
    tol = 1e-3
    print(f"{'term':<14} {'max rel err':>12}")
    failed = False
    for term in TERMS:
        err = results[term]
        mark = "" if err <= tol else "  FAIL"
        print(f"{term:<14} {err:12.3e}{mark}")
        failed = failed or err > tol
    if failed:
        print(f"gradient check FAILED at tolerance {tol}")
        return EXIT_NUMERIC
    print(f"all terms within tolerance {tol}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="anchorseg",
        description="Anchor-manifold domain-adaptive segmentation, desk scale.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-data", help="generate the two-domain phantom dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=list(dat.SPLITS))
    sp.add_argument("--domain", default="target", choices=list(dat.DOMAINS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export-simplex", help="export weights and embeddings")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--no-svg", action="store_true")
    sp.set_defaults(fn=cmd_export_simplex)

    sp = sub.add_parser("geodesic-sweep", help="decode along a weight geodesic")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--w-start", required=True, help="comma-separated simplex point")
    sp.add_argument("--w-end", required=True, help="comma-separated simplex point")
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=cmd_geodesic_sweep)

    sp = sub.add_parser("ablate", help="train and score the standard variants")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("grad-check", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=cmd_grad_check)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (tr.TrainingDiverged, SinkhornConvergenceError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        if isinstance(e, tr.TrainingDiverged):
            for k, v in e.report_values.items():
                print(f"  {k} = {v}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
