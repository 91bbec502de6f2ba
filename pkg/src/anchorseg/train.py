"""Training loop, Adam optimizer, validation, evaluation tables, and the
ablation harness."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as dat
from . import losses
from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Sample
from .losses import LossReport
from .model import SegmentationModel, split_bundle
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report_values: dict):
        super().__init__(f"non-finite loss at step {step}: {report_values}")
        self.step = step
        self.report_values = report_values


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _stack_onehot(samples: list[Sample], classes: int) -> np.ndarray:
    return np.stack([dat.onehot(s.label, classes) for s in samples])


def train_step(
    model: SegmentationModel,
    opt: Adam,
    xs: np.ndarray,
    ys_onehot: np.ndarray,
    xt: np.ndarray | None,
    weights: losses.LossWeights,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> LossReport:
    model.zero_grad()
    xs_t = Tensor(xs)
    ys_t = Tensor(ys_onehot)
    if xt is None:
        source = model.forward(xs_t, train=True, rng=rng)
        target = None
        xt_t = None
    else:
        joint = model.forward(Tensor(np.concatenate([xs, xt])), train=True, rng=rng)
        source, target = split_bundle(joint, xs.shape[0])
        xt_t = Tensor(xt)
    total, report = losses.total_loss(
        source,
        target,
        xs_t,
        xt_t,
        ys_t,
        model.bank,
        weights,
        align_on=not cfg.disable_align,
        geo_on=not cfg.disable_geo,
        anchor_on=not cfg.disable_anchor,
    )
    if not np.isfinite(report.total):
        raise TrainingDiverged(opt.t, {f: getattr(report, f) for f in report.FIELDS})
    total.backward()
    opt.step()
    return report


def predict_labels(model: SegmentationModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Eval-mode argmax segmentation for a stack of (1,H,W) images."""
    outs = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch):
            bundle = model.forward(Tensor(images[i : i + batch]), train=False)
            outs.append(np.argmax(bundle.seg_logits.data, axis=1))
    return np.concatenate(outs).astype(np.int64)


def mean_val_dice(model: SegmentationModel, samples: list[Sample], classes: int) -> float:
    preds = predict_labels(model, _stack_images(samples))
    scores = [
        dat.mean_foreground_dice(p, s.label, classes) for p, s in zip(preds, samples)
    ]
    return float(np.mean(scores))


@dataclass
class EvalRow:
    name: str
    dice_mean: float
    dice_std: float
    assd_mean: float
    assd_std: float


def evaluate(model: SegmentationModel, samples: list[Sample], classes: int) -> list[EvalRow]:
    """Per-class and mean-over-foreground DSC/ASSD, mean and std across images.

    A class missing from a prediction scores the worst-case ASSD sentinel so
    the table stays finite and the run continues.
    """
    preds = predict_labels(model, _stack_images(samples))
    shape = samples[0].label.shape
    per_class_dice = {c: [] for c in range(1, classes)}
    per_class_assd = {c: [] for c in range(1, classes)}
    for p, s in zip(preds, samples):
        for c in range(1, classes):
            per_class_dice[c].append(dat.dice(p, s.label, c))
            try:
                per_class_assd[c].append(dat.assd(p, s.label, c))
            except dat.EmptyMaskError:
                per_class_assd[c].append(dat.assd_sentinel(shape))
    rows = []
    all_dice = np.array([per_class_dice[c] for c in range(1, classes)])
    all_assd = np.array([per_class_assd[c] for c in range(1, classes)])
    mean_d = all_dice.mean(axis=0)
    mean_a = all_assd.mean(axis=0)
    rows.append(EvalRow("mean", float(mean_d.mean()), float(mean_d.std()),
                        float(mean_a.mean()), float(mean_a.std())))
    for c in range(1, classes):
        d = np.array(per_class_dice[c])
        a = np.array(per_class_assd[c])
        rows.append(EvalRow(f"class{c}", float(d.mean()), float(d.std()),
                            float(a.mean()), float(a.std())))
    return rows


@dataclass
class RunResult:
    checkpoint: Path
    log_csv: Path
    best_val_dice: float
    val_history: list[tuple[int, float]]
    steps_run: int


def train_run(cfg: RunConfig, dataset_dir: str | Path, out_dir: str | Path,
              quiet: bool = False) -> RunResult:
    """Full training run: deterministic given cfg.seed and the dataset.

    Logs one CSV row per step, validates on the labeled target validation
    split, and keeps the checkpoint with the best validation Dice. Target
    training labels are never read, even when present on disk.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(dataset_dir)
    manifest = dat.load_manifest(dataset_dir)
    source_train = dat.load_split(dataset_dir, manifest, "source", "train")
    target_train = dat.load_split(
        dataset_dir, manifest, "target", "train", load_labels=False
    )
    val = dat.load_split(dataset_dir, manifest, "target", "val")

    model = SegmentationModel(
        cfg.model_config(), seed=cfg.seed, identity_phi=cfg.freeze_identity_phi
    )
    weights = cfg.loss_weights()
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    log_path = out / "train_log.csv"
    ckpt_path = out / "best.ckpt"
    best = -1.0
    history: list[tuple[int, float]] = []
    t_start = time.perf_counter()
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + list(LossReport.FIELDS) + ["wall_time_s"])
        for step in range(1, cfg.steps + 1):
            src_idx = rng.choice(len(source_train), size=cfg.batch_source, replace=False)
            xs = _stack_images([source_train[i] for i in src_idx])
            ys = _stack_onehot([source_train[i] for i in src_idx], cfg.classes)
            if cfg.source_only:
                xt = None
            else:
                tgt_idx = rng.choice(len(target_train), size=cfg.batch_target, replace=False)
                xt = _stack_images([target_train[i] for i in tgt_idx])
            report = train_step(model, opt, xs, ys, xt, weights, cfg, rng)
            writer.writerow(
                [step] + [f"{v:.10g}" for v in report.values()]
                + [f"{time.perf_counter() - t_start:.3f}"]
            )
            if step % cfg.val_interval == 0 or step == cfg.steps:
                vd = mean_val_dice(model, val, cfg.classes)
                history.append((step, vd))
                if vd > best:
                    best = vd
                    save_checkpoint(ckpt_path, model.state(), cfg)
                if not quiet:
                    print(f"step {step:5d}  total {report.total:9.4f}  val dice {vd:.4f}")
    if best < 0:
        save_checkpoint(ckpt_path, model.state(), cfg)
    return RunResult(ckpt_path, log_path, best, history, cfg.steps)


def steps_to_converge(history: list[tuple[int, float]], frac: float = 0.95) -> int:
    """First validation step whose smoothed Dice reaches frac of the final
    smoothed value; the step-based analogue of an epochs-to-converge count."""
    if not history:
        return 0
    vals = np.array([v for _, v in history])
    steps = [s for s, _ in history]
    k = min(3, len(vals))
    smooth = np.convolve(vals, np.ones(k) / k, mode="same")
    target = frac * smooth[-1]
    for s, v in zip(steps, smooth):
        if v >= target:
            return s
    return steps[-1]


ABLATION_VARIANTS = ("full", "identity_phi", "no_anchor", "no_align", "no_geo")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    import dataclasses

    out = dataclasses.replace(cfg)
    if variant == "full":
        return out
    if variant == "identity_phi":
        out.freeze_identity_phi = True
    elif variant == "no_anchor":
        out.disable_anchor = True
    elif variant == "no_align":
        out.disable_align = True
    elif variant == "no_geo":
        out.disable_geo = True
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return out


def run_ablations(cfg: RunConfig, dataset_dir: str | Path, out_dir: str | Path,
                  quiet: bool = False) -> list[dict]:
    """Trains the five standard variants with a shared seed and reports
    target-test Dice/ASSD plus a steps-to-converge column."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(dataset_dir)
    manifest = dat.load_manifest(dataset_dir)
    test = dat.load_split(dataset_dir, manifest, "target", "test")
    rows = []
    for variant in ABLATION_VARIANTS:
        vcfg = variant_config(cfg, variant)
        result = train_run(vcfg, dataset_dir, out / variant, quiet=quiet)
        from .checkpoint import load_checkpoint

        state, _ = load_checkpoint(result.checkpoint)
        model = SegmentationModel(
            vcfg.model_config(), seed=vcfg.seed, identity_phi=vcfg.freeze_identity_phi
        )
        model.load_state(state)
        table = evaluate(model, test, cfg.classes)
        rows.append(
            {
                "variant": variant,
                "mean_dice": table[0].dice_mean,
                "mean_assd": table[0].assd_mean,
                "steps_to_converge": steps_to_converge(result.val_history),
            }
        )
    return rows
