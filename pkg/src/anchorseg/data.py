"""Synthetic two-domain phantom dataset, dataset I/O, and evaluation metrics.

Each sample is a ring (class 1) around a disc (class 2) on background, with
random center, radii, eccentricity, orientation, and smooth angular boundary
wobble. A continuous slice-index parameter thins the ring so the label
family has a one-dimensional anatomical progression. Both domains share the
label distribution; they differ only in rendering. Domain A draws a bright
ring and dark disc with additive Gaussian noise; domain B inverts the
contrast, multiplies a smooth bias field, and applies a gamma curve.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensorfile import read_tensor, write_tensor

SPLITS = ("train", "val", "test")
DOMAINS = ("source", "target")
DICE_SMOOTH = 1e-5


class DatasetError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    """A metric needed a non-empty mask for the requested class."""


@dataclass
class GeneratorConfig:
    image_size: int = 32
    classes: int = 3
    noise_sigma: float = 0.02
    bias_strength: float = 0.35
    max_label_retries: int = 20


@dataclass
class Sample:
    image: np.ndarray                 # (1, H, W) in [0, 1]
    label: np.ndarray | None          # (H, W) integer classes, when present
    domain: str
    seed: int
    slice_index: float
    split: str = "train"


@dataclass
class DatasetManifest:
    counts: dict[str, int]            # "<domain>/<split>" -> n
    config_hash: str
    entries: list[dict] = field(default_factory=list)  # index, domain, split, ...

    def indices(self, domain: str, split: str) -> list[int]:
        return [
            e["index"]
            for e in self.entries
            if e["domain"] == domain and e["split"] == split
        ]


def splitmix64(seed: int) -> int:
    """One step of the splitmix64 sequence; derives per-sample seeds."""
    z = (seed + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _sample_seed(master: int, index: int) -> int:
    return splitmix64((master << 20) + index)


def _wobble(rng, harmonics=(2, 3, 4), amp: float = 0.04):
    amps = rng.uniform(0.0, amp, len(harmonics))
    phases = rng.uniform(0.0, 2 * np.pi, len(harmonics))

    def f(theta):
        out = np.zeros_like(theta)
        for k, a, p in zip(harmonics, amps, phases):
            out += a * np.cos(k * theta + p)
        return out

    return f


def _make_label(rng, size: int, slice_index: float):
    """Ring-and-disc label map; returns (label, geometry dict)."""
    h = w = size
    cy = h / 2.0 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2.0 + rng.uniform(-0.08, 0.08) * w
    r_out = rng.uniform(0.30, 0.38) * min(h, w)
    ecc = rng.uniform(0.0, 0.18)
    angle = rng.uniform(0.0, np.pi)
    # thicker ring at low slice index, thinner near the end of the stack
    q = 0.30 + 0.35 * slice_index + rng.uniform(-0.03, 0.03)
    q = float(np.clip(q, 0.25, 0.68))
    wob_in = _wobble(rng)
    wob_out = _wobble(rng)

    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / (r_out * (1.0 + ecc))
    v = (-sa * dx + ca * dy) / (r_out * (1.0 - ecc))
    rho = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)

    label = np.zeros((h, w), dtype=np.int64)
    label[rho < 1.0 + wob_out(theta)] = 1
    label[rho < q * (1.0 + wob_in(theta))] = 2
    geom = {"cy": cy, "cx": cx, "r_out": r_out, "ecc": ecc, "angle": angle, "q": q}
    return label, geom


def _label_valid(label: np.ndarray, classes: int) -> bool:
    present = np.unique(label)
    if len(present) != classes:
        return False
    # the disc must touch only ring pixels, never background
    disc = label == 2
    ring_or_disc = label >= 1
    grown = ndimage.binary_dilation(disc, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool))
    return bool(np.all(ring_or_disc[grown]))


def _smooth_field(rng, size: int, strength: float) -> np.ndarray:
    """Multiplicative bias in [1-strength, 1+strength], smooth across the grid."""
    coarse = rng.standard_normal((4, 4))
    zoomed = ndimage.zoom(coarse, size / 4.0, order=3)[:size, :size]
    zoomed /= max(np.abs(zoomed).max(), 1e-9)
    return 1.0 + strength * zoomed


def _minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _render(rng, label: np.ndarray, domain: str, cfg: GeneratorConfig) -> np.ndarray:
    if domain == "source":
        levels = np.array([0.15, 0.85, 0.35])
        img = levels[label]
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    else:
        levels = np.array([0.55, 0.10, 0.85])
        img = levels[label]
        img = img * _smooth_field(rng, label.shape[0], cfg.bias_strength)
        gamma = rng.uniform(0.6, 1.5)
        img = np.clip(img, 0.0, None) ** gamma
    return _minmax(img)[None]


def generate(
    domain: str,
    n: int,
    seed: int,
    cfg: GeneratorConfig | None = None,
    split: str = "train",
) -> list[Sample]:
    """Deterministically generates n samples for one domain.

    Per-sample seeds come from a splitmix64 stream off the master seed, so
    regeneration with the same arguments is bit-identical and samples are
    independent of each other.
    """
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    cfg = cfg or GeneratorConfig()
    domain_offset = 0 if domain == "source" else 1 << 48
    out = []
    for i in range(n):
        s = _sample_seed(seed + domain_offset, i)
        rng = np.random.default_rng(s)
        slice_index = float(rng.uniform(0.0, 1.0))
        label = None
        for _ in range(cfg.max_label_retries):
            label, _geom = _make_label(rng, cfg.image_size, slice_index)
            if _label_valid(label, cfg.classes):
                break
        else:
            raise DatasetError(f"could not draw a valid label for seed {s}")
        img = _render(rng, label, domain, cfg)
        out.append(
            Sample(
                image=img,
                label=label,
                domain=domain,
                seed=s,
                slice_index=slice_index,
                split=split,
            )
        )
    return out


# ---- metrics ---------------------------------------------------------------


def dice(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """2|P & T| / (|P| + |T|) for one class, with a small smoothing term."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred == cls
    t = truth == cls
    inter = np.count_nonzero(p & t)
    return float((2.0 * inter + DICE_SMOOTH) / (np.count_nonzero(p) + np.count_nonzero(t) + DICE_SMOOTH))


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    return float(np.mean([dice(pred, truth, c) for c in range(1, classes)]))


def _boundary(mask: np.ndarray) -> np.ndarray:
    """4-connectivity boundary: mask minus its erosion."""
    if not mask.any():
        return mask
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=cross, border_value=0)


def assd(pred: np.ndarray, truth: np.ndarray, cls: int, spacing: float = 1.0) -> float:
    """Average symmetric surface distance between class boundaries, in pixels
    times spacing. Raises EmptyMaskError when either mask lacks the class."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred == cls
    t = truth == cls
    if not p.any() or not t.any():
        raise EmptyMaskError(f"class {cls} missing from a mask")
    bp = _boundary(p)
    bt = _boundary(t)
    # exact Euclidean distance to the nearest boundary pixel of the other set
    dist_to_t = ndimage.distance_transform_edt(~bt)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    d_pt = dist_to_t[bp]
    d_tp = dist_to_p[bt]
    return float(spacing * (d_pt.sum() + d_tp.sum()) / (len(d_pt) + len(d_tp)))


def assd_sentinel(shape: tuple[int, int], spacing: float = 1.0) -> float:
    """Worst-case surface distance, reported when a class is missing."""
    return float(spacing * np.hypot(*shape))


# ---- dataset I/O ------------------------------------------------------------


def _hash_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def save_dataset(samples: list[Sample], out_dir: str | Path) -> DatasetManifest:
    """Writes images/NNNN.tnsr, labels/NNNN.tnsr, and manifest.cfg.

    Labels are stored only for samples that carry one. The manifest records
    per-file hashes, so tampering is detected at load time.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    counts: dict[str, int] = {}
    lines = []
    for i, s in enumerate(samples):
        name = f"{i:04d}.tnsr"
        write_tensor(out / "images" / name, s.image)
        has_label = s.label is not None
        if has_label:
            write_tensor(out / "labels" / name, s.label.astype(np.float64))
        key = f"{s.domain}/{s.split}"
        counts[key] = counts.get(key, 0) + 1
        entries.append(
            {
                "index": i,
                "domain": s.domain,
                "split": s.split,
                "seed": s.seed,
                "slice_index": s.slice_index,
                "has_label": has_label,
            }
        )
        lines.append(
            f"sample.{i:04d} = domain:{s.domain},split:{s.split},seed:{s.seed},"
            f"slice:{s.slice_index!r},label:{int(has_label)}"
        )
        lines.append(
            f"sha256.images/{name} = {_hash_bytes((out / 'images' / name).read_bytes())}"
        )
        if has_label:
            lines.append(
                f"sha256.labels/{name} = {_hash_bytes((out / 'labels' / name).read_bytes())}"
            )
    cfg_hash = _hash_bytes("\n".join(sorted(lines)).encode())
    header = [f"count = {len(samples)}", f"config_hash = {cfg_hash}"]
    (out / "manifest.cfg").write_text("\n".join(header + lines) + "\n", encoding="utf-8")
    return DatasetManifest(counts=counts, config_hash=cfg_hash, entries=entries)


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    text = (root / "manifest.cfg").read_text(encoding="utf-8")
    entries = []
    counts: dict[str, int] = {}
    cfg_hash = ""
    body_lines = []
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        value = value.strip()
        if key == "config_hash":
            cfg_hash = value
            continue
        if key == "count":
            continue
        body_lines.append(line)
        if key.startswith("sample."):
            idx = int(key.split(".")[1])
            fields = dict(kv.split(":", 1) for kv in value.split(","))
            counts_key = f"{fields['domain']}/{fields['split']}"
            counts[counts_key] = counts.get(counts_key, 0) + 1
            entries.append(
                {
                    "index": idx,
                    "domain": fields["domain"],
                    "split": fields["split"],
                    "seed": int(fields["seed"]),
                    "slice_index": float(fields["slice"]),
                    "has_label": fields["label"] == "1",
                }
            )
        elif key.startswith("sha256."):
            rel = key[len("sha256."):]
            actual = _hash_bytes((root / rel).read_bytes())
            if actual != value:
                raise DatasetError(f"hash mismatch for {rel}")
    recomputed = _hash_bytes("\n".join(sorted(body_lines)).encode())
    if recomputed != cfg_hash:
        raise DatasetError("manifest hash mismatch")
    return DatasetManifest(counts=counts, config_hash=cfg_hash, entries=entries)


# hook point for instrumentation in tests and for the no-target-labels contract
def read_sample_tensor(path: Path) -> np.ndarray:
    return read_tensor(path)


def load_sample(root: str | Path, entry: dict, load_label: bool = True) -> Sample:
    root = Path(root)
    name = f"{entry['index']:04d}.tnsr"
    image = read_sample_tensor(root / "images" / name)
    label = None
    if load_label and entry["has_label"]:
        label = read_sample_tensor(root / "labels" / name).astype(np.int64)
    return Sample(
        image=image,
        label=label,
        domain=entry["domain"],
        seed=entry["seed"],
        slice_index=entry["slice_index"],
        split=entry["split"],
    )


def load_split(
    root: str | Path,
    manifest: DatasetManifest,
    domain: str,
    split: str,
    load_labels: bool = True,
) -> list[Sample]:
    return [
        load_sample(root, e, load_label=load_labels)
        for e in manifest.entries
        if e["domain"] == domain and e["split"] == split
    ]


def onehot(label: np.ndarray, classes: int) -> np.ndarray:
    """(H, W) integer map to (K, H, W) one-hot float64."""
    out = np.zeros((classes,) + label.shape)
    for c in range(classes):
        out[c] = label == c
    return out
