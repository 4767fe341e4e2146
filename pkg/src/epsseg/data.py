"""Images, sparse labels, masked patches and batches.

Everything here is numpy; tensors only appear once a batch reaches the model.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

NONE = -1  # "unlabeled" marker inside integer label arrays
DEFAULT_PATCH_SIDE = 31
DEFAULT_MASK_SIDE = 3
MANIFEST_NAME = "manifest.tsv"


@dataclass
class LabeledImage:
    pixels: np.ndarray  # float32, [0, 1]
    labels: np.ndarray  # int64 class ids
    id: str

    def __post_init__(self):
        if self.pixels.shape != self.labels.shape or self.pixels.ndim != 2:
            raise DataError(
                f"{self.id}: pixel shape {self.pixels.shape} != label shape {self.labels.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class MaskSpec:
    side: int = DEFAULT_MASK_SIDE
    fill_value: float = 0.0

    def __post_init__(self):
        if self.side < 1 or self.side % 2 == 0:
            raise ConfigError(f"mask side must be an odd positive integer, got {self.side}")

    def check_fits(self, patch_side: int) -> None:
        if self.side > patch_side - 2:
            raise ConfigError(
                f"mask side {self.side} must leave a border inside patch side {patch_side}"
            )

    def bounds(self, patch_side: int) -> tuple[int, int]:
        lo = patch_side // 2 - self.side // 2
        return lo, lo + self.side


@dataclass
class SparseLabelSet:
    entries: list[tuple[str, int, int, int]]
    budget_fraction: float

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self, num_classes: int) -> list[int]:
        counts = [0] * num_classes
        for _, _, _, c in self.entries:
            counts[c] += 1
        return counts

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "row", "col", "class"])
            w.writerows(self.entries)

    @classmethod
    def from_csv(cls, path, budget_fraction: float = 1.0) -> "SparseLabelSet":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["image_id", "row", "col", "class"]:
                raise DataError(f"{path}: expected header image_id,row,col,class")
            entries = [(r["image_id"], int(r["row"]), int(r["col"]), int(r["class"])) for r in reader]
        return cls(entries, budget_fraction)


@dataclass
class PatchSample:
    patch: np.ndarray
    masked_patch: np.ndarray
    mask_target: np.ndarray
    label: Optional[int]
    center: tuple[int, int]


@dataclass
class PatchBatch:
    """A stacked batch. ``labels`` uses ``NONE`` (-1) for unlabeled items."""

    patches: np.ndarray  # (B, P, P)
    masked: np.ndarray  # (B, P, P)
    targets: np.ndarray  # (B, s, s)
    labels: np.ndarray  # (B,)
    centers: np.ndarray  # (B, 3): image index, row, col
    index: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def samples(self) -> list[PatchSample]:
        return [
            PatchSample(
                self.patches[i],
                self.masked[i],
                self.targets[i],
                None if self.labels[i] == NONE else int(self.labels[i]),
                (int(self.centers[i, 1]), int(self.centers[i, 2])),
            )
            for i in range(len(self))
        ]


# ---------------------------------------------------------------- loading / io


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    pixels = np.asarray(pixels, dtype=np.float64)
    lo, hi = pixels.min(), pixels.max()
    if hi <= lo:
        return np.zeros(pixels.shape, dtype=np.float32)
    return ((pixels - lo) / (hi - lo)).astype(np.float32)


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr


def read_manifest(path) -> list[tuple[str, str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image_path<TAB>label_path'")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs


def load_images(path, manifest=MANIFEST_NAME, num_classes: Optional[int] = None) -> list[LabeledImage]:
    root = Path(path)
    manifest = Path(manifest)
    if not manifest.is_absolute():
        manifest = root / manifest
    images = []
    for img_rel, lbl_rel in read_manifest(manifest):
        img_path, lbl_path = root / img_rel, root / lbl_rel
        pixels = _read_gray(img_path)
        labels = _read_gray(lbl_path)
        if pixels.shape != labels.shape:
            raise DataError(
                f"shape mismatch: {img_path} is {pixels.shape}, {lbl_path} is {labels.shape}"
            )
        labels = labels.astype(np.int64)
        if labels.min() < 0 or (num_classes is not None and labels.max() >= num_classes):
            raise DataError(
                f"{lbl_path}: label value {int(labels.max())} outside 0..{num_classes - 1}"
            )
        images.append(LabeledImage(normalize(pixels), labels, Path(img_rel).stem))
    return images


def save_images(images: Sequence[LabeledImage], outdir, sidecar: Optional[dict] = None) -> Path:
    """Write 16-bit image PNGs, 8-bit label PNGs and a manifest. Returns the manifest path."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for im in images:
        img_name, lbl_name = f"{im.id}.png", f"{im.id}_labels.png"
        q = np.round(np.clip(im.pixels, 0.0, 1.0) * 65535).astype(np.uint16)
        Image.fromarray(q).save(out / img_name)
        Image.fromarray(im.labels.astype(np.uint8)).save(out / lbl_name)
        lines.append(f"{img_name}\t{lbl_name}")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    if sidecar is not None:
        (out / "synth.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST_NAME


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 3
    image_side: int = 256
    num_images: int = 8
    noise_std: float = 0.05
    seed: int = 0
    cells: int = 8  # Voronoi cells per image

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic data needs num_classes >= 2")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.cells < self.num_classes:
            raise ConfigError("cells must be >= num_classes so every class appears")


def _texture(family: int, variant: int, shape, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if family == 0:  # flat gray
        return np.full(shape, 0.5 - 0.15 * variant)
    if family == 1:  # oriented stripes
        theta = rng.uniform(0, np.pi)
        period = 6.0 + 2.0 * variant
        phase = rng.uniform(0, 2 * np.pi)
        return 0.5 + 0.35 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    # blob field: bright gaussian spots on a dark floor
    radius = 2.5 + variant
    n = int(h * w / (7 * radius) ** 2 * 2)
    cy, cx = rng.uniform(0, h, n), rng.uniform(0, w, n)
    field_ = np.zeros(shape)
    r = int(3 * radius)
    for y0, x0 in zip(cy, cx):
        ys = slice(max(int(y0) - r, 0), min(int(y0) + r + 1, h))
        xs = slice(max(int(x0) - r, 0), min(int(x0) + r + 1, w))
        d2 = (yy[ys, xs] - y0) ** 2 + (xx[ys, xs] - x0) ** 2
        field_[ys, xs] += np.exp(-d2 / (2 * radius**2))
    return 0.2 + 0.7 * np.clip(field_, 0, 1)


def synth_generate(spec: SynthSpec) -> list[LabeledImage]:
    """Voronoi mosaics where each class is a texture family (flat, stripes, blobs)."""
    side, C = spec.image_side, spec.num_classes
    images = []
    for k in range(spec.num_images):
        rng = np.random.default_rng([spec.seed, k])
        flat = rng.choice(side * side, size=spec.cells, replace=False)
        sy, sx = np.divmod(flat, side)
        cell_class = np.concatenate([rng.permutation(C), rng.integers(0, C, spec.cells - C)])
        yy, xx = np.mgrid[0:side, 0:side]
        d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
        cell = np.argmin(d2, axis=-1)
        labels = cell_class[cell].astype(np.int64)
        pixels = np.zeros((side, side))
        for j in range(spec.cells):
            region = cell == j
            c = int(cell_class[j])
            pixels[region] = _texture(c % 3, c // 3, (side, side), rng)[region]
        if spec.noise_std > 0:
            pixels = pixels + rng.normal(0.0, spec.noise_std, pixels.shape)
        pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
        images.append(LabeledImage(pixels, labels, f"synth_{spec.seed}_{k:03d}"))
    return images


def synth_sidecar(spec: SynthSpec) -> dict:
    return {"synth_spec": asdict(spec), "seed": spec.seed}


# ---------------------------------------------------------------- sparse labels


def pure_window_mask(labels: np.ndarray, side: int) -> np.ndarray:
    """True where the side x side window centred on a pixel holds a single class.

    Uses the same reflective border handling as patch extraction.
    """
    if side == 1:
        return np.ones(labels.shape, dtype=bool)
    r = side // 2
    padded = np.pad(labels, r, mode="reflect")
    win = sliding_window_view(padded, (side, side))
    return win.min(axis=(-2, -1)) == win.max(axis=(-2, -1))


def _stratified_quota(caps: list[int], n: int) -> list[int]:
    # largest level k with sum(min(cap, k)) <= n, then hand out the remainder by class index
    lo, hi = 0, max(caps)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if sum(min(c, mid) for c in caps) <= n:
            lo = mid
        else:
            hi = mid - 1
    quota = [min(c, lo) for c in caps]
    rest = n - sum(quota)
    for i, c in enumerate(caps):
        if rest == 0:
            break
        if c > quota[i]:
            quota[i] += 1
            rest -= 1
    return quota


def sample_sparse_labels(
    images: Sequence[LabeledImage],
    budget_fraction: float,
    seed: int,
    stratified: bool = True,
    mask_side: int = DEFAULT_MASK_SIDE,
    num_classes: Optional[int] = None,
) -> SparseLabelSet:
    """Pick labeled pixel centers under a pixel budget.

    Only centers whose mask window is class-pure are eligible. For a fixed seed,
    the set drawn at a smaller budget is a prefix of the set drawn at a larger one.
    """
    if not 0 < budget_fraction <= 1:
        raise ConfigError(f"budget_fraction must be in (0, 1], got {budget_fraction}")
    total = sum(im.labels.size for im in images)
    budget = int(math.floor(budget_fraction * total + 1e-9))
    if num_classes is None:
        num_classes = int(max(im.labels.max() for im in images)) + 1

    # global flat index over all images -> (image, row, col)
    offsets = np.cumsum([0] + [im.labels.size for im in images])
    elig_idx, elig_cls = [], []
    for k, im in enumerate(images):
        ok = pure_window_mask(im.labels, mask_side).ravel()
        idx = np.flatnonzero(ok)
        elig_idx.append(idx + offsets[k])
        elig_cls.append(im.labels.ravel()[idx])
    elig_idx = np.concatenate(elig_idx)
    elig_cls = np.concatenate(elig_cls)

    if stratified:
        per_class, caps = [], []
        for c in range(num_classes):
            members = elig_idx[elig_cls == c]
            if members.size == 0:
                warnings.warn(f"class {c} has no eligible pixels; skipped", stacklevel=2)
            rng = np.random.default_rng([seed, c])
            per_class.append(members[rng.permutation(members.size)])
            caps.append(members.size)
        quota = _stratified_quota(caps, budget) if budget > 0 else [0] * num_classes
        chosen = np.concatenate([m[:q] for m, q in zip(per_class, quota)])
    else:
        for c in range(num_classes):
            if not np.any(elig_cls == c):
                warnings.warn(f"class {c} has no eligible pixels; skipped", stacklevel=2)
        rng = np.random.default_rng([seed])
        chosen = elig_idx[rng.permutation(elig_idx.size)[:budget]]

    if chosen.size == 0:
        raise DataError(
            f"no labeled pixels selected (budget {budget} of {total} pixels, "
            f"{elig_idx.size} eligible)"
        )
    entries = []
    for g in chosen:
        k = int(np.searchsorted(offsets, g, side="right") - 1)
        r, c = divmod(int(g - offsets[k]), images[k].labels.shape[1])
        entries.append((images[k].id, r, c, int(images[k].labels[r, c])))
    return SparseLabelSet(entries, budget_fraction)


# ---------------------------------------------------------------- patches


def _check_patch_side(patch_side: int) -> None:
    if patch_side < 3 or patch_side % 2 == 0:
        raise ConfigError(f"patch side must be odd and >= 3 (unique center pixel), got {patch_side}")


def _pad(a: np.ndarray, r: int) -> np.ndarray:
    # reflect needs r < dim; fall back to symmetric tiling for tiny images
    if r < min(a.shape):
        return np.pad(a, r, mode="reflect")
    return np.pad(a, r, mode="symmetric")


def _masked(patches: np.ndarray, mask: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
    P = patches.shape[-1]
    lo, hi = mask.bounds(P)
    target = patches[..., lo:hi, lo:hi].copy()
    masked = patches.copy()
    masked[..., lo:hi, lo:hi] = mask.fill_value
    return masked, target


def extract_patch(
    image: LabeledImage,
    center: tuple[int, int],
    patch_side: int = DEFAULT_PATCH_SIDE,
    mask: MaskSpec = MaskSpec(),
    labeled: bool = True,
) -> PatchSample:
    """Cut a patch around ``center`` (reflect-padded at borders) and zero its center window.

    ``label`` is the center class when ``labeled`` and the mask window is class-pure,
    otherwise None.
    """
    _check_patch_side(patch_side)
    mask.check_fits(patch_side)
    r = patch_side // 2
    row, col = center
    h, w = image.shape
    if not (0 <= row < h and 0 <= col < w):
        raise DataError(f"center {center} outside image {image.id} of shape {image.shape}")
    pix = _pad(image.pixels, r)[row : row + patch_side, col : col + patch_side]
    lab = _pad(image.labels, r)[row : row + patch_side, col : col + patch_side]
    masked, target = _masked(pix, mask)
    label = None
    if labeled:
        lo, hi = mask.bounds(patch_side)
        win = lab[lo:hi, lo:hi]
        if np.all(win == win.flat[0]):
            label = int(win.flat[0])
    return PatchSample(pix.copy(), masked, target, label, (row, col))


class PatchSource:
    """Pre-padded images for fast batched patch extraction."""

    def __init__(self, images: Sequence[LabeledImage], patch_side: int):
        _check_patch_side(patch_side)
        self.images = list(images)
        self.patch_side = patch_side
        r = patch_side // 2
        self.padded = [_pad(im.pixels, r) for im in self.images]
        self.index = {im.id: k for k, im in enumerate(self.images)}
        self.sizes = np.array([im.labels.size for im in self.images])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    def patches(self, centers: np.ndarray) -> np.ndarray:
        P = self.patch_side
        out = np.empty((len(centers), P, P), dtype=np.float32)
        for i, (k, r, c) in enumerate(centers):
            out[i] = self.padded[k][r : r + P, c : c + P]
        return out

    def random_centers(self, rng: np.random.Generator, n: int) -> np.ndarray:
        g = rng.integers(0, self.offsets[-1], size=n)
        k = np.searchsorted(self.offsets, g, side="right") - 1
        flat = g - self.offsets[k]
        widths = np.array([im.labels.shape[1] for im in self.images])[k]
        return np.stack([k, flat // widths, flat % widths], axis=1)


def _dihedral(patches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = patches.copy()
    for i, t in enumerate(rng.integers(0, 8, size=len(patches))):
        p = np.rot90(patches[i], k=int(t % 4))
        out[i] = p.T if t >= 4 else p
    return out


def make_batches(
    images: Sequence[LabeledImage],
    sparse_labels: SparseLabelSet,
    unlabeled_fraction: float = 0.5,
    batch_size: int = 32,
    patch_side: int = DEFAULT_PATCH_SIDE,
    mask: MaskSpec = MaskSpec(),
    seed: int = 0,
    start: int = 0,
    stop: Optional[int] = None,
    augment: bool = False,
) -> Iterator[PatchBatch]:
    """Yield mixed labeled/unlabeled batches.

    Batch ``k`` depends only on ``(seed, k)``, so the stream can be resumed at any
    index or split into disjoint shards. Each item is unlabeled with probability
    ``unlabeled_fraction``; labeled items are drawn with replacement from the sparse set.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 (contrastive pairs), got {batch_size}")
    if not 0 <= unlabeled_fraction <= 1:
        raise ConfigError(f"unlabeled_fraction must be in [0, 1], got {unlabeled_fraction}")
    mask.check_fits(patch_side)
    source = PatchSource(images, patch_side)
    try:
        lab_centers = np.array(
            [(source.index[i], r, c) for i, r, c, _ in sparse_labels.entries], dtype=np.int64
        ).reshape(-1, 3)
    except KeyError as exc:
        raise DataError(f"sparse label refers to unknown image {exc}") from exc
    lab_classes = np.array([e[3] for e in sparse_labels.entries], dtype=np.int64)
    if lab_centers.size == 0 and unlabeled_fraction < 1:
        raise DataError("no labeled centers available for a batch that needs them")
    classes = np.unique(lab_classes)
    if classes.size < 2 and unlabeled_fraction < 1:
        warnings.warn("only one labeled class available: negative pairs are impossible", stacklevel=2)
    by_class = {int(c): np.flatnonzero(lab_classes == c) for c in classes}

    k = start
    while stop is None or k < stop:
        rng = np.random.default_rng([seed, k])
        unl = rng.random(batch_size) < unlabeled_fraction
        n_lab = int((~unl).sum())
        picks = rng.integers(0, len(lab_centers), size=n_lab) if n_lab else np.zeros(0, np.int64)
        if n_lab >= 2 and classes.size >= 2 and np.all(lab_classes[picks] == lab_classes[picks[0]]):
            others = [c for c in by_class if c != lab_classes[picks[0]]]
            pool = by_class[others[rng.integers(len(others))]]
            picks[-1] = pool[rng.integers(pool.size)]
        centers = np.empty((batch_size, 3), dtype=np.int64)
        labels = np.full(batch_size, NONE, dtype=np.int64)
        centers[~unl] = lab_centers[picks]
        labels[~unl] = lab_classes[picks]
        centers[unl] = source.random_centers(rng, int(unl.sum()))
        patches = source.patches(centers)
        if augment:
            patches = _dihedral(patches, rng)
        masked, targets = _masked(patches, mask)
        yield PatchBatch(patches, masked, targets, labels, centers, index=k)
        k += 1
