"""Synthetic two-domain identity data, manifests and protocol splits.

Each identity is a sum of Gaussian blobs rendered with identity-specific
colours. Source-domain samples are that template plus pixel noise. Target
samples imitate a thermal-like sensor: luminance is inverted, blurred and
kept as a single channel before noise is added.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import container_read, container_write
from .errors import ConfigError, DataError, FormatError

DOMAINS = ("source", "target")
SPLITS = ("train", "val", "eval_gallery", "eval_probe")
MANIFEST_HEADER = ("id", "domain", "split", "path")
LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_KEY = "image"


@dataclass(frozen=True)
class SynthSpec:
    n_identities: int = 30
    samples_per_domain: int = 5
    image_size: int = 112
    n_blobs: int = 6
    noise_sigma: float = 0.05
    blur_passes: int = 2
    seed: int = 42

    def validate(self) -> "SynthSpec":
        if self.n_identities < 5:
            raise ConfigError(f"n_identities must be >= 5 to fill train/val/eval, got {self.n_identities}")
        for name in ("samples_per_domain", "image_size", "n_blobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_sigma < 0 or self.blur_passes < 0:
            raise ConfigError("noise_sigma and blur_passes must be non-negative")
        return self


# --- rendering ---------------------------------------------------------------

def identity_template(spec: SynthSpec, identity: int) -> np.ndarray:
    """Noise-free [3, S, S] source-domain image of one identity, in [0, 1]."""
    rng = np.random.default_rng([spec.seed, identity, 0])
    size = spec.image_size
    grid = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    image = np.zeros((3, size, size))
    for _ in range(spec.n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        width = rng.uniform(0.05, 0.16) * size
        amplitude = rng.uniform(0.4, 1.0)
        colour = rng.uniform(0.1, 1.0, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width * width))
        image += amplitude * colour[:, None, None] * blob[None]
    return np.clip(image, 0.0, 1.0)


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter over the last two axes with edge replication."""
    padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = img.shape[-2:]
    acc = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            acc += padded[..., i : i + h, j : j + w]
    return acc / 9.0


def domain_transform(image: np.ndarray, blur_passes: int = 2) -> np.ndarray:
    """[3, S, S] source image -> [1, S, S] inverted, blurred luminance."""
    out = 1.0 - np.tensordot(LUMA, image, axes=(0, 0))
    for _ in range(blur_passes):
        out = box_blur3(out)
    return out[None]


def render_sample(spec: SynthSpec, identity: int, index: int, domain: str, template=None) -> np.ndarray:
    if domain not in DOMAINS:
        raise DataError(f"unknown domain {domain!r}")
    if template is None:
        template = identity_template(spec, identity)
    clean = template if domain == "source" else domain_transform(template, spec.blur_passes)
    rng = np.random.default_rng([spec.seed, identity, 1 + index, DOMAINS.index(domain)])
    return np.clip(clean + spec.noise_sigma * rng.standard_normal(clean.shape), 0.0, 1.0)


# --- manifest ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    id: str
    domain: str
    split: str
    path: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    base_dir: Path = field(default_factory=Path)

    def ids(self, split: str, domain: str | None = None) -> list[str]:
        seen = dict.fromkeys(r.id for r in self.rows if r.split == split and (domain is None or r.domain == domain))
        return list(seen)

    def select(self, split: str, domain: str | None = None) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split and (domain is None or r.domain == domain)]

    def resolve(self, row: ManifestRow) -> Path:
        return self.base_dir / row.path

    def validate(self) -> "Manifest":
        for r in self.rows:
            if r.domain not in DOMAINS:
                raise FormatError(f"row for id {r.id}: domain {r.domain!r} not in {DOMAINS}")
            if r.split not in SPLITS:
                raise FormatError(f"row for id {r.id}: split {r.split!r} not in {SPLITS}")
        fit = set(self.ids("train")) | set(self.ids("val"))
        evaluation = set(self.ids("eval_gallery")) | set(self.ids("eval_probe"))
        overlap = fit & evaluation
        if overlap:
            raise DataError(f"identities {sorted(overlap)[:5]} appear in both train/val and eval splits")
        tv = set(self.ids("train")) & set(self.ids("val"))
        if tv:
            raise DataError(f"identities {sorted(tv)[:5]} appear in both train and val")
        missing = set(self.ids("eval_probe")) - set(self.ids("eval_gallery"))
        if missing:
            raise DataError(f"probe identities {sorted(missing)[:5]} have no gallery entry")
        return self

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in self.rows:
            writer.writerow((r.id, r.domain, r.split, r.path))
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != MANIFEST_HEADER:
                raise FormatError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != 4:
                    raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
                rows.append(ManifestRow(*rec))
        return cls(rows, path.parent).validate()


class ImageStore:
    """Loads manifest images on demand and keeps them in memory."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[Path, np.ndarray] = {}

    def load(self, row: ManifestRow) -> np.ndarray:
        path = self.manifest.resolve(row)
        if path not in self._cache:
            entries = container_read(path)
            if IMAGE_KEY not in entries:
                raise FormatError(f"{path}: missing entry {IMAGE_KEY!r}")
            self._cache[path] = entries[IMAGE_KEY]
        return self._cache[path]

    def stack(self, rows: list[ManifestRow]) -> np.ndarray:
        return np.stack([self.load(r) for r in rows])


# --- generation ----------------------------------------------------------------

def _id_label(identity: int) -> str:
    return f"{identity:03d}"


def image_relpath(identity: int, domain: str, index: int) -> str:
    return f"images/{_id_label(identity)}_{domain}_{index}.pdtc"


def split_identities(spec: SynthSpec, fold: int = 0) -> dict[str, list[int]]:
    """60/20/20 identity partition from a shuffle seeded by ``seed + fold``."""
    n = spec.n_identities
    order = np.random.default_rng(spec.seed + fold).permutation(n)
    n_train = round(0.6 * n)
    n_val = round(0.2 * n)
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "eval": sorted(order[n_train + n_val :].tolist()),
    }


def build_manifest(spec: SynthSpec, fold: int, base_dir) -> Manifest:
    parts = split_identities(spec, fold)
    split_of = {}
    for i in parts["train"]:
        split_of[i] = ("train", "train")
    for i in parts["val"]:
        split_of[i] = ("val", "val")
    for i in parts["eval"]:
        split_of[i] = ("eval_gallery", "eval_probe")
    rows = []
    for i in range(spec.n_identities):
        for d, domain in enumerate(DOMAINS):
            for k in range(spec.samples_per_domain):
                rows.append(ManifestRow(_id_label(i), domain, split_of[i][d], image_relpath(i, domain, k)))
    return Manifest(rows, Path(base_dir)).validate()


def write_images(spec: SynthSpec, out_dir) -> int:
    out_dir = Path(out_dir)
    count = 0
    for i in range(spec.n_identities):
        template = identity_template(spec, i)
        for domain in DOMAINS:
            for k in range(spec.samples_per_domain):
                img = render_sample(spec, i, k, domain, template)
                container_write(out_dir / image_relpath(i, domain, k), {IMAGE_KEY: img})
                count += 1
    return count


def gen_dataset(spec: SynthSpec, out_dir) -> Manifest:
    spec = spec.validate()
    out_dir = Path(out_dir)
    write_images(spec, out_dir)
    manifest = build_manifest(spec, 0, out_dir)
    manifest.write(out_dir / "manifest.csv")
    return manifest


def gen_folds(spec: SynthSpec, n_folds: int, out_dir) -> list[Manifest]:
    spec = spec.validate()
    if n_folds < 1:
        raise DataError(f"n_folds must be >= 1, got {n_folds}")
    out_dir = Path(out_dir)
    write_images(spec, out_dir)
    manifests = []
    for fold in range(n_folds):
        m = build_manifest(spec, fold, out_dir)
        m.write(out_dir / f"fold_{fold}.csv")
        manifests.append(m)
    return manifests


def _ceil_fraction(fraction: float, n: int) -> int:
    # round first so that e.g. 0.3 * 10 counts as 3, not 4
    return math.ceil(round(fraction * n, 9))


def subset_train(manifest: Manifest, fraction: float, seed: int = 0) -> Manifest:
    """Keep a random ``ceil(fraction * n)`` of the train identities.

    The validation identities are thinned by the same fraction (at least two
    kept, so impostor pairs exist); eval rows are left untouched.
    """
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return Manifest(list(manifest.rows), manifest.base_dir)
    rng = np.random.default_rng(seed)
    train_ids = manifest.ids("train")
    n_keep = _ceil_fraction(fraction, len(train_ids))
    if n_keep < 2:
        raise DataError(f"fraction {fraction} keeps {n_keep} of {len(train_ids)} train identities; need >= 2")
    keep = set(rng.choice(train_ids, size=n_keep, replace=False).tolist())
    val_ids = manifest.ids("val")
    if val_ids:
        n_val = min(len(val_ids), max(2, _ceil_fraction(fraction, len(val_ids))))
        keep |= set(rng.choice(val_ids, size=n_val, replace=False).tolist())
    rows = [r for r in manifest.rows if r.split not in ("train", "val") or r.id in keep]
    return Manifest(rows, manifest.base_dir).validate()
