"""Class-incremental streams, synthetic skewed data, augmentation and ingestion."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError, ProtocolError, SpecError, StreamContractError

__all__ = [
    "LabeledSamples",
    "StepData",
    "IncrementalStream",
    "SkewSpec",
    "EYEPACS_LIKE_8",
    "make_stream",
    "generate_skewed",
    "allocate_counts",
    "augment",
    "hflip",
    "ingest",
]

# 8-class proportions with one dominant class and a long tail, echoing the
# retinopathy grading skew (most samples healthy, a few percent severe).
EYEPACS_LIKE_8 = (0.50, 0.15, 0.10, 0.08, 0.06, 0.05, 0.03, 0.03)


@dataclass
class LabeledSamples:
    x: np.ndarray
    y: np.ndarray
    class_names: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if not self.manifest:
            labels, counts = np.unique(self.y, return_counts=True)
            self.manifest = {"counts": {str(int(k)): int(v) for k, v in zip(labels, counts)}}

    def __len__(self) -> int:
        return len(self.y)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))


@dataclass
class StepData:
    """Training data of one step; ``classes`` uses stream (relabeled) ids."""

    classes: list[int]
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray  # positions in the source dataset


@dataclass
class IncrementalStream:
    steps: list[StepData]
    test_sets: list[tuple[np.ndarray, np.ndarray]]  # one (x, y) per step group
    class_order: list[int]  # class_order[k] = original label of stream class k
    protocol: tuple[int, int]
    train_index: dict[int, list[int]]
    test_index: dict[int, list[int]]
    class_order_seed: int
    split_seed: int

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    def manifest(self) -> dict:
        return {
            "protocol": {"initial_classes": self.protocol[0], "per_step": self.protocol[1]},
            "class_order": self.class_order,
            "class_order_seed": self.class_order_seed,
            "split_seed": self.split_seed,
            "groups": [s.classes for s in self.steps],
            "counts": {
                str(k): {"train": len(self.train_index[k]), "test": len(self.test_index[k])}
                for k in range(self.num_classes)
            },
            "test_index": {str(k): v for k, v in self.test_index.items()},
        }


def make_stream(
    dataset: LabeledSamples,
    initial_classes: int,
    per_step: int,
    class_order_seed: int,
    *,
    test_fraction: float = 0.2,
    split_seed: int = 0,
) -> IncrementalStream:
    """Split ``dataset`` into an incremental stream.

    The class order is a permutation drawn from ``class_order_seed``; stream
    class ``k`` is original label ``class_order[k]``. The train/test split of
    each class depends only on ``split_seed``, so changing the order seed
    never moves a sample between splits.
    """
    classes = dataset.classes()
    C = len(classes)
    if initial_classes < 1 or per_step < 1:
        raise ProtocolError("initial_classes and per_step must be >= 1")
    rest = C - initial_classes
    if rest < per_step or rest % per_step:
        raise ProtocolError(
            f"{C} classes cannot be split as {initial_classes} initial + k*{per_step} (k >= 1)"
        )
    if not 0.0 < test_fraction < 1.0:
        raise ProtocolError("test_fraction must be in (0, 1)")

    train_idx: dict[int, np.ndarray] = {}
    test_idx: dict[int, np.ndarray] = {}
    for c in classes:
        members = np.flatnonzero(dataset.y == c)
        # per-class generator keyed on the label keeps splits order-independent
        rng = np.random.default_rng([split_seed, c])
        perm = rng.permutation(members)
        n_test = int(round(test_fraction * len(members)))
        n_test = min(max(n_test, 1), len(members) - 1)
        test_idx[c] = np.sort(perm[:n_test])
        train_idx[c] = np.sort(perm[n_test:])

    order = [int(c) for c in np.random.default_rng(class_order_seed).permutation(classes)]
    relabel = {orig: k for k, orig in enumerate(order)}

    sizes = [initial_classes] + [per_step] * (rest // per_step)
    steps: list[StepData] = []
    test_sets: list[tuple[np.ndarray, np.ndarray]] = []
    start = 0
    for size in sizes:
        group = list(range(start, start + size))
        start += size
        idx = np.concatenate([train_idx[order[k]] for k in group])
        tidx = np.concatenate([test_idx[order[k]] for k in group])
        steps.append(
            StepData(
                classes=group,
                x=dataset.x[idx],
                y=np.array([relabel[int(v)] for v in dataset.y[idx]], dtype=np.int64),
                index=idx,
            )
        )
        test_sets.append(
            (dataset.x[tidx], np.array([relabel[int(v)] for v in dataset.y[tidx]], dtype=np.int64))
        )
    return IncrementalStream(
        steps=steps,
        test_sets=test_sets,
        class_order=order,
        protocol=(initial_classes, per_step),
        train_index={relabel[c]: train_idx[c].tolist() for c in classes},
        test_index={relabel[c]: test_idx[c].tolist() for c in classes},
        class_order_seed=class_order_seed,
        split_seed=split_seed,
    )


@dataclass
class SkewSpec:
    """Synthetic dataset description.

    ``difficulty`` is the within-class noise scale relative to the spread of
    class centres; larger values mean more overlap. ``modes_per_class`` > 1
    makes each class a mixture so a linear read-out of the raw input is not
    enough. Set ``image_shape`` for textured images instead of vectors.
    """

    class_proportions: Sequence[float] = EYEPACS_LIKE_8
    total_samples: int = 4000
    feature_dim: int = 16
    image_shape: tuple[int, int, int] | None = None
    difficulty: float = 2.0
    modes_per_class: int = 2
    budget: int = 20

    def validate(self) -> None:
        p = np.asarray(self.class_proportions, dtype=float)
        if p.ndim != 1 or len(p) < 2:
            raise SpecError("need at least two class proportions")
        if (p <= 0).any():
            raise SpecError("class proportions must be positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise SpecError(f"class proportions sum to {p.sum()!r}, not 1")
        if self.total_samples < 1 or self.feature_dim < 1 or self.modes_per_class < 1:
            raise SpecError("total_samples, feature_dim and modes_per_class must be positive")
        if self.difficulty < 0:
            raise SpecError("difficulty must be >= 0")


def allocate_counts(proportions: Sequence[float], total: int) -> list[int]:
    """Largest-remainder rounding of ``proportions * total`` (sums to ``total``)."""
    p = np.asarray(proportions, dtype=float)
    raw = p * total
    base = np.floor(raw + 1e-9).astype(int)
    short = total - int(base.sum())
    if short > 0:
        remainders = raw - base
        for k in np.argsort(-remainders, kind="stable")[:short]:
            base[k] += 1
    return base.tolist()


def generate_skewed(spec: SkewSpec, seed: int) -> LabeledSamples:
    spec.validate()
    counts = allocate_counts(spec.class_proportions, spec.total_samples)
    for c, n in enumerate(counts):
        if n < spec.budget + 1:
            raise SpecError(f"class {c} gets {n} samples, fewer than budget+1={spec.budget + 1}")
    rng = np.random.default_rng(seed)
    C = len(counts)
    if spec.image_shape is None:
        x = _gaussian_mixture(rng, counts, spec)
    else:
        x = _textures(rng, counts, spec)
    y = np.repeat(np.arange(C), counts)
    manifest = {"counts": {str(c): n for c, n in enumerate(counts)}, "seed": seed, "generator": "skewed"}
    return LabeledSamples(x, y, [f"class{c}" for c in range(C)], manifest)


def _gaussian_mixture(rng: np.random.Generator, counts: list[int], spec: SkewSpec) -> np.ndarray:
    d = spec.feature_dim
    C = len(counts)
    # classes share latent directions so later classes overlap earlier ones
    basis = rng.normal(size=(C + 2, d)) / np.sqrt(d)
    mix = rng.normal(size=(C, C + 2))
    centres = mix @ basis * 2.0
    parts = []
    for c, n in enumerate(counts):
        offsets = rng.normal(size=(spec.modes_per_class, d)) * 0.5
        mode = rng.integers(spec.modes_per_class, size=n)
        noise = rng.normal(size=(n, d)) * spec.difficulty
        parts.append(centres[c] + offsets[mode] + noise)
    return np.concatenate(parts).astype(np.float32)


def _textures(rng: np.random.Generator, counts: list[int], spec: SkewSpec) -> np.ndarray:
    ch, h, w = spec.image_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    parts = []
    for c, n in enumerate(counts):
        angle = np.pi * c / len(counts)
        freq = 0.35 + 0.25 * (c % 3)
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
        proj = np.cos(angle) * xx + np.sin(angle) * yy
        img = np.sin(freq * proj[None] + phase)
        img = img + rng.normal(size=(n, h, w)) * spec.difficulty
        parts.append(np.repeat(img[:, None], ch, axis=1))
    return np.concatenate(parts).astype(np.float32)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment(sample: np.ndarray, seed) -> np.ndarray:
    """Random horizontal flip (p=0.5) plus a padded random crop.

    Padding is 10% of each spatial side. Vector samples (``ndim < 3``) are
    returned unchanged; labels are never touched.
    """
    sample = np.asarray(sample)
    if sample.ndim < 3:
        return sample
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = hflip(sample) if rng.random() < 0.5 else sample.copy()
    h, w = out.shape[-2:]
    ph, pw = max(1, int(round(0.1 * h))), max(1, int(round(0.1 * w)))
    padded = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(ph, ph), (pw, pw)])
    top = int(rng.integers(0, 2 * ph + 1))
    left = int(rng.integers(0, 2 * pw + 1))
    return padded[..., top : top + h, left : left + w].copy()


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


def ingest(path: str | Path, format_spec: dict | str) -> LabeledSamples:
    """Read a dataset from disk.

    ``format_spec`` is ``"folder"`` / ``{"format": "folder"}`` for a directory
    of class sub-folders holding images or ``.npy`` arrays, or
    ``{"format": "table", "label_column": "label", "delimiter": ","}`` for a
    delimited text table whose other columns are numeric features.
    """
    spec = {"format": format_spec} if isinstance(format_spec, str) else dict(format_spec)
    fmt = spec.get("format")
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "does not exist")
    if fmt == "folder":
        return _ingest_folder(path)
    if fmt == "table":
        return _ingest_table(path, spec.get("label_column", "label"), spec.get("delimiter", ","))
    raise IngestionError(path, f"unknown format {fmt!r}")


def _ingest_folder(root: Path) -> LabeledSamples:
    if not root.is_dir():
        raise IngestionError(root, "folder format needs a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(root, "no class sub-folders")
    xs, ys, counts = [], [], {}
    for label, cdir in enumerate(class_dirs):
        files = sorted(f for f in cdir.iterdir() if f.suffix.lower() in _IMAGE_SUFFIXES | {".npy"})
        if not files:
            raise IngestionError(cdir, "empty class")
        for f in files:
            try:
                xs.append(_read_image(f))
            except Exception as exc:
                raise IngestionError(f, f"unreadable ({exc})") from exc
            ys.append(label)
        counts[cdir.name] = len(files)
    shapes = {a.shape for a in xs}
    if len(shapes) != 1:
        raise IngestionError(root, f"images have differing shapes {sorted(shapes)}")
    manifest = {"counts": counts, "source": str(root), "format": "folder"}
    return LabeledSamples(np.stack(xs), np.array(ys), [d.name for d in class_dirs], manifest)


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "P") else "RGB"), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[-1] in (1, 3, 4) and arr.shape[0] not in (1, 3, 4):
        arr = np.moveaxis(arr, -1, 0)
    return arr


def _ingest_table(path: Path, label_column: str, delimiter: str) -> LabeledSamples:
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh, delimiter=delimiter)
            fields = reader.fieldnames or []
            rows = list(reader)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise IngestionError(path, f"unreadable ({exc})") from exc
    if label_column not in fields:
        raise IngestionError(path, f"missing label column {label_column!r}")
    feature_cols = [f for f in fields if f != label_column]
    if not feature_cols or not rows:
        raise IngestionError(path, "table has no feature columns or no rows")
    names = sorted({r[label_column] for r in rows})
    lookup = {n: k for k, n in enumerate(names)}
    try:
        x = np.array([[float(r[c]) for c in feature_cols] for r in rows], dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise IngestionError(path, f"non-numeric feature value ({exc})") from exc
    y = np.array([lookup[r[label_column]] for r in rows])
    counts = {n: int((y == lookup[n]).sum()) for n in names}
    manifest = {"counts": counts, "source": str(path), "format": "table"}
    return LabeledSamples(x, y, names, manifest)


def write_manifest(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
