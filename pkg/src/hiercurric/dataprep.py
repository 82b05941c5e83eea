"""Training-manifest construction, synthetic data, and near-duplicate search.

Synthetic datasets are drawn as clipped Gaussians around mid-gray: basic
prototypes, subordinate prototypes clustered around them at a tighter scale,
and per-sample noise. All randomness flows from explicit 64-bit seeds through
numpy's PCG64 generator so every artifact is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import nnkernel as nk
from .errors import ValidationError, ZeroVarianceError
from .taxonomy import LabelMap, SynsetGraph, build_graph

log = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "val", "test")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    source: str        # file path or synth descriptor
    leaf_id: str


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split tag {self.split_tag!r}")
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate sample ids in manifest")

    def __len__(self) -> int:
        return len(self.samples)

    def leaf_ids(self) -> list[str]:
        return [s.leaf_id for s in self.samples]

    def subset(self, keep_ids) -> "DatasetManifest":
        keep = set(keep_ids)
        return replace(self, samples=tuple(
            s for s in self.samples if s.sample_id in keep))


@dataclass(frozen=True)
class SynthSpec:
    n_basic: int
    subs_per_basic: int
    image_size: tuple[int, int, int] = (3, 16, 16)
    prototype_scale: float = 0.25
    subordinate_scale: float = 0.1
    noise_scale: float = 0.05
    samples_per_sub: int = 50
    seed: int = 0

    def __post_init__(self):
        if min(self.n_basic, self.subs_per_basic, self.samples_per_sub) < 1:
            raise ValidationError("all synthetic counts must be >= 1")
        if any(d < 1 for d in self.image_size):
            raise ValidationError("image dims must be >= 1")
        if self.prototype_scale <= 0:
            raise ValidationError("prototype scale must be > 0")
        if not 0 <= self.subordinate_scale < self.prototype_scale:
            raise ValidationError(
                "subordinate scale must satisfy 0 <= s < prototype scale")
        if self.noise_scale < 0:
            raise ValidationError("noise scale must be >= 0")


@dataclass(frozen=True)
class SyntheticData:
    manifest: DatasetManifest
    graph: SynsetGraph
    basic_marks: frozenset[str]
    images: dict[str, np.ndarray] = field(repr=False)
    basic_prototypes: dict[str, np.ndarray] = field(repr=False)
    sub_prototypes: dict[str, np.ndarray] = field(repr=False)


def generate_synthetic(spec: SynthSpec) -> SyntheticData:
    """Draw a seeded two-level dataset: root -> basics -> subordinate leaves.

    Basic prototypes are mid-gray plus Gaussian noise at the prototype scale;
    each subordinate tightens around its basic prototype; each sample adds
    per-sample noise. Everything is clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.image_size
    shape = (c, h, w)

    basic_ids = [f"basic_{i:02d}" for i in range(spec.n_basic)]
    edges = [("root", b) for b in basic_ids]
    samples = []
    images: dict[str, np.ndarray] = {}
    basic_protos: dict[str, np.ndarray] = {}
    sub_protos: dict[str, np.ndarray] = {}

    for b, basic in enumerate(basic_ids):
        proto = np.clip(0.5 + spec.prototype_scale * rng.standard_normal(shape), 0, 1)
        basic_protos[basic] = proto
        for s in range(spec.subs_per_basic):
            leaf = f"sub_{b:02d}_{s:02d}"
            edges.append((basic, leaf))
            sub = np.clip(proto + spec.subordinate_scale * rng.standard_normal(shape), 0, 1)
            sub_protos[leaf] = sub
            for k in range(spec.samples_per_sub):
                sid = f"{leaf}_{k:04d}"
                img = np.clip(sub + spec.noise_scale * rng.standard_normal(shape), 0, 1)
                images[sid] = img
                samples.append(Sample(sid, f"synth:{sid}", leaf))

    graph = build_graph(edges)
    return SyntheticData(
        manifest=DatasetManifest(tuple(samples)),
        graph=graph,
        basic_marks=frozenset(basic_ids),
        images=images,
        basic_prototypes=basic_protos,
        sub_prototypes=sub_protos,
    )


def cap_per_category(manifest: DatasetManifest, labelmap: LabelMap,
                     level: str, cap: int, seed: int) -> DatasetManifest:
    """Keep at most ``cap`` samples per category at the chosen level.

    Over-cap categories are thinned by seeded uniform sampling without
    replacement; the relative order of retained samples is preserved.
    """
    if cap < 1:
        raise ValidationError("cap must be >= 1")
    if level not in ("basic", "sub"):
        raise ValidationError(f"unknown level {level!r}")

    groups: dict[int, list[int]] = {}
    for pos, sample in enumerate(manifest.samples):
        if sample.leaf_id not in labelmap.entries:
            raise ValidationError(f"unknown leaf id {sample.leaf_id!r} in manifest")
        sub_i, basic_i = labelmap.entries[sample.leaf_id]
        key = basic_i if level == "basic" else sub_i
        groups.setdefault(key, []).append(pos)

    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for key in sorted(groups):  # fixed order keeps generator use deterministic
        positions = groups[key]
        if len(positions) <= cap:
            keep.update(positions)
        else:
            chosen = rng.choice(len(positions), size=cap, replace=False)
            keep.update(positions[i] for i in chosen)
    return replace(manifest, samples=tuple(
        s for pos, s in enumerate(manifest.samples) if pos in keep))


def random_class_splits(manifest: DatasetManifest, n_train_per_class: int,
                        max_test_per_class: int, n_splits: int,
                        seed: int) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Seeded per-class train/test partitions; classes are the leaf ids.

    Each split draws exactly ``n_train_per_class`` training samples per class
    and up to ``max_test_per_class`` of the remainder as test samples.
    """
    if n_train_per_class < 1 or max_test_per_class < 1 or n_splits < 1:
        raise ValidationError("split sizes must be >= 1")
    by_class: dict[str, list[int]] = {}
    for pos, sample in enumerate(manifest.samples):
        by_class.setdefault(sample.leaf_id, []).append(pos)
    for leaf, positions in sorted(by_class.items()):
        if len(positions) < n_train_per_class + 1:
            raise ValidationError(
                f"class {leaf!r} has {len(positions)} samples, needs at least "
                f"{n_train_per_class + 1}")

    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        train_pos: list[int] = []
        test_pos: list[int] = []
        for leaf in sorted(by_class):
            positions = by_class[leaf]
            order = rng.permutation(len(positions))
            train_pos.extend(positions[i] for i in order[:n_train_per_class])
            rest = order[n_train_per_class:n_train_per_class + max_test_per_class]
            test_pos.extend(positions[i] for i in rest)
        train = replace(manifest, samples=tuple(
            manifest.samples[i] for i in sorted(train_pos)), split_tag="train")
        test = replace(manifest, samples=tuple(
            manifest.samples[i] for i in sorted(test_pos)), split_tag="test")
        splits.append((train, test))
    return splits


# ---------------------------------------------------------------------------
# normalized correlation and overlap search

COMPARISON_RESOLUTION = 32
DEFAULT_OVERLAP_THRESHOLD = 0.99


def _resize_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = plane.shape
    if (h, w) == (out_h, out_w):
        return plane
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = plane[np.ix_(y0, x0)] * (1 - fx) + plane[np.ix_(y0, x1)] * fx
    bot = plane[np.ix_(y1, x0)] * (1 - fx) + plane[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def comparison_form(image: np.ndarray,
                    resolution: int = COMPARISON_RESOLUTION) -> np.ndarray:
    """Mean over channels, then bilinear resample to the comparison square."""
    if image.ndim == 2:
        gray = image
    elif image.ndim == 3:
        gray = image.mean(axis=0)
    else:
        raise ValidationError(f"expected CHW or HW image, got shape {image.shape}")
    return _resize_bilinear(gray, resolution, resolution)


def normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equal-shape images, in [-1, 1].

    A constant input raises ZeroVarianceError rather than returning NaN.
    Bit-identical inputs score exactly 1.0.
    """
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    av = a.ravel() - a.mean()
    bv = b.ravel() - b.mean()
    na = np.sqrt(av @ av)
    nb = np.sqrt(bv @ bv)
    if na == 0.0 or nb == 0.0:
        raise ZeroVarianceError("constant image has no correlation")
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip((av @ bv) / (na * nb), -1.0, 1.0))


def find_overlaps(set_a: DatasetManifest, set_b: DatasetManifest,
                  threshold: float, images_a: Mapping[str, np.ndarray],
                  images_b: Mapping[str, np.ndarray],
                  resolution: int = COMPARISON_RESOLUTION):
    """All cross-set pairs whose correlation reaches ``threshold``.

    Returns (matches, filtered_set_a): matches are (id_a, id_b, score)
    sorted by descending score then ids; filtered_set_a drops every matched
    a-sample. Pairs sharing a sample_id are skipped (self-comparison).
    Constant images are skipped with a warning.
    """
    if not 0 < threshold <= 1:
        raise ValidationError("threshold must be in (0, 1]")

    def standardize(manifest, images):
        ids, rows, exact = [], [], []
        for s in manifest.samples:
            form = comparison_form(np.asarray(images[s.sample_id], dtype=np.float64),
                                   resolution)
            v = form.ravel() - form.mean()
            norm = np.sqrt(v @ v)
            if norm == 0.0:
                log.warning("skipping constant image %s in overlap search",
                            s.sample_id)
                continue
            ids.append(s.sample_id)
            rows.append(v / norm)
            exact.append(form)
        return ids, np.array(rows), exact

    ids_a, mat_a, forms_a = standardize(set_a, images_a)
    ids_b, mat_b, forms_b = standardize(set_b, images_b)
    matches = []
    if len(ids_a) and len(ids_b):
        scores = np.clip(mat_a @ mat_b.T, -1.0, 1.0)
        # candidate band below threshold absorbs float rounding, so that
        # bit-identical pairs cannot be lost at threshold 1.0
        candidates = scores >= threshold - 1e-9
        for i, j in zip(*np.nonzero(candidates)):
            if ids_a[i] == ids_b[j]:
                continue
            score = scores[i, j]
            if np.array_equal(forms_a[i], forms_b[j]):
                score = 1.0
            if score >= threshold:
                matches.append((ids_a[i], ids_b[j], float(score)))
    matches.sort(key=lambda m: (-m[2], m[0], m[1]))
    matched_a = {m[0] for m in matches}
    filtered = set_a.subset(s.sample_id for s in set_a.samples
                            if s.sample_id not in matched_a)
    return matches, filtered


# ---------------------------------------------------------------------------
# image stores and file formats

class InMemoryStore:
    """Images held as a plain dict, keyed by sample_id."""

    def __init__(self, images: Mapping[str, np.ndarray]):
        self._images = images

    def load(self, sample: Sample) -> np.ndarray:
        return np.asarray(self._images[sample.sample_id], dtype=np.float64)


class RawFileStore:
    """Tensor files addressed by each sample's source path under a root."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, sample: Sample) -> Path:
        return self.root / sample.source

    def load(self, sample: Sample) -> np.ndarray:
        return nk.load_tensor(self.path_for(sample)).astype(np.float64)


def load_batch(store, samples) -> np.ndarray:
    return np.stack([store.load(s) for s in samples])


def save_manifest(manifest: DatasetManifest, path) -> None:
    """CSV with header ``sample_id,path,leaf_id``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "path", "leaf_id"])
        for s in manifest.samples:
            writer.writerow([s.sample_id, s.source, s.leaf_id])


def load_manifest(path, split_tag: str = "train") -> DatasetManifest:
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            samples.append(Sample(row["sample_id"], row["path"], row["leaf_id"]))
    return DatasetManifest(tuple(samples), split_tag=split_tag)


def save_dataset(data: SyntheticData, out_dir) -> None:
    """Persist a synthetic dataset: manifest, graph, marks, one tensor/sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = out / "tensors"
    tensors.mkdir(exist_ok=True)
    rows = []
    for s in data.manifest.samples:
        rel = f"tensors/{s.sample_id}.tnsr"
        nk.save_tensor(data.images[s.sample_id].astype(np.float32), out / rel)
        rows.append(Sample(s.sample_id, rel, s.leaf_id))
    save_manifest(replace(data.manifest, samples=tuple(rows)), out / "manifest.csv")
    with open(out / "synsets.txt", "w", encoding="utf-8") as fh:
        for parent, child in data.graph.edges:
            fh.write(f"{parent}>{child}\n")
    with open(out / "basic_marks.txt", "w", encoding="utf-8") as fh:
        for mark in sorted(data.basic_marks):
            fh.write(mark + "\n")


def overlap_report_csv(matches, path) -> None:
    """CSV ``id_a,id_b,score`` with scores at 6 decimal places."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id_a", "id_b", "score"])
        for id_a, id_b, score in matches:
            writer.writerow([id_a, id_b, f"{score:.6f}"])
