"""Two-phase curriculum training and the pretraining control regimes.

A regime is one complete training recipe: an optional pretraining phase A
(basic-level, same-task, or a random category subset), a head transition,
and a subordinate-level phase B. Reports collect per-iteration loss and
validation accuracy curves plus final metrics.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataprep as dp
from . import model as md
from . import nnkernel as nk
from . import transfer
from .errors import NumericFault, ValidationError
from .taxonomy import LabelMap, SynsetGraph, first_marked_ancestor

log = logging.getLogger(__name__)

REGIME_KINDS = ("Reference", "ReferenceExtended", "RandomSubsetPretrain",
                "FacilitatedRandomHead", "FacilitatedReplicatedHead")


@dataclass(frozen=True)
class TrainConfig:
    sgd: nk.SgdConfig
    max_iterations: int
    eval_every: int
    checkpoint_every: int
    seed: int
    task_level: str                 # "basic" or "sub"
    lowered_prefix: int = 0
    lowered_mult: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValidationError("eval_every and checkpoint_every must be >= 1")
        if self.task_level not in ("basic", "sub"):
            raise ValidationError(f"unknown task level {self.task_level!r}")
        if not 0 <= self.lowered_mult <= 1:
            raise ValidationError("lowered_mult must be in [0, 1]")


@dataclass(frozen=True)
class Regime:
    kind: str
    phase_b: TrainConfig
    phase_a: TrainConfig | None = None
    pretrain_categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ValidationError(f"unknown regime kind {self.kind!r}")
        if self.kind == "Reference":
            if self.phase_a is not None:
                raise ValidationError("Reference takes no phase A")
        elif self.phase_a is None:
            raise ValidationError(f"{self.kind} needs a phase A config")
        if self.phase_b.task_level != "sub":
            raise ValidationError("phase B always trains the subordinate task")
        if self.phase_a is not None:
            want = "sub" if self.kind == "ReferenceExtended" else "basic"
            if self.phase_a.task_level != want:
                raise ValidationError(
                    f"{self.kind} phase A trains at level {want!r}")
        if self.kind == "RandomSubsetPretrain" and not self.pretrain_categories:
            raise ValidationError("RandomSubsetPretrain needs pretrain categories")


@dataclass
class RunReport:
    curves: list[tuple[int, str, str, float]] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    regime: dict | None = None
    checkpoints: list[str] = field(default_factory=list)


@dataclass
class DataBundle:
    """Everything a regime needs: data, labels, graph, model shape, pixels."""
    train: dp.DatasetManifest
    val: dp.DatasetManifest
    labelmap: LabelMap
    graph: SynsetGraph
    store: object                      # anything with .load(sample)
    model_spec: md.ModelSpec
    init: str = "fixed"                # weight init scheme for fresh models
    phase_a_train: dp.DatasetManifest | None = None  # capped manifest, if any

    def phase_a_manifest(self) -> dp.DatasetManifest:
        return self.phase_a_train if self.phase_a_train is not None else self.train


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label ranks in the top k logits.

    Equal logits rank by class index, lowest first, so results do not
    depend on sort implementation details.
    """
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if k > n_classes:
        raise ValidationError(f"k={k} exceeds {n_classes} classes")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError("labels out of range")
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((ranked == labels[:, None]).any(axis=1).mean())


def _labels_for(manifest: dp.DatasetManifest, labelmap: LabelMap,
                task_level: str) -> np.ndarray:
    picker = labelmap.basic_index if task_level == "basic" else labelmap.sub_index
    try:
        return np.array([picker(leaf) for leaf in manifest.leaf_ids()])
    except KeyError as exc:
        raise ValidationError(f"manifest leaf {exc.args[0]!r} not in label map")


def _eval_metrics(ckpt, X, labels, batch_size):
    logits = np.concatenate([
        md.forward_eval(ckpt, X[i:i + batch_size])
        for i in range(0, len(X), batch_size)])
    metrics = {"top1": topk_accuracy(logits, labels, 1)}
    if logits.shape[1] >= 5:
        metrics["top5"] = topk_accuracy(logits, labels, 5)
    return metrics


def _run_training(ckpt: md.Checkpoint, cfg: TrainConfig,
                  train_manifest, train_labels, val_manifest, val_labels,
                  store, out_dir=None) -> tuple[md.Checkpoint, RunReport]:
    if len(train_manifest) == 0:
        raise ValidationError("empty training manifest")
    n_out = ckpt.spec.n_outputs
    for arr, which in ((train_labels, "train"), (val_labels, "val")):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_out):
            raise ValidationError(f"{which} labels exceed head width {n_out}")

    work = ckpt.copy()
    X = dp.load_batch(store, train_manifest.samples)
    Xval = dp.load_batch(store, val_manifest.samples)
    rng = np.random.default_rng(cfg.seed)
    report = RunReport()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    bs = cfg.sgd.batch_size
    order = np.empty(0, dtype=int)
    cursor = 0
    for it in range(cfg.max_iterations):
        if cursor >= len(order):
            order = rng.permutation(len(X))  # fresh shuffle per epoch
            cursor = 0
        batch_idx = order[cursor:cursor + bs]
        cursor += bs
        try:
            logits, caches, _ = md.forward(work.spec, work.params, X[batch_idx],
                                           mode="train", rng=rng)
            loss, dlogits = nk.softmax_xent(logits, train_labels[batch_idx])
            md.backward(work.params, caches, dlogits)
            nk.sgd_step(work.params, cfg.sgd, it)
        except NumericFault as exc:
            raise NumericFault(f"iteration {it}: {exc}") from exc
        report.curves.append((it, "train", "loss", loss))

        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.max_iterations:
            for name, value in _eval_metrics(work, Xval, val_labels, bs).items():
                report.curves.append((done, "val", name, value))
        if out_path is not None and (done % cfg.checkpoint_every == 0
                                     or done == cfg.max_iterations):
            work.iteration = done
            work.rng_state = rng.bit_generator.state
            ref = out_path / f"ckpt_{done:08d}.ckpt"
            md.save_checkpoint(work, ref)
            report.checkpoints.append(str(ref))

    work.iteration = cfg.max_iterations
    work.rng_state = rng.bit_generator.state
    final = _eval_metrics(work, Xval, val_labels, bs)
    final["loss"] = report.curves[-1][3] if report.curves[-1][2] == "loss" else loss
    report.final = {k: float(v) for k, v in sorted(final.items())}
    return work, report


def train_phase(ckpt: md.Checkpoint, cfg: TrainConfig,
                train: dp.DatasetManifest, val: dp.DatasetManifest,
                labelmap: LabelMap, store,
                out_dir=None) -> tuple[md.Checkpoint, RunReport]:
    """Seeded mini-batch SGD at cfg.task_level; returns final state + curves.

    The input checkpoint is not mutated. Batches come from a full seeded
    shuffle per epoch with the last partial batch kept; the learning-rate
    schedule restarts at iteration 0 for the phase.
    """
    train_labels = _labels_for(train, labelmap, cfg.task_level)
    val_labels = _labels_for(val, labelmap, cfg.task_level)
    return _run_training(ckpt, cfg, train, train_labels, val, val_labels,
                         store, out_dir)


def _subset_task(manifest: dp.DatasetManifest, graph: SynsetGraph,
                 categories) -> tuple[dp.DatasetManifest, np.ndarray]:
    """Pretraining task over an arbitrary category set.

    Each category is one class; leaves reach their class through the same
    first-marked-ancestor walk used for basic labels. Samples under no
    category are dropped.
    """
    cats = sorted(set(categories))
    unknown = [c for c in cats if c not in graph.nodes]
    if unknown:
        raise ValidationError(f"unknown pretrain categories: {', '.join(unknown)}")
    index = {c: i for i, c in enumerate(cats)}
    cache: dict[str, str | None] = {}
    kept, labels = [], []
    for sample in manifest.samples:
        if sample.leaf_id not in cache:
            cache[sample.leaf_id] = first_marked_ancestor(
                graph, sample.leaf_id, set(cats))
        hit = cache[sample.leaf_id]
        if hit is not None:
            kept.append(sample.sample_id)
            labels.append(index[hit])
    if not kept:
        raise ValidationError("no samples fall under the pretrain categories")
    return manifest.subset(kept), np.array(labels)


def _merge(report: RunReport, phase: str, sub: RunReport) -> None:
    report.curves.extend(
        (it, split, f"{phase}.{metric}", value)
        for it, split, metric, value in sub.curves)
    report.final.update({f"{phase}.{k}": v for k, v in sub.final.items()})
    report.checkpoints.extend(sub.checkpoints)


def run_regime(regime: Regime, bundle: DataBundle,
               out_dir=None) -> tuple[md.Checkpoint, RunReport]:
    """Execute one full training recipe and merge the phase reports.

    Phase A (when present) trains at its own level; facilitated and
    random-subset regimes then swap the output head (replicated weights only
    for FacilitatedReplicatedHead) and lower the learning rate of the first
    conv layers per the phase-B config before subordinate training.
    """
    lm = bundle.labelmap
    out_path = Path(out_dir) if out_dir is not None else None
    report = RunReport(regime={"kind": regime.kind})
    spec = bundle.model_spec

    if regime.kind == "Reference":
        ckpt = md.build_model(spec.with_outputs(lm.n_sub),
                              seed=regime.phase_b.seed,
                              phase_tag="subordinate", init=bundle.init)
    else:
        cfg_a = regime.phase_a
        if regime.kind == "ReferenceExtended":
            start = md.build_model(spec.with_outputs(lm.n_sub),
                                   seed=cfg_a.seed, phase_tag="subordinate",
                                   init=bundle.init)
            ckpt_a, rep_a = train_phase(
                start, cfg_a, bundle.train, bundle.val, lm, bundle.store,
                out_path and out_path / "phase_a")
        elif regime.kind == "RandomSubsetPretrain":
            overlap = set(regime.pretrain_categories) & set(bundle.graph.basic_marks)
            if overlap:
                raise ValidationError(
                    "pretrain categories overlap basic marks: "
                    + ", ".join(sorted(overlap)))
            sub_manifest, sub_labels = _subset_task(
                bundle.phase_a_manifest(), bundle.graph, regime.pretrain_categories)
            val_manifest, val_labels = _subset_task(
                bundle.val, bundle.graph, regime.pretrain_categories)
            start = md.build_model(
                spec.with_outputs(len(set(regime.pretrain_categories))),
                seed=cfg_a.seed, phase_tag="basic", init=bundle.init)
            ckpt_a, rep_a = _run_training(
                start, cfg_a, sub_manifest, sub_labels, val_manifest, val_labels,
                bundle.store, out_path and out_path / "phase_a")
        else:  # FacilitatedRandomHead, FacilitatedReplicatedHead
            start = md.build_model(spec.with_outputs(lm.n_basic),
                                   seed=cfg_a.seed, phase_tag="basic",
                                   init=bundle.init)
            ckpt_a, rep_a = train_phase(
                start, cfg_a, bundle.phase_a_manifest(), bundle.val, lm,
                bundle.store, out_path and out_path / "phase_a")
        _merge(report, "phase_a", rep_a)

        if regime.kind == "ReferenceExtended":
            ckpt = ckpt_a
        elif regime.kind == "FacilitatedReplicatedHead":
            ckpt = md.replace_head(ckpt_a, lm.n_sub, "replicate", lm)
        else:
            ckpt = md.replace_head(ckpt_a, lm.n_sub, "random",
                                   seed=regime.phase_b.seed)
        if regime.kind != "ReferenceExtended":
            ckpt = md.set_layer_lr_mults(ckpt, regime.phase_b.lowered_prefix,
                                         regime.phase_b.lowered_mult)

    final, rep_b = train_phase(ckpt, regime.phase_b, bundle.train, bundle.val,
                               lm, bundle.store, out_path and out_path / "phase_b")
    _merge(report, "phase_b", rep_b)
    return final, report


def checkpoint_sweep(checkpoints, manifest: dp.DatasetManifest, store,
                     probe, labelmap: LabelMap | None = None) -> RunReport:
    """Probe each checkpoint of a run; series keyed by stored iteration."""
    loaded = [md.load_checkpoint(c) if not isinstance(c, md.Checkpoint) else c
              for c in checkpoints]
    if not loaded:
        raise ValidationError("no checkpoints given")
    iterations = [c.iteration for c in loaded]
    if any(b <= a for a, b in zip(iterations, iterations[1:])):
        raise ValidationError(
            f"checkpoint iterations must ascend, got {iterations}")
    report = RunReport()
    for ckpt in loaded:
        result = transfer.evaluate_probe(ckpt, manifest, store, probe, labelmap)
        report.curves.append((ckpt.iteration, "transfer", "mean_class_recall",
                              result.aggregate["mean"]))
    report.final["last_mean_class_recall"] = report.curves[-1][3]
    return report


# ---------------------------------------------------------------------------
# report files

def save_run_report(report: RunReport, out_dir) -> None:
    """curves.csv (iteration,split,metric,value) and final.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "split", "metric", "value"])
        for it, split, metric, value in report.curves:
            writer.writerow([it, split, metric, repr(float(value))])
    payload = {"final": report.final}
    if report.regime is not None:
        payload["regime"] = report.regime
    if report.checkpoints:
        payload["checkpoints"] = report.checkpoints
    with open(out / "final.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
