"""Command-line surface: reproducible pipelines over the library modules.

Subcommands: taxonomy, synth, prepare, dedup, train, probe, sweep. All
writes land under the chosen output directory; inputs are never mutated.
Exit codes: 0 success, 2 config or validation error, 3 numeric fault,
4 I/O error. Relative output paths resolve against $HIERCURRIC_OUT when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cf
from . import curriculum as cu
from . import dataprep as dp
from . import model as md
from . import nnkernel as nk
from . import taxonomy, transfer
from .errors import NumericFault, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def resolve_out(value: str) -> Path:
    path = Path(value)
    root = os.environ.get("HIERCURRIC_OUT")
    if not path.is_absolute() and root:
        path = Path(root) / path
    return path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands

def cmd_taxonomy(args) -> int:
    graph = taxonomy.parse_synset_file(args.synsets)
    marks = taxonomy.parse_marks_file(args.marks)
    graph = taxonomy.validate_basic_marks(graph, marks)
    labelmap = taxonomy.allocate_descendants(graph)
    hist = taxonomy.category_height_histogram(graph, mode=args.height_mode)

    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taxonomy.labelmap_to_csv(labelmap, out / "labelmap.csv")
    _write_csv(out / "height_histogram.csv", ["height", "count"],
               [(h, hist[h]) for h in sorted(hist)])
    print(f"{labelmap.n_sub} leaves -> {labelmap.n_basic} basic categories")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = dp.SynthSpec(
        n_basic=args.n_basic, subs_per_basic=args.subs_per_basic,
        image_size=tuple(int(d) for d in args.image_size.split("x")),
        prototype_scale=args.prototype_scale,
        subordinate_scale=args.subordinate_scale,
        noise_scale=args.noise_scale,
        samples_per_sub=args.samples_per_sub, seed=args.seed)
    data = dp.generate_synthetic(spec)
    out = resolve_out(args.out)
    dp.save_dataset(data, out)
    print(f"wrote {len(data.manifest)} samples to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    manifest = dp.load_manifest(args.manifest)
    labelmap = taxonomy.labelmap_from_csv(args.labelmap)
    capped = dp.cap_per_category(manifest, labelmap, args.level, args.cap,
                                 args.seed)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dp.save_manifest(capped, out / "capped_manifest.csv")

    counts: dict[str, int] = {}
    for sample in capped.samples:
        key = (labelmap.basic_names[labelmap.basic_index(sample.leaf_id)]
               if args.level == "basic" else sample.leaf_id)
        counts[key] = counts.get(key, 0) + 1
    _write_csv(out / "category_counts.csv", ["category", "retained"],
               sorted(counts.items()))
    for category, retained in sorted(counts.items()):
        print(f"{category}: {retained}")
    print(f"total retained: {len(capped)} of {len(manifest)}")

    if args.splits:
        splits = dp.random_class_splits(capped, args.train_per_class,
                                        args.max_test_per_class, args.splits,
                                        args.split_seed)
        for i, (train, test) in enumerate(splits):
            dp.save_manifest(train, out / f"train_{i}.csv")
            dp.save_manifest(test, out / f"test_{i}.csv")
    return EXIT_OK


def cmd_dedup(args) -> int:
    man_a = dp.load_manifest(args.manifest_a)
    man_b = dp.load_manifest(args.manifest_b or args.manifest_a)
    store_a = dp.RawFileStore(args.images_a)
    store_b = dp.RawFileStore(args.images_b or args.images_a)
    images_a = {s.sample_id: store_a.load(s) for s in man_a.samples}
    images_b = {s.sample_id: store_b.load(s) for s in man_b.samples}
    matches, filtered = dp.find_overlaps(man_a, man_b, args.threshold,
                                         images_a, images_b)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dp.overlap_report_csv(matches, out / "overlap.csv")
    dp.save_manifest(filtered, out / "filtered_manifest.csv")
    print(f"{len(matches)} overlap pairs; {len(filtered)} of "
          f"{len(man_a)} a-samples kept")
    return EXIT_OK


def _load_train_inputs(config):
    data_cfg = config["data"]
    if "synthetic" in data_cfg:
        data = dp.generate_synthetic(cf.build_synth_spec(data_cfg["synthetic"]))
        graph = taxonomy.validate_basic_marks(data.graph, data.basic_marks)
        manifest = data.manifest
        store = dp.InMemoryStore(data.images)
    else:
        manifest = dp.load_manifest(data_cfg["manifest"])
        store = dp.RawFileStore(data_cfg["images_root"])
        graph = taxonomy.parse_synset_file(config["taxonomy"]["synsets"])
        marks = taxonomy.parse_marks_file(config["taxonomy"]["marks"])
        graph = taxonomy.validate_basic_marks(graph, marks)
    labelmap = taxonomy.allocate_descendants(graph)

    split_cfg = data_cfg["split"]
    (train, val), = dp.random_class_splits(
        manifest, split_cfg["n_train_per_class"],
        split_cfg.get("max_test_per_class", 10), 1, split_cfg["seed"])

    phase_a_train = None
    if "cap" in data_cfg:
        cap_cfg = data_cfg["cap"]
        phase_a_train = dp.cap_per_category(
            train, labelmap, cap_cfg.get("level", "basic"),
            cap_cfg["cap"], cap_cfg["seed"])
    return manifest, graph, labelmap, store, train, val, phase_a_train


def _print_shape_chain(spec: md.ModelSpec) -> None:
    for layer, shape_in, shape_out in spec.shape_chain():
        kind = type(layer).__name__.lower()
        print(f"{layer.name:10s} {kind:8s} {shape_in} -> {shape_out}")
    print(f"parameters: {md.parameter_count(spec)}")


def cmd_train(args) -> int:
    config = cf.load_config(args.config)
    out = resolve_out(args.out or config.get("output", {}).get("directory")
                      or _missing_out())
    manifest, graph, labelmap, store, train, val, phase_a_train = (
        _load_train_inputs(config))
    model_spec = cf.build_model_spec(config["model"], labelmap.n_sub)
    bundle = cu.DataBundle(train=train, val=val, labelmap=labelmap,
                           graph=graph, store=store, model_spec=model_spec,
                           init=config["model"].get("init", "fixed"),
                           phase_a_train=phase_a_train)

    regime_sections = config.get("regimes") or [config["regime"]]
    regimes = {sec.get("name", sec["kind"]): cf.build_regime(sec, graph, labelmap)
               for sec in regime_sections}

    if args.dry_run:
        _print_shape_chain(model_spec)
        for name in regimes:
            print(f"regime: {name}")
        return EXIT_OK

    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "MANIFEST.json"
    digest = cf.config_hash(config)
    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text())
        if previous.get("config_hash") != digest:
            raise ValidationError(
                f"output directory {out} holds a run with a different config "
                f"hash; refusing to mix runs")
    manifest_path.write_text(json.dumps(
        {"config_hash": digest, "code_version": __version__, "config": config},
        indent=2, sort_keys=True) + "\n")

    if not args.unchecked:
        nk.set_checked(True)
    else:
        nk.set_checked(False)

    single = "regime" in config

    def run_one(item):
        name, regime = item
        run_dir = out if single else out / name
        ckpt, report = cu.run_regime(regime, bundle, out_dir=run_dir)
        report.checkpoints = [str(Path(p).relative_to(out))
                              for p in report.checkpoints]
        cu.save_run_report(report, run_dir)
        return name, ckpt, report

    if args.jobs > 1 and len(regimes) > 1:
        # regimes are independent (own seeds, own output dirs); parallelism
        # never reaches inside a training run
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(run_one, regimes.items()))
    else:
        outcomes = [run_one(item) for item in regimes.items()]

    final_ckpts = {}
    for name, ckpt, report in outcomes:
        final_ckpts[name] = ckpt
        print(f"{name}: " + " ".join(
            f"{k}={v:.4f}" for k, v in sorted(report.final.items())))

    if "transfer" in config:
        probe = transfer.ProbeSpec(
            n_train_per_class=config["transfer"]["n_train_per_class"],
            max_test_per_class=config["transfer"].get("max_test_per_class", 50),
            n_splits=config["transfer"].get("n_splits", 3),
            seed=config["transfer"]["seed"],
            iters=config["transfer"].get("iters", 1000),
            layer=config["transfer"].get("layer"))
        for name, ckpt in final_ckpts.items():
            result = transfer.evaluate_probe(ckpt, manifest, store, probe,
                                             labelmap)
            transfer.save_probe_result(
                result, (out if single else out / name) / "transfer")
            print(f"{name}: probe mean_class_recall="
                  f"{result.aggregate['mean']:.4f}")
    return EXIT_OK


def _missing_out():
    raise ValidationError("no output directory: pass --out or set "
                          "output.directory in the config")


def _probe_spec_from_args(args, n_train: int) -> transfer.ProbeSpec:
    return transfer.ProbeSpec(
        n_train_per_class=n_train, max_test_per_class=args.max_test,
        n_splits=args.splits, seed=args.seed, iters=args.iters,
        layer=args.layer)


def cmd_probe(args) -> int:
    ckpt = md.load_checkpoint(args.checkpoint)
    manifest = dp.load_manifest(args.manifest)
    store = dp.RawFileStore(args.images)
    labelmap = (taxonomy.labelmap_from_csv(args.labelmap)
                if args.labelmap else None)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n_train in args.n_train:
        result = transfer.evaluate_probe(
            ckpt, manifest, store, _probe_spec_from_args(args, n_train),
            labelmap)
        transfer.save_probe_result(result, out / f"n{n_train}")
        rows.append((n_train, repr(result.aggregate["mean"]),
                     repr(result.aggregate["std"])))
        print(f"n_train={n_train}: mean_class_recall="
              f"{result.aggregate['mean']:.4f}")
    _write_csv(out / "aggregates.csv",
               ["n_train_per_class", "mean_class_recall", "std"], rows)
    return EXIT_OK


def cmd_sweep(args) -> int:
    loaded = [md.load_checkpoint(p) for p in args.checkpoints]
    loaded.sort(key=lambda c: c.iteration)
    manifest = dp.load_manifest(args.manifest)
    store = dp.RawFileStore(args.images)
    labelmap = (taxonomy.labelmap_from_csv(args.labelmap)
                if args.labelmap else None)
    report = cu.checkpoint_sweep(
        loaded, manifest, store, _probe_spec_from_args(args, args.n_train[0]),
        labelmap)
    out = resolve_out(args.out)
    cu.save_run_report(report, out)
    print(f"swept {len(loaded)} checkpoints -> {out / 'curves.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiercurric",
        description="Basic-level-first curriculum training toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taxonomy", help="derive the leaf-to-basic label map")
    p.add_argument("--synsets", required=True)
    p.add_argument("--marks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height-mode", choices=["longest", "shortest"],
                   default="longest")
    p.set_defaults(func=cmd_taxonomy)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n-basic", type=int, default=4)
    p.add_argument("--subs-per-basic", type=int, default=3)
    p.add_argument("--image-size", default="3x16x16")
    p.add_argument("--prototype-scale", type=float, default=0.25)
    p.add_argument("--subordinate-scale", type=float, default=0.1)
    p.add_argument("--noise-scale", type=float, default=0.2)
    p.add_argument("--samples-per-sub", type=int, default=50)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="cap categories and cut splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labelmap", required=True)
    p.add_argument("--level", choices=["basic", "sub"], default="basic")
    p.add_argument("--cap", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", type=int, default=0)
    p.add_argument("--train-per-class", type=int, default=30)
    p.add_argument("--max-test-per-class", type=int, default=50)
    p.add_argument("--split-seed", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("dedup", help="find near-duplicates across two sets")
    p.add_argument("--manifest-a", required=True)
    p.add_argument("--images-a", required=True)
    p.add_argument("--manifest-b")
    p.add_argument("--images-b")
    p.add_argument("--threshold", type=float,
                   default=dp.DEFAULT_OVERLAP_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("train", help="run a regime from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="overrides output.directory")
    p.add_argument("--dry-run", action="store_true",
                   help="validate and print the shape chain, then stop")
    p.add_argument("--unchecked", action="store_true",
                   help="disable NaN/Inf faulting for long runs")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel regimes in a matrix run (never within one)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="frozen-feature probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labelmap", default=None)
    p.add_argument("--n-train", type=int, action="append", required=True,
                   help="repeatable: one probe per value")
    p.add_argument("--max-test", type=int, default=50)
    p.add_argument("--splits", type=int, default=3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--layer", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="probe a series of checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labelmap", default=None)
    p.add_argument("--n-train", type=int, action="append", required=True)
    p.add_argument("--max-test", type=int, default=50)
    p.add_argument("--splits", type=int, default=3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--layer", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "split_seed", 0) is None:
        args.split_seed = args.seed
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        # missing inputs are an invocation problem, not an I/O failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
