"""Command-line surface: dataset generation, training, evaluation,
annotation fusion, and gradient self-verification.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error. Every
training/evaluation run writes its fully-resolved configuration next to
its outputs so the run directory is self-describing.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    build_dataset,
    load_dataset,
    load_mask_pgm,
    save_mask_pgm,
)
from .fusion import FUSION_STRATEGIES, fuse_annotations
from .masks import argmax_mask
from .metrics import evaluate_masks
from .model import gradient_check_report, load_checkpoint, predict_probs
from .training import (
    TrainConfig,
    TrainingError,
    config_hash,
    fused_prediction,
    run_training,
    train_single_annotator,
)

CONFIG_KEYS = {f.name: f.type for f in fields(TrainConfig)}
EXTRA_KEYS = ("data", "out", "strategy")


class UsageError(Exception):
    """Bad flags or config keys; maps to exit code 2."""


def parse_config_file(path: Path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; unknown keys rejected."""
    values: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, text = line.partition("=")
        key = key.strip()
        text = text.strip().strip('"')
        if key in ("data", "out", "strategy", "selection"):
            values[key] = text
        elif key in CONFIG_KEYS:
            try:
                if key in ("alpha", "beta", "w_max", "lr", "lr_decay_factor"):
                    values[key] = float(text)
                else:
                    values[key] = int(text)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {text}") from exc
        else:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
    return values


def write_resolved_config(
    out: Path, config: TrainConfig, data: Path, extras: dict
) -> None:
    lines = [f"version = {__version__}"]
    for f in fields(config):
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    lines.append(f"data = {data}")
    manifest = data / "manifest.tsv"
    if manifest.exists():
        digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
        lines.append(f"data_manifest_sha256 = {digest}")
    lines.append(f"config_hash = {config_hash(config)}")
    for key, value in extras.items():
        lines.append(f"{key} = {value}")
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def cmd_gen_data(ns: argparse.Namespace) -> int:
    out = build_dataset(
        out_dir=ns.out,
        n_multi=ns.n_multi,
        n_unann=ns.n_unann,
        n_val=ns.n_val,
        n_test=ns.n_test,
        k=ns.k,
        seed=ns.seed,
        width=ns.width,
        height=ns.height,
        nested=ns.nested,
    )
    print(f"dataset written to {out}")
    return 0


def _load_dataset_or_fail(path: Path) -> Dataset:
    if not (path / "manifest.tsv").exists():
        raise FileNotFoundError(f"no dataset at {path} (missing manifest.tsv)")
    return load_dataset(path)


def cmd_train(ns: argparse.Namespace) -> int:
    values: dict = {}
    if ns.config is not None:
        cfg_path = Path(ns.config)
        if not cfg_path.exists():
            raise UsageError(f"config file not found: {cfg_path}")
        values = parse_config_file(cfg_path)

    for key in ("data", "out", "seed", "k", "total_iters", "validation_every",
                "lr", "w_max", "unannotated_batch", "selection"):
        flag = getattr(ns, key, None)
        if flag is not None:
            values[key] = flag

    data_path = Path(values.pop("data", "")) if values.get("data") else None
    out_path = Path(values.pop("out", "")) if values.get("out") else None
    values.pop("strategy", None)
    if data_path is None:
        raise UsageError("train requires --data (or data= in the config file)")
    if out_path is None:
        raise UsageError("train requires --out (or out= in the config file)")
    if not data_path.exists():
        print(f"error: dataset path does not exist: {data_path}", file=sys.stderr)
        return 1

    dataset = _load_dataset_or_fail(data_path)
    if ns.no_unannotated:
        dataset.unannotated = []
    if "k" not in values:
        values["k"] = max(dataset.k, 2)
    if ns.ablate_pc:
        values["beta"] = 0.0
    if ns.ablate_ps:
        values["w_max"] = 0.0
    try:
        config = TrainConfig(**values)
    except (TypeError, TrainingError) as exc:
        raise UsageError(str(exc)) from exc

    out_path.mkdir(parents=True, exist_ok=True)
    extras = {
        "ablate_pc": ns.ablate_pc,
        "ablate_ps": ns.ablate_ps,
        "no_unannotated": ns.no_unannotated,
        "single_annotator": ns.single_annotator,
    }
    write_resolved_config(out_path, config, data_path, extras)

    if ns.single_annotator is not None:
        result = train_single_annotator(
            dataset, config, ns.single_annotator, out_dir=out_path
        )
    else:
        result = run_training(dataset, config, out_dir=out_path)
    print(
        f"trained {config.total_iters} iterations; best checkpoint at "
        f"iteration {result.best.iteration} with validation score "
        f"{result.best.score:.4f}; outputs in {out_path}"
    )
    return 0


def _load_run_checkpoints(run_dir: Path):
    manifest = run_dir / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no run manifest at {manifest}")
    entries = dict(
        line.split("\t", 1) for line in manifest.read_text().splitlines() if line
    )
    k = int(entries["k"]) if "k" in entries else None
    params = []
    i = 0
    while f"net{i}_file" in entries:
        path = run_dir / entries[f"net{i}_file"]
        if not path.exists():
            raise FileNotFoundError(f"manifest names missing checkpoint {path}")
        params.append(load_checkpoint(str(path)))
        i += 1
    if not params:
        raise ValueError(f"{manifest} lists no checkpoints")
    if k is not None and k != len(params):
        raise ValueError(f"{manifest} says k={k} but lists {len(params)} checkpoints")
    return params


def cmd_eval(ns: argparse.Namespace) -> int:
    run_dir = Path(ns.run)
    data_path = Path(ns.data)
    params = _load_run_checkpoints(run_dir)
    dataset = _load_dataset_or_fail(data_path)
    if not dataset.test:
        raise ValueError(f"dataset at {data_path} has no test split")

    refs = [s.clean_gt for s in dataset.test]
    scopes = [("fused", [fused_prediction(params, s.image) for s in dataset.test])]
    if ns.per_network:
        for i, p in enumerate(params):
            scopes.append(
                (
                    f"net{i}",
                    [argmax_mask(predict_probs(p, s.image)) for s in dataset.test],
                )
            )

    lines = ["network,class,jaccard,dice"]
    summary = []
    for name, preds in scopes:
        report = evaluate_masks(preds, refs)
        for c in range(report.num_classes):
            lines.append(
                f"{name},{c},{report.class_jaccard[c]:.6f},{report.class_dice[c]:.6f}"
            )
        summary.append(f"{name}: foreground jaccard {report.mean_jaccard:.4f}")
    csv_text = "\n".join(lines) + "\n"
    if ns.out:
        Path(ns.out).write_text(csv_text)
        print(f"report written to {ns.out}")
    else:
        print(csv_text, end="")
    for line in summary:
        print(line)
    return 0


def cmd_fuse(ns: argparse.Namespace) -> int:
    if ns.strategy not in FUSION_STRATEGIES:
        raise UsageError(
            f"unknown strategy {ns.strategy!r}; choose from {FUSION_STRATEGIES}"
        )
    data_path = Path(ns.data)
    dataset_dir = data_path
    manifest = dataset_dir / "manifest.tsv"
    if not manifest.exists():
        print(f"error: no dataset at {data_path}", file=sys.stderr)
        return 1
    out = Path(ns.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    rng = np.random.default_rng(ns.seed)

    rows = []
    fused_count = 0
    for lineno, line in enumerate(manifest.read_text().splitlines()):
        if lineno == 0:
            rows.append(line)
            continue
        if not line.strip():
            continue
        sample_id, split, image_rel, gt_rel, mask_field, _ = line.split("\t")
        src_image = (dataset_dir / image_rel).read_bytes()
        (out / image_rel).write_bytes(src_image)
        if gt_rel:
            (out / gt_rel).write_bytes((dataset_dir / gt_rel).read_bytes())
        mask_rels = [rel for rel in mask_field.split(";") if rel]
        if mask_rels:
            masks = [load_mask_pgm(dataset_dir / rel) for rel in mask_rels]
            fused = fuse_annotations(ns.strategy, masks, rng=rng)
            fused_rel = f"masks/{sample_id}_a0.pgm"
            save_mask_pgm(out / fused_rel, fused)
            rows.append(
                f"{sample_id}\t{split}\t{image_rel}\t{gt_rel}\t{fused_rel}\t1"
            )
            fused_count += 1
        else:
            rows.append(line)
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n")
    print(f"fused {fused_count} samples with strategy {ns.strategy} into {out}")
    return 0


def cmd_grad_check(ns: argparse.Namespace) -> int:
    report = gradient_check_report(
        seed=ns.seed,
        instances=ns.instances,
        size=ns.size,
        corrupt=ns.corrupt,
    )
    for layer, err in report["per_layer"].items():
        print(f"layer {layer}: max relative error {err:.3e}")
    print(
        f"overall max relative error {report['max_rel_error']:.3e} "
        f"over {report['instances']} instances"
    )
    if report["passed"]:
        print("gradient check passed")
        return 0
    print("gradient check FAILED", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ambiseg",
        description=(
            "Ensemble pixel classifiers for segmentation with ambiguous "
            "boundaries: multi-annotator training, consensus pseudo-labels, "
            "and label fusion."
        ),
    )
    parser.add_argument("--version", action="version", version=f"ambiseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k", type=int, default=2, help="annotators per sample")
    g.add_argument("--n-multi", type=int, default=20)
    g.add_argument("--n-unann", type=int, default=80)
    g.add_argument("--n-val", type=int, default=10)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--nested", action="store_true", help="three-class nested scenes")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the ensemble on a dataset")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="run output directory")
    t.add_argument("--config", help="key-value config file; flags override it")
    t.add_argument("--seed", type=int)
    t.add_argument("--k", type=int, help="number of networks/annotators")
    t.add_argument("--total-iters", type=int, dest="total_iters")
    t.add_argument("--validation-every", type=int, dest="validation_every")
    t.add_argument("--lr", type=float)
    t.add_argument("--w-max", type=float, dest="w_max")
    t.add_argument("--unannotated-batch", type=int, dest="unannotated_batch")
    t.add_argument("--selection", choices=("fused", "per-network"))
    t.add_argument("--ablate-pc", action="store_true",
                   help="drop the prediction-consistency loss")
    t.add_argument("--ablate-ps", action="store_true",
                   help="drop the pseudo-supervision loss")
    t.add_argument("--no-unannotated", action="store_true",
                   help="train without the unannotated pool")
    t.add_argument("--single-annotator", type=int, default=None, metavar="INDEX",
                   help="supervised single-network baseline on one annotator")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run on the test split")
    e.add_argument("--run", required=True, help="run directory with checkpoints")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", help="write the CSV report here instead of stdout")
    e.add_argument("--per-network", action="store_true",
                   help="also score each network alone")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="fuse annotations into single-mask datasets")
    f.add_argument("--data", required=True, help="source dataset directory")
    f.add_argument("--out", required=True, help="fused dataset directory")
    f.add_argument("--strategy", required=True,
                   help="average-vote, random, or staple")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fuse)

    c = sub.add_parser("grad-check", help="verify analytic gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)

    return parser


def entry(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return ns.func(ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
