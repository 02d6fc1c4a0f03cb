"""Command-line entry point tying the pipeline together for batch use.

Subcommands: merge-labels, build-manifest, synth-gen, train, infer,
evaluate, gradcheck. Exit codes are uniform: 0 success, 1 runtime failure,
2 usage or config error. All randomness flows from --seed; output files are
never overwritten without --force.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .anchors import AnchorConfig
from .errors import ConfigError, CrossDetError, MalformedDocument
from .evaluation import (
    EvalReport,
    coco_report,
    read_detections_jsonl,
    voc_report,
    wider_report,
    write_detections_jsonl,
)
from .experiments import default_anchor_config
from .gradcheck import run_gradcheck
from .ingest import (
    HybridManifest,
    build_manifest,
    parse_coco_file,
    parse_voc,
    parse_wider,
)
from .label_space import (
    ConflictMatrix,
    HybridLabelSpace,
    MergeConfig,
    build_label_space,
    parse_merge_config,
)
from .loss import LossConfig
from .synth import DatasetSpec, SynthWorld, SynthWorldConfig, generate_world
from .trainer import (
    TrainConfig,
    checkpoint_from_dict,
    checkpoint_to_dict,
    config_fingerprint,
    history_to_csv,
    run_inference,
    train,
)


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _write_text(path: str, text: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ConfigError(f"refusing to overwrite {path}; pass --force")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_config_file(path: str) -> dict:
    """Config files are JSON or TOML, decided by extension."""
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            try:
                return tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise MalformedDocument(f"{path}: {exc}") from exc
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"{path}: not valid JSON: {exc}") from exc


def _parse_dataset_spec(spec: str) -> tuple[str, list]:
    """NAME=a,b,c inline or NAME=path with one class name per line."""
    if "=" not in spec:
        raise ConfigError(f"--dataset expects NAME=CLASSES, got {spec!r}")
    name, value = spec.split("=", 1)
    if "," in value or not os.path.exists(value):
        classes = [c.strip() for c in value.split(",") if c.strip()]
    else:
        classes = [
            line.strip() for line in _read_text(value).splitlines() if line.strip()
        ]
    if not classes:
        raise ConfigError(f"dataset {name!r} lists no classes")
    return name, classes


def _named_path(spec: str, flag: str) -> tuple[str, str]:
    if "=" not in spec:
        raise ConfigError(f"{flag} expects NAME=PATH, got {spec!r}")
    name, path = spec.split("=", 1)
    return name, path


def _load_label_space_file(path: str) -> tuple[HybridLabelSpace, ConflictMatrix]:
    doc = _load_config_file(path)
    return (
        HybridLabelSpace.from_dict(doc["label_space"]),
        ConflictMatrix.from_dict(doc["conflicts"]),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_merge_labels(args) -> int:
    datasets = dict(_parse_dataset_spec(s) for s in args.dataset)
    merge_cfg = MergeConfig()
    if args.merge_config:
        merge_cfg = parse_merge_config(_load_config_file(args.merge_config))
    space = build_label_space(datasets, merge_cfg.merges)
    conflicts = ConflictMatrix(
        list(datasets), merge_cfg.conflicts, merge_cfg.default_policy
    )
    doc = {"version": 1, "label_space": space.to_dict(), "conflicts": conflicts.to_dict()}
    _write_text(args.out, json.dumps(doc, indent=2) + "\n", args.force)
    merged = sum(1 for c in space.classes if len(c.sources) > 1)
    print(f"{len(space)} classes ({merged} merged group{'s' if merged != 1 else ''})")
    return 0


def cmd_build_manifest(args) -> int:
    space, conflicts = _load_label_space_file(args.label_space)
    raws = []
    for spec in args.coco or []:
        name, path = _named_path(spec, "--coco")
        raws.extend(parse_coco_file(path, name))
    for spec in args.voc or []:
        name, path = _named_path(spec, "--voc")
        files = sorted(glob.glob(os.path.join(path, "*.xml")))
        if not files:
            raise ConfigError(f"no .xml files under {path!r}")
        raws.extend(parse_voc(files, name, inclusive_extent=args.voc_inclusive))
    for spec in args.wider or []:
        name, path = _named_path(spec, "--wider")
        sizes = None
        if args.wider_sizes:
            sizes = {
                k: tuple(v) for k, v in _load_config_file(args.wider_sizes).items()
            }
        try:
            w, h = (int(v) for v in args.wider_default_size.split("x"))
        except ValueError as exc:
            raise ConfigError(
                f"--wider-default-size expects WxH, got {args.wider_default_size!r}"
            ) from exc
        raws.extend(
            parse_wider(
                _read_text(path), name, class_name=args.wider_class,
                sizes=sizes, default_size=(w, h),
            )
        )
    if not raws:
        raise ConfigError("no input datasets given")
    manifest = build_manifest(raws, space, conflicts)
    _write_text(args.out, manifest.to_json(), args.force)
    boxes = sum(len(rec.annotations) for rec in manifest.images)
    print(f"{len(manifest)} images, {boxes} boxes")
    return 0


def _world_from_config(doc: dict, seed_override: int | None) -> SynthWorld:
    world_doc = dict(doc.get("world", {}))
    if seed_override is not None:
        world_doc["seed"] = seed_override
    cfg = SynthWorldConfig.from_dict(world_doc)
    specs = [DatasetSpec.from_dict(d) for d in doc.get("datasets", [])]
    if not specs:
        raise ConfigError("synth config lists no datasets")
    merge_cfg = parse_merge_config(doc)
    return generate_world(
        cfg,
        specs,
        merges=merge_cfg,
        conflict_pairs=merge_cfg.conflicts,
        default_policy=merge_cfg.default_policy,
    )


def cmd_synth_gen(args) -> int:
    world = _world_from_config(_load_config_file(args.config), args.seed)
    _write_text(args.out, world.to_json(), args.force)
    if args.train_manifest_out:
        _write_text(args.train_manifest_out, world.manifest("train").to_json(), args.force)
    if args.test_manifest_out:
        _write_text(args.test_manifest_out, world.manifest("test").to_json(), args.force)
    n_train = sum(s.train_images for s in world.specs)
    n_test = sum(s.test_images for s in world.specs)
    print(
        f"{len(world.specs)} datasets, {n_train} train / {n_test} test images, "
        f"{len(world.label_space)} classes"
    )
    return 0


def _training_sections(doc: dict, seed_override: int | None) -> tuple:
    anchor_cfg = (
        AnchorConfig.from_dict(doc["anchors"]) if "anchors" in doc
        else default_anchor_config()
    )
    loss_cfg = LossConfig.from_dict(doc.get("loss", {}))
    train_doc = dict(doc.get("train", {}))
    if seed_override is not None:
        train_doc["seed"] = seed_override
    train_cfg = TrainConfig.from_dict(train_doc)
    return anchor_cfg, loss_cfg, train_cfg


def cmd_train(args) -> int:
    world = SynthWorld.from_json(_read_text(args.world))
    doc = _load_config_file(args.config) if args.config else {}
    anchor_cfg, loss_cfg, train_cfg = _training_sections(doc, args.seed)
    manifest = world.manifest("train")
    head, history = train(
        manifest, world.features_of, anchor_cfg, loss_cfg, train_cfg, args.mode
    )
    fingerprint = config_fingerprint(
        {
            "anchors": anchor_cfg.to_dict(),
            "loss": loss_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "mode": args.mode,
            "world": world.config.to_dict(),
        }
    )
    ckpt = checkpoint_to_dict(head, fingerprint)
    ckpt["anchors"] = anchor_cfg.to_dict()
    _write_text(args.out, json.dumps(ckpt, indent=2) + "\n", args.force)
    if args.history_out:
        _write_text(args.history_out, history_to_csv(history), args.force)
    print(f"trained {train_cfg.total_steps} steps, final loss {history[-1]:.6f}")
    return 0


def cmd_infer(args) -> int:
    world = SynthWorld.from_json(_read_text(args.world))
    ckpt = json.loads(_read_text(args.checkpoint))
    head, _ = checkpoint_from_dict(ckpt)
    anchor_cfg = (
        AnchorConfig.from_dict(ckpt["anchors"]) if "anchors" in ckpt
        else default_anchor_config()
    )
    datasets = args.datasets.split(",") if args.datasets else None
    manifest = world.manifest(args.split, datasets=datasets)
    detections = run_inference(
        head, manifest, world.features_of, anchor_cfg,
        args.score_threshold, args.nms_iou,
    )
    _write_text(args.out, write_detections_jsonl(detections), args.force)
    print(f"{len(detections)} detections over {len(manifest)} images")
    return 0


_TABLE_COLUMNS = ("AP", "AP50", "AP75", "Easy", "Medium", "Hard")
_COLUMN_KEYS = {
    "AP": "AP", "AP50": "AP50", "AP75": "AP75",
    "Easy": "AP_easy", "Medium": "AP_medium", "Hard": "AP_hard",
}


def _print_report_table(report: EvalReport, space: HybridLabelSpace) -> None:
    def fmt(metrics: dict) -> str:
        cells = []
        for col in _TABLE_COLUMNS:
            if report.mode == "voc":
                # single-threshold AP at IoU 0.5 sits in the AP50 column
                value = metrics.get("mAP", metrics.get("AP")) if col == "AP50" else None
            else:
                value = metrics.get(_COLUMN_KEYS[col])
            cells.append("-" if value is None else f"{value:.4f}")
        return "  ".join(f"{c:>7}" for c in cells)

    header = "  ".join(f"{c:>7}" for c in _TABLE_COLUMNS)
    print(f"{'':12s}{header}")
    print(f"{'all':12s}{fmt(report.aggregate)}")
    for idx in sorted(report.per_class):
        name = space.class_at(idx).canonical_name
        print(f"{name[:12]:12s}{fmt(report.per_class[idx])}")


def cmd_evaluate(args) -> int:
    manifest = HybridManifest.from_json(_read_text(args.manifest))
    detections = read_detections_jsonl(_read_text(args.detections))
    if args.mode == "coco":
        report = coco_report(detections, manifest)
    elif args.mode == "voc":
        report = voc_report(detections, manifest)
    else:
        report = wider_report(
            detections, manifest, derive_missing=args.derive_difficulty
        )
    if args.out:
        _write_text(args.out, report.to_json(), args.force)
    if args.csv_out:
        _write_text(args.csv_out, report.per_class_csv(), args.force)
    if args.pr_out:
        if report.pr_curves is None:
            raise ConfigError("--pr-out requires --mode wider")
        lines = ["subset,class,recall,precision"]
        for subset, curves in report.pr_curves.items():
            for cls, samples in curves.items():
                lines.extend(
                    f"{subset},{cls},{repr(r)},{repr(p)}" for r, p in samples
                )
        _write_text(args.pr_out, "\n".join(lines) + "\n", args.force)
    _print_report_table(report, manifest.label_space)
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, args.tolerance)
    for name, family in report["families"].items():
        print(
            f"{name}: max rel error {family['max_rel_error']:.3e} "
            f"over {family['points']} points"
        )
    print(
        f"total: max rel error {report['max_rel_error']:.3e} over "
        f"{report['points']} points (tolerance {report['tolerance']:.1e})"
    )
    return 0 if report["passed"] else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossdet",
        description="Cross-dataset detection toolkit: label spaces, "
        "manifests, dataset-aware training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge-labels", help="build a hybrid label space")
    p.add_argument(
        "--dataset", action="append", required=True, metavar="NAME=CLASSES",
        help="dataset class list: NAME=a,b,c inline or NAME=path "
        "(one class per line); repeatable, order defines class indices",
    )
    p.add_argument("--merge-config", help="JSON with merges/conflicts/default_policy")
    p.add_argument("--out", required=True, help="output label-space JSON")
    p.set_defaults(func=cmd_merge_labels)

    p = sub.add_parser("build-manifest", help="parse annotations into one manifest")
    p.add_argument("--label-space", required=True, help="label-space JSON from merge-labels")
    p.add_argument("--coco", action="append", metavar="NAME=PATH",
                   help="COCO annotation JSON; repeatable")
    p.add_argument("--voc", action="append", metavar="NAME=DIR",
                   help="directory of VOC XML files; repeatable")
    p.add_argument("--voc-inclusive", action="store_true",
                   help="use the historical +1 extent convention for VOC boxes")
    p.add_argument("--wider", action="append", metavar="NAME=PATH",
                   help="WIDER-style annotation listing; repeatable")
    p.add_argument("--wider-class", default="face",
                   help="class name for WIDER boxes (default: face)")
    p.add_argument("--wider-sizes", help="JSON mapping image path to [width, height]")
    p.add_argument("--wider-default-size", default="1024x1024", metavar="WxH",
                   help="fallback image size for WIDER entries")
    p.add_argument("--out", required=True, help="output manifest JSON")
    p.set_defaults(func=cmd_build_manifest)

    p = sub.add_parser("synth-gen", help="generate a synthetic world")
    p.add_argument("--config", required=True, help="world config JSON/TOML")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output world JSON")
    p.add_argument("--train-manifest-out", help="also write the train manifest")
    p.add_argument("--test-manifest-out", help="also write the test manifest")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train the linear head on a synthetic world")
    p.add_argument("--world", required=True, help="world JSON from synth-gen")
    p.add_argument("--config", help="JSON/TOML with anchors/loss/train sections")
    p.add_argument(
        "--mode", default="dataset-aware",
        help="dataset-aware | naive-concat | solo:<dataset>",
    )
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--out", required=True, help="output checkpoint JSON")
    p.add_argument("--history-out", help="per-step loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference over a world split")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--datasets", help="comma-separated dataset filter")
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output detections JSONL")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score detections against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True, help="detections JSONL")
    p.add_argument("--mode", default="coco", choices=("coco", "voc", "wider"))
    p.add_argument("--derive-difficulty", action="store_true",
                   help="derive missing difficulty tags from gt height")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--csv-out", help="per-class AP CSV")
    p.add_argument("--pr-out", help="PR curve CSV (wider mode)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    for name, sp in sub.choices.items():
        if name != "gradcheck":
            sp.add_argument("--force", action="store_true",
                            help="overwrite existing output files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CrossDetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
