"""Command-line entry: ``python -m dave.main {synth,train,infer,eval}``."""

from __future__ import annotations

import argparse
import csv
import glob
import os
import sys
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from tqdm import tqdm

from dave import settings
from dave.aln import TASKS, AlnConfig
from dave.config import RunConfig, build_run_config
from dave.data.dataset import DatasetManifest
from dave.data.imageio import read_image
from dave.data.synth import SceneSpec, synth_generate
from dave.errors import ConfigError, DaveError
from dave.fvpn import FvpnConfig
from dave.log import get_logger, progress_enabled, setup_logging

log = get_logger("DAVE")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

IMAGE_PATTERNS = ("*.png", "*.jpg", "*.jpeg", "*.bmp")

# -------------------- Defaults per command --------------------

COMMON = {"seed": 0, "deterministic": False}

SYNTH_DEFAULTS: Dict[str, Any] = {
    **COMMON,
    "out": "data",
    "count": 200,
    "types": 6,
    "width": 320,
    "height": 240,
    "max_vehicles": 3,
}

TRAIN_DEFAULTS: Dict[str, Any] = {
    **COMMON,
    "data": "data",
    "split": "train",
    "out": "run",
    "batch_size": settings.DEFAULT_BATCH_SIZE,
    "momentum": settings.DEFAULT_MOMENTUM,
    "weight_decay": settings.DEFAULT_WEIGHT_DECAY,
    "phase1_epochs": settings.DEFAULT_PHASE1_EPOCHS,
    "phase2_epochs": settings.DEFAULT_PHASE2_EPOCHS,
    "phase1_lr": settings.DEFAULT_PHASE1_LR,
    "phase2_lr": settings.DEFAULT_PHASE2_LR,
    "steps_per_epoch": 0,
    "alpha": settings.DEFAULT_ALPHA,
    "beta": settings.DEFAULT_BETA,
    "knowledge_dim": settings.DEFAULT_KNOWLEDGE_DIM,
    "aln_side": settings.DEFAULT_ALN_SIDE,
    "aln_depth": settings.DEFAULT_ALN_DEPTH,
    "aln_tasks": TASKS,
    "no_knowledge": False,
    "no_augment": False,
    "compare_guidance": 0,
    "plot": False,
}

INFER_DEFAULTS: Dict[str, Any] = {
    **COMMON,
    "model": "run/model.daveckpt",
    "data": "",
    "split": "test",
    "images": "",
    "out": "detections.jsonl",
    "timings": "",
    "overlays": "",
    "levels": settings.DEFAULT_LEVELS,
    "ratio": settings.DEFAULT_RATIO,
    "blur": settings.DEFAULT_BLUR_SIGMA,
    "thres": settings.DEFAULT_THRES,
    "radius": settings.DEFAULT_RADIUS,
    "m": settings.DEFAULT_M,
    "nms": settings.DEFAULT_NMS_IOU,
    "attr_conf": settings.DEFAULT_ATTR_CONF,
    "proposals_only": False,
    "no_bbr": False,
}

EVAL_DEFAULTS: Dict[str, Any] = {
    **COMMON,
    "detections": "detections.jsonl",
    "data": "data",
    "split": "test",
    "out": "eval",
    "iou": settings.DEFAULT_EVAL_IOU,
    "ap": settings.DEFAULT_AP_MODE,
    "timings": "",
    "plot": False,
    "model": "",
    "attributes_split": "",
    "attr_conf": 0.0,
    "resolutions": "",
    "compare_models": "",
}

DEFAULTS = {"synth": SYNTH_DEFAULTS, "train": TRAIN_DEFAULTS, "infer": INFER_DEFAULTS, "eval": EVAL_DEFAULTS}

HELP = {
    "seed": "random seed",
    "deterministic": "sequential execution, bitwise-reproducible outputs (also DAVE_DETERMINISTIC=1)",
    "count": "number of scenes",
    "types": "type vocabulary size (6 or 12)",
    "width": "scene width in px",
    "height": "scene height in px",
    "max_vehicles": "vehicles per scene, at most",
    "data": "dataset directory or manifest.json",
    "split": "dataset split",
    "batch_size": "paired samples per step",
    "momentum": "SGD momentum",
    "weight_decay": "L2 weight decay",
    "phase1_epochs": "epochs at the phase-1 rate (color loss masked)",
    "phase2_epochs": "epochs at the phase-2 rate",
    "phase1_lr": "phase-1 learning rate",
    "phase2_lr": "phase-2 learning rate",
    "steps_per_epoch": "steps per epoch (0: one pass over the vehicle instances)",
    "alpha": "bbox regression weight",
    "beta": "knowledge guidance weight",
    "knowledge_dim": "knowledge vector length",
    "aln_side": "ALN input side in px",
    "aln_depth": f"ALN depth preset {settings.ALN_DEPTH_PRESETS}",
    "aln_tasks": "comma-separated ALN attribute tasks to train",
    "no_knowledge": "train without knowledge guidance",
    "no_augment": "disable photometric augmentation",
    "compare_guidance": "run N paired seeds with and without guidance instead of one training",
    "plot": "also render PNG plots",
    "model": "model checkpoint",
    "images": "directory of images (used when --data is empty)",
    "timings": "per-image timings CSV",
    "overlays": "directory for annotated overlay images (off when empty)",
    "levels": "pyramid levels",
    "ratio": "pyramid scale ratio between levels",
    "blur": "Gaussian sigma applied before each down-scale",
    "thres": "proposal score threshold",
    "radius": "peak suppression radius in unified cells",
    "m": "hot-spot box expansion factor",
    "nms": "final NMS IoU threshold",
    "attr_conf": "color/type below this confidence are reported N/A",
    "proposals_only": "skip verification and annotation (stage 1 only)",
    "no_bbr": "use coarse hot-spot boxes instead of regressed boxes",
    "detections": "detections JSONL",
    "iou": "IoU threshold for a true positive",
    "ap": "AP mode: 11point or continuous",
    "attributes_split": "also evaluate the ALN on ground-truth crops of this split",
    "resolutions": "comma-separated crop sizes for the resolution study (needs --attributes-split)",
    "compare_models": "comma-separated extra checkpoints to compare on --attributes-split",
}


# -------------------- Parser --------------------

class DaveArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"[DAVE] error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_options(parser: argparse.ArgumentParser, defaults: Mapping[str, Any]) -> None:
    parser.add_argument("--config", default=None, help="key = value file layered under the flags")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    for key, default in defaults.items():
        text = f"{HELP.get(key, key)} (default: {_show(default)})"
        if isinstance(default, bool):
            parser.add_argument(_flag(key), dest=key, action="store_const", const=True, default=None, help=text)
        elif isinstance(default, int):
            parser.add_argument(_flag(key), dest=key, type=int, default=None, help=text)
        elif isinstance(default, float):
            parser.add_argument(_flag(key), dest=key, type=float, default=None, help=text)
        else:
            parser.add_argument(_flag(key), dest=key, type=str, default=None, help=text)


def _show(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value == "":
        return "off"
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    parser = DaveArgumentParser(prog="dave", description="Vehicle detection and attribute annotation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,infer,eval}")
    sub.required = True
    for name, text in (
        ("synth", "render a synthetic dataset"),
        ("train", "jointly train the proposal and attribute networks"),
        ("infer", "detect and annotate vehicles"),
        ("eval", "score detections and attributes"),
    ):
        p = sub.add_parser(name, help=text, description=text)
        _add_options(p, DEFAULTS[name])
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    defaults = DEFAULTS[args.command]
    flags = {k: getattr(args, k) for k in defaults}
    return build_run_config(args.command, defaults, flags, config_path=args.config)


# -------------------- Commands --------------------

@contextmanager
def option_errors() -> Iterator[None]:
    """Option objects built from flags reject bad values as usage errors."""
    try:
        yield
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_synth(cfg: RunConfig, quiet: bool = False) -> int:
    if cfg.count < 1:
        raise ConfigError(f"count must be >= 1, got {cfg.count}")
    with option_errors():
        spec = SceneSpec(
            width=cfg.width,
            height=cfg.height,
            max_vehicles=cfg.max_vehicles,
            num_types=cfg.types,
        )
    manifest = synth_generate(cfg.out, cfg.count, spec=spec, seed=cfg.seed, quiet=quiet)
    print(os.path.join(manifest.root, "manifest.json"))
    return EXIT_OK


def _schedule(cfg: RunConfig):
    from dave.trainer import TrainSchedule

    with option_errors():
        return TrainSchedule(
            batch_size=cfg.batch_size,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            phase1_epochs=cfg.phase1_epochs,
            phase2_epochs=cfg.phase2_epochs,
            phase1_lr=cfg.phase1_lr,
            phase2_lr=cfg.phase2_lr,
            seed=cfg.seed,
            knowledge_guidance=not cfg.no_knowledge,
            steps_per_epoch=cfg.steps_per_epoch,
            aln_tasks=tuple(cfg.aln_tasks),
            augment=not cfg.no_augment,
            deterministic=cfg.deterministic,
        )


def cmd_train(cfg: RunConfig, quiet: bool = False) -> int:
    from dave.trainer import TrainingPool, guidance_ablation, run_training

    schedule = _schedule(cfg)
    manifest = DatasetManifest.load(cfg.data)
    with option_errors():
        fvpn_config = FvpnConfig(knowledge_dim=cfg.knowledge_dim, alpha=cfg.alpha, beta=cfg.beta)
        aln_config = AlnConfig(
            input_side=cfg.aln_side,
            depth=cfg.aln_depth,
            feature_dim=cfg.knowledge_dim,
            num_types=len(manifest.vocab.types),
        )
    pool = TrainingPool.from_manifest(manifest, cfg.split)

    if cfg.compare_guidance > 0:
        seeds = list(range(cfg.seed, cfg.seed + cfg.compare_guidance))
        result = guidance_ablation(
            manifest, schedule, seeds, cfg.out, pool=pool,
            fvpn_config=fvpn_config, aln_config=aln_config, quiet=quiet,
        )
        path = os.path.join(cfg.out, "guidance_ablation.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["seed", "guided", "unguided"])
            for s, g, u in zip(result.seeds, result.guided, result.unguided):
                writer.writerow([s, f"{g:.9g}", f"{u:.9g}"])
        if cfg.plot:
            from dave.plots import plot_loss_curves

            plot_loss_curves(os.path.join(cfg.out, "guidance_ablation.png"), result.curves)
        print(path)
        return EXIT_OK

    result = run_training(
        manifest, schedule, cfg.out, pool=pool,
        fvpn_config=fvpn_config, aln_config=aln_config, split=cfg.split, quiet=quiet,
    )
    if cfg.plot:
        from dave.plots import plot_loss_curves

        plot_loss_curves(os.path.join(cfg.out, "loss_curve.png"), {"proposal loss": [result.curve_csv]})
    print(result.checkpoint)
    return EXIT_OK


def _infer_inputs(cfg: RunConfig) -> List[Tuple[str, str]]:
    """(image id, path) pairs from a dataset split or an image directory."""
    if cfg.data:
        manifest = DatasetManifest.load(cfg.data)
        records = manifest.records()
        return [(i, manifest.image_path(records[i])) for i in manifest.split_ids(cfg.split)]
    if not cfg.images:
        raise ConfigError("infer needs --data or --images")
    if not os.path.isdir(cfg.images):
        raise ConfigError(f"not a directory: {cfg.images}")
    paths = sorted({p for pat in IMAGE_PATTERNS for p in glob.glob(os.path.join(cfg.images, pat))})
    return [(os.path.splitext(os.path.basename(p))[0], p) for p in paths]


def timings_path(detections_path: str) -> str:
    return os.path.splitext(detections_path)[0] + "_timings.csv"


def cmd_infer(cfg: RunConfig, quiet: bool = False) -> int:
    from dave.model import ModelBundle
    from dave.pyramid import (
        TIMING_COLUMNS, Detector, DetectorOptions, PyramidSpec,
        detection_record, timing_row, write_detections,
    )

    with option_errors():
        options = DetectorOptions(
            pyramid=PyramidSpec(levels=cfg.levels, ratio=cfg.ratio, blur_sigma=cfg.blur),
            thres=cfg.thres,
            radius=cfg.radius,
            m=cfg.m,
            nms_iou=cfg.nms,
            attr_conf=cfg.attr_conf,
            use_bbr=not cfg.no_bbr,
            verify=not cfg.proposals_only,
            deterministic=cfg.deterministic,
        )
    inputs = _infer_inputs(cfg)
    detector = Detector(ModelBundle.load(cfg.model), options)

    records, timings = [], []
    dropped = 0
    for image_id, path in tqdm(inputs, desc="infer", disable=not progress_enabled(quiet)):
        image = read_image(path)
        result = detector.detect(image)
        dropped += result.dropped_crops
        records.append(detection_record(image_id, result))
        timings.append(timing_row(image_id, result))
        if cfg.overlays:
            from dave.overlay import save_overlay

            save_overlay(os.path.join(cfg.overlays, f"{image_id}.png"), image, result.detections)

    write_detections(cfg.out, records)
    tpath = cfg.timings or timings_path(cfg.out)
    with open(tpath, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TIMING_COLUMNS)
        writer.writeheader()
        writer.writerows(timings)
    if dropped:
        log.warning("%d empty crops dropped during verification", dropped)
    log.info("%d images, %d detections -> %s", len(records), sum(len(r["detections"]) for r in records), cfg.out)
    print(cfg.out)
    return EXIT_OK


def _int_list(text: str, key: str) -> List[int]:
    try:
        return [int(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def cmd_eval(cfg: RunConfig, quiet: bool = False) -> int:
    from dave import evaluation as ev
    from dave.pyramid import read_detections

    if cfg.ap not in ("11point", "continuous"):
        raise ConfigError(f"bad value for ap: {cfg.ap!r} (11point or continuous)")
    manifest = DatasetManifest.load(cfg.data)
    detections = read_detections(cfg.detections, manifest.vocab)
    report = ev.evaluate_detections(detections, manifest, split=cfg.split, iou_thr=cfg.iou, ap_mode=cfg.ap)

    out = cfg.out
    metrics = report.metric_rows()
    tpath = cfg.timings or timings_path(cfg.detections)
    if os.path.exists(tpath):
        metrics.extend(ev.fps_from_timings(tpath).metric_rows())
    ev.write_csv(os.path.join(out, "metrics.csv"), metrics, ("metric", "value", "count"))
    ev.write_csv(os.path.join(out, "pr_curve.csv"), report.ap.curve_rows(), ("rank", "score", "recall", "precision"))
    if report.attributes is not None:
        ev.write_json(os.path.join(out, "attributes.json"), report.attributes.to_json())
    if cfg.plot:
        from dave.plots import plot_pr_curves

        plot_pr_curves(os.path.join(out, "pr_curve.png"), {f"IoU {cfg.iou:g}": report.ap})

    if cfg.attributes_split:
        _eval_attributes(cfg, manifest, ev)
    elif cfg.resolutions or cfg.compare_models:
        raise ConfigError("--resolutions and --compare-models need --attributes-split")

    print(f"AP@{cfg.iou:g} = {report.ap.ap:.4f}")
    return EXIT_OK


def _eval_attributes(cfg: RunConfig, manifest: DatasetManifest, ev) -> None:
    from dave.model import ModelBundle

    if not cfg.model:
        raise ConfigError("--attributes-split needs --model")
    samples = manifest.load_split(cfg.attributes_split)
    model = ModelBundle.load(cfg.model)
    if model.vocab != manifest.vocab:
        raise ConfigError(f"{cfg.model}: model vocabulary differs from the dataset's")
    out = cfg.out

    base = ev.evaluate_aln_on_crops(model.aln, samples, manifest.vocab, attr_conf=cfg.attr_conf, seed=cfg.seed)
    ev.write_csv(os.path.join(out, "attributes_gt_crops.csv"), base.metric_rows(), ("metric", "value", "count"))
    ev.write_json(os.path.join(out, "attributes_gt_crops.json"), base.to_json())

    if cfg.resolutions:
        sizes = _int_list(cfg.resolutions, "resolutions")
        study = ev.resolution_study(model.aln, samples, manifest.vocab, sizes, attr_conf=cfg.attr_conf, seed=cfg.seed)
        rows = ev.compare_reports({f"{s}px": rep for s, rep in study.items()})
        ev.write_csv(os.path.join(out, "resolution_study.csv"), rows, ("model", "verify", "pose", "color", "type"))
        if cfg.plot:
            from dave.plots import plot_accuracy_table

            plot_accuracy_table(os.path.join(out, "resolution_study.png"), rows)

    if cfg.compare_models:
        reports = {os.path.basename(cfg.model): base}
        for path in (p.strip() for p in str(cfg.compare_models).split(",") if p.strip()):
            other = ModelBundle.load(path)
            if other.vocab != manifest.vocab:
                raise ConfigError(f"{path}: model vocabulary differs from the dataset's")
            reports[os.path.basename(path)] = ev.evaluate_aln_on_crops(
                other.aln, samples, manifest.vocab, attr_conf=cfg.attr_conf, seed=cfg.seed
            )
        rows = ev.compare_reports(reports)
        ev.write_csv(os.path.join(out, "model_comparison.csv"), rows, ("model", "verify", "pose", "color", "type"))
        if cfg.plot:
            from dave.plots import plot_accuracy_table

            plot_accuracy_table(os.path.join(out, "model_comparison.png"), rows)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(verbose=args.verbose, quiet=args.quiet)
    try:
        cfg = run_config(args)
        return COMMANDS[args.command](cfg, quiet=args.quiet)
    except ConfigError as e:
        print(f"[DAVE] error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DaveError, OSError, ValueError) as e:
        print(f"[DAVE] error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
