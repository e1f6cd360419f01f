"""Command-line pipeline driver.

Subcommands: synth (generate a dataset), train (seg / gan / detector
stages), eval (score a detector run against a dataset), render (qualitative
panels), sweep (lambda grid), reproduce (small end-to-end demo).

Exit codes: 0 success, 2 input or configuration error, 3 training failure,
1 internal error. Bad flags exit 2 via argparse, matching the input-error
code.

Relative paths resolve under $DISSIM_RUN_ROOT when it is set, else under
the working directory. Options come from built-in defaults, overridden by
--config FILE entries, overridden by explicit flags. Every run directory
receives the resolved configuration (config.txt) and a run.json with the
code version and the hash of the dataset it consumed; none of the artifacts
embed timestamps, so reruns with equal inputs produce identical trees.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from dataclasses import fields
from os import environ
from pathlib import Path

import torch

from . import __version__
from .config import CONFIG_FILE_NAME, RunConfig
from .datasets import Dataset, load_dataset, synth_dataset, tree_hash
from .errors import DissimError, InputError, TrainingFailure
from .evaluation import (
    build_masks,
    evaluate_detector,
    evaluate_entropy_baseline,
    image_dissimilarity,
    learned_generator,
    oracle_generator,
    save_report_file,
)
from .models import (
    DetectorConfig,
    DiscriminatorScorer,
    TransferDetector,
    build_detector,
    load_model,
    save_model,
    train_toy_cgan,
    train_toy_segnet,
)
from .panels import compose_panel, write_panel
from .seeding import derive_seed
from .training import TrainConfig, lambda_sweep, train_detector, triplets_from_dataset

__all__ = ["main", "RUN_ROOT_ENV", "RUN_META_NAME"]

RUN_ROOT_ENV = "DISSIM_RUN_ROOT"
RUN_META_NAME = "run.json"
CORE_HEADS = ("resize", "deconv", "fc")

_MASK_FLAG = {"ood": "ood", "mis": "misclass", "union": "union"}


# --------------------------------------------------------------------------
# Path and run-directory helpers
# --------------------------------------------------------------------------

def _resolve(path_text) -> Path:
    path = Path(path_text).expanduser()
    root = environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root).expanduser() / path
    return path


def _prepare_run_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise InputError(f"{path}: exists and is not empty (pass --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_meta(run_dir: Path, payload: dict) -> None:
    (run_dir / RUN_META_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_run_meta(run_dir: Path) -> dict:
    path = run_dir / RUN_META_NAME
    if not path.is_file():
        raise InputError(f"{run_dir}: no {RUN_META_NAME}; not a run directory")
    return json.loads(path.read_text())


def _load_run_config(run_dir: Path) -> RunConfig:
    path = run_dir / CONFIG_FILE_NAME
    if not path.is_file():
        raise InputError(f"{run_dir}: no {CONFIG_FILE_NAME}; not a run directory")
    return RunConfig.from_file(path)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(_resolve(args.config)) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return cfg.override(overrides)


# --------------------------------------------------------------------------
# Model plumbing shared by train / eval / render / sweep
# --------------------------------------------------------------------------

def _upstream_checkpoint(cfg: RunConfig, name: str, reason: str) -> Path:
    if not cfg.gan_run:
        raise InputError(f"{reason} needs a trained gan run; set gan_run= or --gan-run")
    path = _resolve(cfg.gan_run) / name
    if not path.is_file():
        raise InputError(f"{path}: missing upstream checkpoint ({reason})")
    return path


def _generator_fn(cfg: RunConfig, dataset: Dataset):
    if cfg.generator == "oracle":
        return oracle_generator(dataset.class_set, noise_level=cfg.render_noise)
    path = _upstream_checkpoint(cfg, "generator.ckpt", "generator mode 'gan'")
    return learned_generator(load_model(path, "generator"), dataset.class_set)


def _detector_from_run(run_dir: Path, cfg: RunConfig):
    path = run_dir / "detector.ckpt"
    if not path.is_file():
        raise InputError(f"{path}: run has no detector checkpoint")
    if cfg.head in CORE_HEADS:
        return load_model(path, "detector")
    if cfg.head == "transfer":
        return load_model(path, "transfer-detector")
    return DiscriminatorScorer(load_model(path, "discriminator"))


def _require_dataset(cfg: RunConfig) -> tuple[Path, Dataset]:
    if not cfg.dataset:
        raise InputError("no dataset configured; set dataset= in the config file or pass --dataset")
    path = _resolve(cfg.dataset)
    return path, load_dataset(path)


# --------------------------------------------------------------------------
# Stage implementations (shared between the commands and reproduce)
# --------------------------------------------------------------------------

def _run_train(cfg: RunConfig, stage: str, out: Path, force: bool) -> dict:
    dataset_dir, dataset = _require_dataset(cfg)
    _prepare_run_dir(out, force)
    cfg = cfg.override({"dataset": str(dataset_dir)})

    if stage == "seg":
        model, summary = train_toy_segnet(
            dataset, seed=cfg.seed, epochs=cfg.seg_epochs, lr=cfg.seg_lr, base=cfg.seg_base
        )
        save_model(out / "segnet.ckpt", model)
        extra = {"holdout_accuracy": summary["holdout_accuracy"]}
        print(f"seg: held-out pixel accuracy {summary['holdout_accuracy']:.4f}")
    elif stage == "gan":
        generator, discriminator, summary = train_toy_cgan(
            dataset,
            seed=cfg.seed,
            adversarial=cfg.gan_adversarial,
            epochs=cfg.gan_epochs,
            lr=cfg.gan_lr,
            generator_base=cfg.gan_base,
            discriminator_base=cfg.disc_base,
        )
        save_model(out / "generator.ckpt", generator)
        save_model(out / "discriminator.ckpt", discriminator)
        extra = {"holdout_l1": summary["holdout_l1"]}
        print(f"gan: held-out L1 {summary['holdout_l1']:.4f}")
    elif stage == "detector":
        summary = None
        extra = _train_detector_stage(cfg, dataset, out)
    else:
        raise InputError(f"unknown training stage {stage!r}")

    if summary is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.save(out / CONFIG_FILE_NAME)
    _write_run_meta(
        out,
        {
            "command": "train",
            "stage": stage,
            "version": __version__,
            "dataset": str(dataset_dir),
            "dataset_hash": tree_hash(dataset_dir),
            **extra,
        },
    )
    return extra


def _train_detector_stage(cfg: RunConfig, dataset: Dataset, out: Path) -> dict:
    class_set = dataset.class_set
    if cfg.head == "discriminator":
        # Head (v) has no trainable parameters: the frozen discriminator
        # itself is the scorer, so this stage just pins the checkpoint.
        path = _upstream_checkpoint(cfg, "discriminator.ckpt", f"head {cfg.head!r}")
        save_model(out / "detector.ckpt", load_model(path, "discriminator"))
        print("detector[discriminator]: frozen scorer, nothing to train")
        return {"head": cfg.head, "n_triplets": 0, "skipped": 0, "final_loss": None}

    generator = _generator_fn(cfg, dataset)
    # parameter init draws from the ambient torch stream; pin it so a rerun
    # of the stage reproduces the checkpoint bit for bit
    torch.manual_seed(derive_seed(cfg.seed, 40))
    if cfg.head == "transfer":
        path = _upstream_checkpoint(cfg, "discriminator.ckpt", f"head {cfg.head!r}")
        detector = TransferDetector(
            load_model(path, "discriminator"), cfg.patch_size, len(class_set.prob_channel_ids)
        )
    else:
        detector = build_detector(
            DetectorConfig(
                head=cfg.head,
                patch_size=cfg.patch_size,
                base_filters=cfg.base_filters,
                conv_stacks=cfg.conv_stacks,
                lambda_d=cfg.lambda_d,
            )
        )

    triplets, skipped = triplets_from_dataset(
        dataset, generator, cfg.patch_size, cfg.tau, cfg.seed, cfg.train_images
    )
    train_cfg = TrainConfig(
        lambda_d=cfg.lambda_d,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
    )
    detector, curve = train_detector(triplets, detector, train_cfg, run_dir=out, class_set=class_set)
    save_model(out / "detector.ckpt", detector)
    final_loss = curve[-1].mean_loss
    print(
        f"detector[{cfg.head}]: {len(triplets)} triplets ({skipped} skipped), "
        f"{cfg.epochs} epochs, final loss {final_loss:.4f}"
    )
    return {"head": cfg.head, "n_triplets": len(triplets), "skipped": skipped, "final_loss": final_loss}


def _run_eval(run_dir: Path, dataset_dir: Path, mask_flag: str, report_path: Path, seed=None) -> dict:
    cfg = _load_run_config(run_dir)
    meta = _read_run_meta(run_dir)
    if meta.get("stage") != "detector":
        raise InputError(f"{run_dir}: evaluation needs a detector run, found stage {meta.get('stage')!r}")
    dataset = load_dataset(dataset_dir)
    mask_kind = _MASK_FLAG[mask_flag]
    detector = _detector_from_run(run_dir, cfg)
    generator = _generator_fn(cfg, dataset)
    rows = {
        f"detector-{cfg.head}": evaluate_detector(
            detector,
            dataset,
            generator,
            mask_kind=mask_kind,
            patch_size=cfg.patch_size,
            seed=cfg.seed if seed is None else int(seed),
        )
    }
    if any(im.pred_probs is not None for im in dataset.images):
        rows["entropy-baseline"] = evaluate_entropy_baseline(dataset, mask_kind=mask_kind)
    save_report_file(
        report_path,
        mask_kind,
        rows,
        dataset=str(dataset_dir),
        dataset_hash=tree_hash(dataset_dir),
        version=__version__,
        config=cfg.to_entries(),
    )
    print(f"{'row':<22} {'auc':>8} {'best f1':>9} {'at t':>6}")
    for name, report in rows.items():
        print(f"{name:<22} {report.auc:>8.4f} {report.best_f1[1]:>9.4f} {report.best_f1[0]:>6.3f}")
    print(f"report: {report_path}")
    return {name: report.auc for name, report in rows.items()}


def _run_render(run_dir: Path, dataset_dir: Path, out: Path, n: int, force: bool, seed=None) -> int:
    cfg = _load_run_config(run_dir)
    dataset = load_dataset(dataset_dir)
    detector = _detector_from_run(run_dir, cfg)
    generator = _generator_fn(cfg, dataset)
    _prepare_run_dir(out, force)
    base_seed = cfg.seed if seed is None else int(seed)
    images = dataset.images[:n]
    for index, image in enumerate(images):
        labels = image.pred_labels if image.pred_labels is not None else image.labels
        synthetic = generator(labels, derive_seed(base_seed, index))
        dmap = image_dissimilarity(detector, image, synthetic, dataset.class_set, cfg.patch_size)
        ood, misclass, _ = build_masks(image, dataset.class_set)
        panel = compose_panel(image.rgb, synthetic, dmap, ood, misclass)
        write_panel(out / f"{image.id}.png", panel)
    print(f"wrote {len(images)} panels to {out}")
    return len(images)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    out = _resolve(args.out)
    path, counts = synth_dataset(
        out,
        n=args.n,
        seed=args.seed,
        ood_rate=args.ood_rate,
        corrupt_rate=args.corrupt_rate,
        size=args.size,
        patch_size=args.patch_size,
        force=args.force,
    )
    total = sum(counts.values())
    print(f"wrote {args.n} images ({args.size}x{args.size}) to {path}")
    print(f"{'class':>6} {'pixels':>12} {'share':>8}")
    for class_id in sorted(counts):
        print(f"{class_id:>6} {counts[class_id]:>12} {counts[class_id] / total:>8.4f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _run_train(cfg, args.stage, _resolve(args.out), args.force)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _run_eval(_resolve(args.run), _resolve(args.dataset), args.mask, _resolve(args.report), args.seed)
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    _run_render(_resolve(args.run), _resolve(args.dataset), _resolve(args.out), args.n, args.force, args.seed)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.param != "lambda_d":
        raise InputError(f"unsupported sweep parameter {args.param!r}; only lambda_d is sweepable")
    cfg = _config_from_args(args)
    if args.values:
        cfg = cfg.override({"lambda_values": args.values})
    if cfg.head not in CORE_HEADS:
        raise InputError(f"sweep trains fresh detectors; head must be one of {CORE_HEADS}")
    dataset_dir, dataset = _require_dataset(cfg)
    if cfg.eval_dataset:
        eval_dir = _resolve(cfg.eval_dataset)
        eval_dataset = load_dataset(eval_dir)
    else:
        eval_dir, eval_dataset = dataset_dir, dataset
    out = _prepare_run_dir(_resolve(args.out), args.force)
    cfg = cfg.override({"dataset": str(dataset_dir), "eval_dataset": str(eval_dir)})
    mask_kind = _MASK_FLAG[args.mask]

    generator = _generator_fn(cfg, dataset)
    eval_generator = _generator_fn(cfg, eval_dataset)
    triplets, skipped = triplets_from_dataset(
        dataset, generator, cfg.patch_size, cfg.tau, cfg.seed, cfg.train_images
    )
    detector_config = DetectorConfig(
        head=cfg.head,
        patch_size=cfg.patch_size,
        base_filters=cfg.base_filters,
        conv_stacks=cfg.conv_stacks,
        lambda_d=cfg.lambda_d,
    )

    def eval_fn(detector) -> float:
        report = evaluate_detector(
            detector, eval_dataset, eval_generator,
            mask_kind=mask_kind, patch_size=cfg.patch_size, seed=cfg.seed,
        )
        return report.best_f1[1]

    rows = lambda_sweep(
        triplets,
        detector_config,
        cfg.lambda_values,
        eval_fn,
        TrainConfig(
            lambda_d=None,
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            seed=cfg.seed,
        ),
        run_dir=out,
    )
    cfg.save(out / CONFIG_FILE_NAME)
    _write_run_meta(
        out,
        {
            "command": "sweep",
            "param": "lambda_d",
            "version": __version__,
            "dataset": str(dataset_dir),
            "dataset_hash": tree_hash(dataset_dir),
            "mask": mask_kind,
            "n_triplets": len(triplets),
            "skipped": skipped,
            "rows": rows,
        },
    )
    print(f"{'lambda_d':>9} {'best f1':>9}  error")
    for row in rows:
        f1 = "-" if row["f1"] is None else f"{row['f1']:.4f}"
        print(f"{row['lambda_d']:>9g} {f1:>9}  {row['error'] or ''}")
    print(f"sweep table: {out / 'lambda_sweep.csv'}")
    if all(row["error"] for row in rows):
        raise TrainingFailure("every sweep value failed to train", summary={"rows": rows})
    return 0


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Small end-to-end demonstration: synth -> seg -> gan -> detectors ->
    eval x masks -> panels, sized to finish in a few minutes on one core."""
    out = _prepare_run_dir(_resolve(args.out), args.force)
    seed = args.seed
    t_start = time.time()

    def step(label, fn):
        t0 = time.time()
        result = fn()
        print(f"[{time.time() - t_start:7.1f}s] {label} ({time.time() - t0:.1f}s)")
        return result

    train_dir = out / "data" / "train"
    test_dir = out / "data" / "test"
    step("synth train set", lambda: synth_dataset(
        train_dir, n=24, seed=seed, ood_rate=0.35, corrupt_rate=0.25, size=64, patch_size=32))
    step("synth test set", lambda: synth_dataset(
        test_dir, n=10, seed=seed + 1, ood_rate=0.5, corrupt_rate=0.25, size=64, patch_size=32))

    base = RunConfig().override({
        "dataset": str(train_dir),
        "patch_size": "32",
        "base_filters": "8",
        "conv_stacks": "2,2,2",
        "epochs": "14",
        "learning_rate": "0.002",
        "seed": str(seed),
        "gan_epochs": "10",
        "seg_epochs": "40",
        "seg_lr": "0.003",
    })
    step("train seg", lambda: _run_train(base, "seg", out / "runs" / "seg", force=False))
    step("train gan", lambda: _run_train(base, "gan", out / "runs" / "gan", force=False))

    detector_cfg = base.override({"generator": "gan", "gan_run": str(out / "runs" / "gan")})
    for head in ("fc", "deconv"):
        step(f"train detector {head}", lambda h=head: _run_train(
            detector_cfg.override({"head": h}), "detector", out / "runs" / f"det-{h}", force=False))

    reports = {}
    for mask in ("ood", "mis", "union"):
        reports[f"fc-{mask}"] = step(f"eval fc {mask}", lambda m=mask: _run_eval(
            out / "runs" / "det-fc", test_dir, m, out / "reports" / f"fc-{m}.json"))
    reports["deconv-ood"] = step("eval deconv ood", lambda: _run_eval(
        out / "runs" / "det-deconv", test_dir, "ood", out / "reports" / "deconv-ood.json"))

    step("render panels", lambda: _run_render(
        out / "runs" / "det-fc", test_dir, out / "panels", n=4, force=False))

    (out / "summary.json").write_text(json.dumps(
        {"version": __version__, "seed": seed, "reports": reports}, indent=2, sort_keys=True) + "\n")
    total = time.time() - t_start
    print(f"reproduce finished in {total / 60:.1f} min; artifacts under {out}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

_CONFIG_FLAG_KEYS = (
    "dataset", "eval_dataset", "head", "patch_size", "tau", "lambda_d", "epochs",
    "learning_rate", "batch_size", "seed", "train_images", "generator", "render_noise",
    "gan_run", "base_filters", "conv_stacks", "gan_epochs", "gan_lr", "gan_adversarial",
    "gan_base", "disc_base", "seg_epochs", "seg_lr", "seg_base",
)


def _add_config_flags(parser: argparse.ArgumentParser, keys=_CONFIG_FLAG_KEYS) -> None:
    group = parser.add_argument_group("config overrides (beat --config entries)")
    for key in keys:
        group.add_argument(
            f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V",
            help=f"override config key {key}",
        )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=None, metavar="N",
                        help="cap worker threads (torch intra-op)")
    parser.add_argument("--force", action="store_true",
                        help="overwrite an existing non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissim",
        description="Find segmentation errors by comparing images against synthetic re-renders of their predicted labels.",
        epilog=f"Exit codes: 0 ok, 2 input error, 3 training failure, 1 internal error. "
               f"Relative paths resolve under ${RUN_ROOT_ENV} when set.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a toy dataset directory")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--n", type=int, default=40, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ood-rate", type=float, default=0.25, help="fraction of scenes given an ood object")
    p.add_argument("--corrupt-rate", type=float, default=0.0, help="fraction of in-dist pixels to mispredict")
    p.add_argument("--size", type=int, default=128, help="image height and width")
    p.add_argument("--patch-size", type=int, default=64, help="grid the scenes are built against")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one pipeline stage into a run directory")
    p.add_argument("--stage", required=True, choices=("seg", "gan", "detector"))
    p.add_argument("--config", default=None, metavar="FILE", help="key=value config file")
    p.add_argument("--out", required=True, help="run directory to create")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a detector run against a dataset")
    p.add_argument("--run", required=True, help="detector run directory")
    p.add_argument("--dataset", required=True, help="dataset directory to score")
    p.add_argument("--mask", choices=tuple(_MASK_FLAG), default="union")
    p.add_argument("--report", required=True, help="JSON report file to write")
    p.add_argument("--seed", type=int, default=None, help="generator seed (defaults to the run's)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write real|synthetic|dissimilarity|mask panels")
    p.add_argument("--run", required=True, help="detector run directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="panel directory to create")
    p.add_argument("--n", type=int, default=4, help="number of panels")
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sweep", help="train and score one detector per parameter value")
    p.add_argument("--param", required=True, help="swept parameter (only lambda_d)")
    p.add_argument("--values", default=None, metavar="LIST", help="comma-separated values")
    p.add_argument("--config", default=None, metavar="FILE")
    p.add_argument("--out", required=True, help="sweep run directory")
    p.add_argument("--mask", choices=tuple(_MASK_FLAG), default="union")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="run the whole pipeline at demo scale")
    p.add_argument("--out", required=True, help="directory for all demo artifacts")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            print("error: --jobs must be at least 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.jobs)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3
    except DissimError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
