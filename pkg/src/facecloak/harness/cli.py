"""Command line interface: ``facecloak <subcommand> [options]``.

Subcommands: gen-data, train-toy, attack, evaluate, robustness, report.
Every run writes into a fresh run directory (``--out``, or an auto-named
directory under ``$FACECLOAK_RUNS_DIR``, default ``./runs``). Failures
print a one-line JSON error record on stderr and exit with a code from
:data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from facecloak.attack import AttackConfig, ensemble_attack, gray_box_attack, white_box_attack
from facecloak.detector.model import CheckpointVersionError, ToyDetector
from facecloak.detector.synthetic import SyntheticFaceSpec, generate_dataset
from facecloak.detector.training import TrainConfig, TrainingError, evaluate_recall, finetune, train_toy_detector
from facecloak.geometry import BoundingBox
from facecloak.harness.manifest import DatasetManifest, ManifestError, Record, SchemaVersionError, load_manifest, write_manifest
from facecloak.harness.report import RunRecord, load_run, utc_now, write_csv, write_json, write_report
from facecloak.harness import plotting
from facecloak.metrics import evaluate
from facecloak.robustness import RobustnessConfig, robustness_sweep

logger = logging.getLogger("facecloak")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "schema_version": 3,
    "missing_input": 4,
    "invalid_input": 5,
    "training_failed": 6,
    "output_exists": 7,
}
RUNS_ENV = "FACECLOAK_RUNS_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file whose keys set option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", help="run directory to create (must not exist)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="facecloak", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", parents=[common], help="render a synthetic face dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--faces", type=int, default=3, help="faces per image")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--holdout", type=float, default=0.0, help="fraction of images tagged 'test'")
    p.add_argument("--background-seed", type=int, default=0)

    p = subs["train-toy"] = sub.add_parser("train-toy", parents=[common], help="train (or fine-tune) a toy detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", choices=["A", "B", "C"], default="A")
    p.add_argument("--init", help="checkpoint to fine-tune instead of training from scratch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--name")
    p.add_argument("--min-recall", type=float, default=0.9)
    p.add_argument("--max-false-per-image", type=float, default=0.1)

    p = subs["attack"] = sub.add_parser("attack", parents=[common], help="perturb every image of a manifest")
    p.add_argument("--mode", choices=["white", "gray", "ensemble"], required=True)
    p.add_argument("--model", action="append", required=True, help="detector checkpoint (repeat for ensembles)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=None, help="gradient noise (gray default 0.1)")
    p.add_argument("--epsilon", type=float, default=5e-5)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--theta-p", type=float, default=0.3)
    p.add_argument("--rho", type=int, default=1000)
    p.add_argument("--step-scale", type=float, default=30.0)
    p.add_argument("--no-budget-projection", action="store_true", help="shrink steps to the budget boundary instead of projecting")
    p.add_argument("--limit", type=int, help="attack only the first N records")
    p.add_argument("--save-raw", action="store_true", help="also store real-valued perturbations (.npy)")

    p = subs["evaluate"] = sub.add_parser("evaluate", parents=[common], help="DUQ / AP / SSIM of a detector on a manifest")
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--detections", help="JSONL of precomputed detections")
    p.add_argument("--reference", help="clean manifest aligned with --manifest (adds clean DUQ and SSIM)")
    p.add_argument("--iou-min", type=float, default=0.5)
    p.add_argument("--ap-mode", choices=["continuous", "step", "11point"], default="continuous")

    p = subs["robustness"] = sub.add_parser("robustness", parents=[common], help="DUQ under JPEG, noise and blur")
    p.add_argument("--model", required=True)
    p.add_argument("--clean", required=True, help="clean manifest")
    p.add_argument("--perturbed", required=True, help="perturbed manifest aligned with --clean")
    p.add_argument("--jpeg-qualities", type=_ints, default=RobustnessConfig.jpeg_qualities)
    p.add_argument("--noise-stds", type=_floats, default=RobustnessConfig.noise_stds)
    p.add_argument("--blur-stds", type=_floats, default=RobustnessConfig.blur_stds)
    p.add_argument("--iou-min", type=float, default=0.5)

    p = subs["report"] = sub.add_parser("report", parents=[common], help="summarize evaluate/robustness runs")
    p.add_argument("--runs", nargs="+", required=True)
    return parser, subs


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_config(args.config)
        known = {a.dest for a in subs[args.command]._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        subs[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _run_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        out = root / f"{args.command}-{datetime.now():%Y%m%d-%H%M%S}-{os.getpid()}"
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"run directory {out} already exists")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path) -> ToyDetector:
    if not Path(path).exists():
        raise FileNotFoundError(f"model checkpoint {path} not found")
    return ToyDetector.load(path)


def _load_manifest(path) -> DatasetManifest:
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest {path} not found")
    return load_manifest(path)


def _samples(manifest: DatasetManifest):
    return [(manifest.load_image(r), r.boxes) for r in manifest.records]


def _resolved(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k not in ("func",)}


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args, out: Path, record: RunRecord):
    spec = SyntheticFaceSpec(image_size=args.image_size, faces_per_image=args.faces, background_seed=args.background_seed)
    manifest = generate_dataset(spec, args.count, args.seed, out, holdout_fraction=args.holdout)
    record.metrics = {"images": len(manifest), "boxes": sum(len(r.boxes) for r in manifest.records)}
    record.outputs["manifest"] = "manifest.jsonl"


# ---------------------------------------------------------------- train-toy


def cmd_train_toy(args, out: Path, record: RunRecord):
    manifest = _load_manifest(args.manifest)
    tags = {r.split for r in manifest.records}
    train = manifest.split("train") if "train" in tags else manifest
    holdout = manifest.split("test") if "test" in tags else None
    if len(train) == 0:
        raise ValueError("manifest holds no training records")
    train_s = _samples(train)
    hold_s = _samples(holdout) if holdout is not None and len(holdout) else None
    if args.init:
        base = _load_model(args.init)
        model = finetune(base, train_s, args.seed, epochs=5 if args.epochs is None else args.epochs, name=args.name)
        diff = float(np.abs(base.parameters_vector() - model.parameters_vector()).max())
        record.metrics["max_parameter_change"] = diff
    else:
        cfg = TrainConfig(min_recall=args.min_recall, max_false_per_image=args.max_false_per_image)
        if args.epochs is not None:
            cfg.epochs = args.epochs
        model = train_toy_detector(args.backbone, train_s, args.seed, cfg, holdout=hold_s, name=args.name)
    recall, fpi = evaluate_recall(model, hold_s or train_s)
    record.metrics.update({"recall": recall, "false_per_image": fpi, "backbone": model.backbone})
    model.save(out / "model.pt")
    record.outputs["model"] = "model.pt"


# ---------------------------------------------------------------- attack

_WORKER_MODELS: list[ToyDetector] = []


def _init_worker(model_paths):
    import torch

    torch.set_num_threads(1)
    _WORKER_MODELS[:] = [ToyDetector.load(p) for p in model_paths]


def _attack_one(job):
    mode, cfg_dict, image = job
    cfg = AttackConfig(**cfg_dict)
    models = _WORKER_MODELS
    if mode == "white":
        run = white_box_attack(models[0], image, cfg)
    elif mode == "gray":
        run = gray_box_attack(models[0], image, cfg)
    else:
        run = ensemble_attack(models, image, cfg)
    return run.exported(), run.perturbation.astype(np.float32), run.metadata(), max(run.budget_trace, default=0.0)


def image_seed(seed: int, index: int) -> int:
    """Per-image attack seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def attack_images(mode: str, model_paths, images, cfg: AttackConfig, workers: int = 1):
    """Attack each image with its own derived seed; results keep input order."""
    jobs = [(mode, {**cfg.to_dict(), "seed": image_seed(cfg.seed, i)}, img) for i, img in enumerate(images)]
    if workers <= 1:
        _init_worker(model_paths)
        return [_attack_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(list(model_paths),)) as pool:
        return list(pool.map(_attack_one, jobs))


def cmd_attack(args, out: Path, record: RunRecord):
    if args.mode in ("white", "gray") and len(args.model) != 1:
        raise UsageError(f"--mode {args.mode} takes exactly one --model")
    for p in args.model:
        _load_model(p)  # validate before spawning work
    manifest = _load_manifest(args.manifest)
    records = manifest.records[: args.limit] if args.limit else manifest.records
    sigma = args.sigma if args.sigma is not None else (0.1 if args.mode == "gray" else 0.0)
    if args.mode == "white" and sigma != 0:
        raise UsageError("--sigma is only meaningful for gray and ensemble modes")
    cfg = AttackConfig(
        epsilon=args.epsilon,
        max_outer_iters=args.iters,
        theta_p=args.theta_p,
        rho=args.rho,
        step_scale=args.step_scale,
        sigma=sigma,
        seed=args.seed,
        budget_projection=not args.no_budget_projection,
    )
    record.config["attack"] = cfg.to_dict()
    images = [manifest.load_image(r) for r in records]
    results = attack_images(args.mode, [str(Path(p).resolve()) for p in args.model], images, cfg, args.workers)

    (out / "images").mkdir()
    if args.save_raw:
        (out / "raw").mkdir()
    new_records, per_image = [], []
    for i, (rec, (img, raw, meta, worst_budget)) in enumerate(zip(records, results)):
        rel = f"images/{Path(rec.image).stem}.png"
        Image.fromarray(img).save(out / rel, format="PNG")  # lossless only
        if args.save_raw:
            np.save(out / "raw" / f"{Path(rec.image).stem}.npy", raw)
        new_records.append(Record(rel, rec.boxes, rec.split))
        per_image.append({"index": i, "source": rec.image, "output": rel, "seed": image_seed(cfg.seed, i), "max_budget": worst_budget, **meta})
    write_manifest(DatasetManifest(new_records, manifest.image_size, out), out / "manifest.jsonl")
    # the clean counterpart of exactly the attacked records, for evaluate --reference
    clean_records = [
        Record(os.path.relpath(manifest.image_path(r).resolve(), out.resolve()), r.boxes, r.split) for r in records
    ]
    write_manifest(DatasetManifest(clean_records, manifest.image_size, out), out / "clean_manifest.jsonl")
    with open(out / "attacks.jsonl", "w") as fh:
        for row in per_image:
            fh.write(json.dumps(row) + "\n")
    record.per_image = per_image
    record.metrics = {
        "images": len(per_image),
        "max_budget_used": max((r["max_budget"] for r in per_image), default=0.0),
        "mean_seconds": float(np.mean([r["seconds"] for r in per_image])) if per_image else 0.0,
        "terminations": {k: sum(r["termination_reason"] == k for r in per_image) for k in {r["termination_reason"] for r in per_image}},
    }
    record.outputs.update({"manifest": "manifest.jsonl", "clean_manifest": "clean_manifest.jsonl", "attacks": "attacks.jsonl"})


# ---------------------------------------------------------------- evaluate


def load_detections(path) -> list[list[tuple[BoundingBox, float]]]:
    """Read ``{"detections": [[x, y, w, h, conf], ...]}`` lines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"detections file {path} not found")
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rows = json.loads(line)["detections"]
                out.append([(BoundingBox(*map(float, r[:4])), float(r[4])) for r in rows])
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise ManifestError(f"bad detection record: {exc}", index=i) from exc
    return out


def write_detections(path, manifest: DatasetManifest, detections) -> None:
    with open(path, "w") as fh:
        for rec, dets in zip(manifest.records, detections):
            fh.write(json.dumps({"image": rec.image, "detections": [[*b.as_tuple(), c] for b, c in dets]}) + "\n")


def cmd_evaluate(args, out: Path, record: RunRecord):
    manifest = _load_manifest(args.manifest)
    gts = [r.boxes for r in manifest.records]
    model = None
    if args.model:
        model = _load_model(args.model)
        images = [manifest.load_image(r) for r in manifest.records]
        dets = model.detect_batch(images)
        write_detections(out / "detections.jsonl", manifest, dets)
        record.outputs["detections"] = "detections.jsonl"
    else:
        images = None
        dets = load_detections(args.detections)
        if len(dets) != len(manifest):
            raise ManifestError(f"{len(dets)} detection records for {len(manifest)} images")
    reports = {}
    if args.reference:
        ref = _load_manifest(args.reference)
        if len(ref) != len(manifest):
            raise ManifestError("reference manifest is not aligned with --manifest")
        ref_images = [ref.load_image(r) for r in ref.records]
        if images is None:
            images = [manifest.load_image(r) for r in manifest.records]
        if model is not None:
            reports["clean"] = evaluate(model.detect_batch(ref_images), [r.boxes for r in ref.records], args.iou_min, args.ap_mode)
        reports["attacked"] = evaluate(dets, gts, args.iou_min, args.ap_mode, originals=ref_images, perturbed=images)
    else:
        reports["attacked"] = evaluate(dets, gts, args.iou_min, args.ap_mode)
    payload = write_report(record, reports, out_dir=out)
    record.per_image = reports["attacked"].per_image
    record.metrics = {k: v for k, v in payload.items() if k in ("clean_duq", "attacked_duq", "duq_drop")}
    record.metrics.update({"duq": reports["attacked"].duq, "ap": reports["attacked"].ap, "ssim": reports["attacked"].ssim_mean})


# ---------------------------------------------------------------- robustness


def cmd_robustness(args, out: Path, record: RunRecord):
    model = _load_model(args.model)
    clean, pert = _load_manifest(args.clean), _load_manifest(args.perturbed)
    if len(clean) != len(pert):
        raise ManifestError("clean and perturbed manifests are not aligned")
    rcfg = RobustnessConfig(tuple(args.jpeg_qualities), tuple(args.noise_stds), tuple(args.blur_stds), args.iou_min, args.seed)
    result = robustness_sweep(
        model,
        [clean.load_image(r) for r in clean.records],
        [pert.load_image(r) for r in pert.records],
        [r.boxes for r in clean.records],
        rcfg,
    )
    write_report(record, curves=result, out_dir=out)
    record.metrics = {"points": len(result.points), "failures": len(result.failures)}


# ---------------------------------------------------------------- report


def cmd_report(args, out: Path, record: RunRecord):
    rows, labels, clean, attacked = [], [], [], []
    for run_dir in args.runs:
        if not Path(run_dir, "run.json").exists():
            raise FileNotFoundError(f"no run.json in {run_dir}")
        run = load_run(run_dir)
        rep_path = Path(run_dir) / "report.json"
        rep = json.loads(rep_path.read_text()) if rep_path.exists() else {}
        row = {"run": str(run_dir), "run_id": run["run_id"], "command": run["command"]}
        if "evaluation" in rep:
            att = rep["evaluation"]["attacked"]
            row.update({"duq": att["duq"], "ap": att["ap"], "ssim": att["ssim_mean"]})
            row.update({k: rep.get(k) for k in ("clean_duq", "attacked_duq", "duq_drop")})
            if rep.get("clean_duq") is not None:
                labels.append(Path(run_dir).name)
                clean.append(rep["clean_duq"])
                attacked.append(rep["attacked_duq"])
        if "curves" in rep:
            for pt in rep["curves"]:
                rows.append({**row, "operation": pt["operation"], "severity": pt["severity"], "set": pt["set"], "curve_duq": pt["duq"]})
            continue
        rows.append(row)
    fields_ = ["run", "run_id", "command", "duq", "ap", "ssim", "clean_duq", "attacked_duq", "duq_drop", "operation", "severity", "set", "curve_duq"]
    write_csv(out / "summary.csv", [{k: r.get(k) for k in fields_} for r in rows], fields_)
    files = {"summary_csv": "summary.csv"}
    if labels:
        plotting.save_figure(plotting.duq_summary_figure(labels, clean, attacked), out / "duq_summary.png")
        files["duq_figure"] = "duq_summary.png"
    write_json(out / "report.json", {"schema": "facecloak.report", "version": 1, "rows": rows, "files": files})
    record.outputs.update(files)
    record.metrics = {"runs": len(args.runs)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-toy": cmd_train_toy,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "robustness": cmd_robustness,
    "report": cmd_report,
}


def _classify(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, (SchemaVersionError, CheckpointVersionError)):
        return "schema_version"
    if isinstance(exc, FileNotFoundError):
        return "missing_input"
    if isinstance(exc, FileExistsError):
        return "output_exists"
    if isinstance(exc, TrainingError):
        return "training_failed"
    if isinstance(exc, (ManifestError, ValueError)):
        return "invalid_input"
    return "internal"


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = None
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        out = _run_dir(args)
        seeds = {"seed": args.seed}
        record = RunRecord(args.command, argv, _resolved(args), seeds)
        COMMANDS[args.command](args, out, record)
        record.finished = utc_now()
        record.save(out)
        print(json.dumps({"status": "ok", "command": args.command, "run_dir": str(out), "metrics": record.metrics}, default=str))
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except BaseException as exc:  # noqa: BLE001 - mapped to exit codes
        if isinstance(exc, KeyboardInterrupt):
            raise
        kind = _classify(exc)
        err = {"status": "error", "error": kind, "exit_code": EXIT_CODES[kind], "message": str(exc), "type": type(exc).__name__}
        if kind == "internal":
            logger.exception("unexpected failure")
        print(json.dumps(err), file=sys.stderr)
        if out is not None:
            write_json(out / "error.json", err)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
