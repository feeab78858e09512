"""
Handlers for the kdlic subcommands.

Each handler takes the parsed argparse namespace and returns a process exit
status; KdlicError subclasses are turned into exit codes by src.main.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import yaml
from loguru import logger

from src.core.config import PROJECT_DIR, rd_lambda_for_quality, resolve_device, settings
from src.core.errors import ConfigurationError, PreconditionError
from src.core.schemas import CodecSpec, ExperimentConfig, RDRecord, parse_schema
from src.models.checkpoint import LoadedCheckpoint, import_pretrained, load_checkpoint
from src.models.hyperprior import build_model
from src.services import codecs, data, metrics, plotting, profiler, trainer
from src.storage.results import ResultsFile, ResultsStore

CHECKPOINT_NAMES = {"checkpoint.pt", "best.pt"}


# Experiment configuration


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = target
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigurationError(f"'{key}' is not a section", field=dotted)
        node = child
    node[keys[-1]] = value


def apply_overrides(raw: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply `section.key=value` overrides; values are parsed as YAML scalars/lists."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' is not of the form section.key=value", field="--set")
        dotted, text = item.split("=", 1)
        _set_dotted(raw, dotted.strip(), yaml.safe_load(text))
    return raw


def load_experiment(
    config_path,
    overrides: Optional[List[str]] = None,
    rd_quality: Optional[int] = None,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    tag: Optional[str] = None,
) -> ExperimentConfig:
    """
    Read an experiment YAML file and apply CLI overrides.

    Args:
        config_path: YAML file with model/train/kd/data sections
        overrides: `section.key=value` strings
        rd_quality: Zoo quality 1..8 selecting the RD lambda
        steps: Override train.steps
        seed: Override train.seed
        tag: Override the run tag

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigurationError: Naming the offending field
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigurationError(f"config file not found: {config_path}", field="config")
    try:
        raw = yaml.safe_load(config_path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{config_path} is not valid YAML: {e}", field="config") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{config_path} must contain a mapping", field="config")

    raw = apply_overrides(raw, overrides or [])
    if rd_quality is not None:
        rd_lambda = rd_lambda_for_quality(rd_quality)
        section = "kd" if raw.get("kd") else "train"
        _set_dotted(raw, f"{section}.rd_lambda", rd_lambda)
    if steps is not None:
        _set_dotted(raw, "train.steps", steps)
    if seed is not None:
        _set_dotted(raw, "train.seed", seed)
    if tag is not None:
        raw["tag"] = tag
    return parse_schema(ExperimentConfig, raw)


def config_hash(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def commit_tag() -> str:
    if settings.COMMIT_TAG:
        return settings.COMMIT_TAG
    try:
        result = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=PROJECT_DIR,
            capture_output=True,
            text=True,
            check=True,
        )
        return result.stdout.strip() or "unknown"
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def _model_id_for(checkpoint: Path) -> str:
    checkpoint = Path(checkpoint)
    return checkpoint.parent.name if checkpoint.name in CHECKPOINT_NAMES else checkpoint.stem


def _label_for(loaded: LoadedCheckpoint, fallback: str) -> str:
    rd_lambda = loaded.meta.get("rd_lambda")
    return f"lambda={rd_lambda}" if rd_lambda is not None else fallback


def _print_table(frame: pd.DataFrame) -> None:
    print(frame.to_markdown(index=False, floatfmt=".4f"))


# Subcommands


def cmd_index(args: argparse.Namespace) -> int:
    entries = data.index(args.root)
    print(f"Indexed {len(entries)} images in {args.root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment(
        args.config,
        overrides=args.set,
        rd_quality=args.rd_quality,
        steps=args.steps,
        seed=args.seed,
        tag=args.tag,
    )
    missing = config.missing_paths()
    if missing:
        raise ConfigurationError(
            f"paths do not exist: {', '.join(str(p) for p in missing)}", field="data"
        )
    run_dir = config.run_dir
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigurationError(
            f"tag '{config.tag}' is already used in {config.output_dir}; pick another --tag",
            field="tag",
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = config.model_dump(mode="json")
    (run_dir / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    logger.info(f"Run {config.tag}: writing to {run_dir}")

    device = resolve_device(args.device)
    dataset = data.PatchDataset.open(config.data.train_root, crop=config.train.crop, seed=config.train.seed)
    eval_set = data.load_eval_set(config.data.eval_root)

    model = build_model(config.model)
    model, state = trainer.train(model, dataset, config.train, output_dir=run_dir, device=device)

    label = f"lambda={config.train.effective_rd_lambda}"
    point = metrics.evaluate_model(model, eval_set, device=device, label=label)
    record = RDRecord(
        model_id=config.tag, config_hash=config_hash(resolved), commit=commit_tag(), point=point
    )
    ResultsStore(run_dir / "results.json").upsert_records([record])
    print(
        f"{config.tag}: {point.bpp:.4f} bpp, {point.psnr:.2f} dB PSNR"
        + (f", MS-SSIM {point.msssim:.4f}" if point.msssim is not None else "")
        + f" after {state.step} steps"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    device = resolve_device(args.device)
    loaded = load_checkpoint(args.checkpoint, map_location=device)
    eval_set = data.load_eval_set(args.eval_root or settings.EVAL_ROOT)

    per_image = metrics.evaluate_images(
        loaded.model, eval_set, device=device, save_dir=args.save_reconstructions
    )
    _print_table(per_image)

    model_id = args.model_id or _model_id_for(args.checkpoint)
    point = metrics.summarize(per_image, label=args.label or _label_for(loaded, model_id))
    record = RDRecord(
        model_id=model_id,
        config_hash=config_hash({"model": loaded.config.model_dump(), "meta": loaded.meta}),
        commit=commit_tag(),
        point=point,
    )
    ResultsStore(args.results).upsert_records([record])
    print(
        f"{model_id}: {point.bpp:.4f} bpp, {point.psnr:.2f} dB PSNR"
        + (f", MS-SSIM {point.msssim:.4f}" if point.msssim is not None else "")
    )
    return 0


def parse_input_shape(text: Optional[str]):
    if not text:
        return None
    try:
        parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p.strip()]
    except ValueError:
        raise ConfigurationError(f"cannot parse '{text}', expected HxW", field="input_shape")
    if len(parts) not in (2, 3, 4):
        raise ConfigurationError(f"'{text}' must have 2 to 4 dimensions", field="input_shape")
    return tuple(parts)


def cmd_profile(args: argparse.Namespace) -> int:
    meter = None
    try:
        meter = profiler.parse_meter(args.meter)
        eval_set = data.load_eval_set(args.eval_root or settings.EVAL_ROOT)
        if args.codec:
            spec = parse_schema(
                CodecSpec,
                {"name": args.codec, "quality_param": args.quality, "mode_flags": _flags(args.flag)},
            )
            report = codecs.profile_codec(eval_set, spec, meter=meter, passes=args.passes)
        else:
            if not args.checkpoint:
                raise ConfigurationError("give a checkpoint or --codec", field="checkpoint")
            device = resolve_device(args.device)
            loaded = load_checkpoint(args.checkpoint, map_location=device)
            report = profiler.profile_model(
                loaded.model,
                eval_set,
                model_id=args.model_id or _model_id_for(args.checkpoint),
                meter=meter,
                passes=args.passes,
                input_shape=parse_input_shape(args.input_shape),
                device=device,
            )
    finally:
        if meter is not None:
            meter.close()

    _print_table(pd.DataFrame([report.model_dump()]))
    if args.results:
        ResultsStore(args.results).upsert_profile(report)
    return 0


def _flags(items: Optional[List[str]]) -> Dict[str, Any]:
    flags = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"flag '{item}' is not of the form key=value", field="--flag")
        key, text = item.split("=", 1)
        flags[key.strip()] = yaml.safe_load(text)
    return flags


def cmd_codec_sweep(args: argparse.Namespace) -> int:
    flags = _flags(args.flag)
    specs = [
        parse_schema(CodecSpec, {"name": args.codec, "quality_param": q, "mode_flags": flags})
        for q in args.qualities
    ]
    eval_set = data.load_eval_set(args.eval_root or settings.EVAL_ROOT)
    curve = codecs.codec_rd_curve(eval_set, specs)

    model_id = args.model_id or curve.model_id
    records = [
        RDRecord(
            model_id=model_id,
            config_hash=config_hash([s.model_dump() for s in specs]),
            commit=commit_tag(),
            point=point,
        )
        for point in curve.points
    ]
    ResultsStore(args.results).upsert_records(records)
    _print_table(pd.DataFrame([p.model_dump() for p in curve.points]))
    return 0


def cmd_bd(args: argparse.Namespace) -> int:
    reference = ResultsStore(args.reference).load().curve(args.reference_id)
    test = ResultsStore(args.test).load().curve(args.test_id)
    report = metrics.bd_report(reference, test, variant=args.variant)
    low, high = report.psnr_interval
    rate_low, rate_high = report.log_rate_interval
    print(f"reference: {reference.model_id} ({len(reference.points)} points)")
    print(f"test:      {test.model_id} ({len(test.points)} points)")
    print(f"BD-Rate: {report.bd_rate:+.4f} %  over PSNR [{low:.4f}, {high:.4f}] dB")
    print(
        f"BD-PSNR: {report.bd_psnr:+.4f} dB over bpp [{10 ** rate_low:.4f}, {10 ** rate_high:.4f}]"
    )
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    merged = ResultsFile()
    for path in args.results:
        loaded = ResultsStore(path).load()
        merged.records.extend(loaded.records)
        merged.profiles.extend(loaded.profiles)

    curves = merged.curves()
    if not any(c.points for c in curves):
        raise PreconditionError("the results files contain no RD points; nothing was written")

    out_dir = Path(args.out_dir)
    plotting.plot_rd_curves(curves, out_dir / "rd_psnr.png", title=args.title)
    plotting.plot_mse_curves(curves, out_dir / "rd_mse.png")
    plotting.plot_resources(merged, out_dir)
    return 0


def cmd_import_teacher(args: argparse.Namespace) -> int:
    loaded = import_pretrained(args.source, args.destination, quality=args.quality)
    print(
        f"Imported N={loaded.config.channels_n} M={loaded.config.latent_m} "
        f"hyper={loaded.config.hyper_out_channels} -> {args.destination}"
    )
    return 0
