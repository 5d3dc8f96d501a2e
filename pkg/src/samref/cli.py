"""Command-line entry point: gen-data, cache-embeddings, train, eval, serve, report.

Config files are flat key=value text; CLI flags override file values. Every
run writes a manifest (config snapshot, checkpoint/dataset hashes) so a run
can be reproduced bit-for-bit on the same platform.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
import uuid
from pathlib import Path

import click as click_cli
import numpy as np
import torch

from . import __version__
from . import data as data_mod
from . import eval_harness, trainer
from .backbone import EmbeddingCache, CachingBackbone
from .pipeline import CoarseOnlyPipeline, PipelineConfig, SamRefPipeline

CACHE_ENV = "SAMREF_CACHE_DIR"


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _cache_dir(explicit: str | None) -> str | None:
    return os.environ.get(CACHE_ENV) or explicit


def write_manifest(out_dir: str | Path, kind: str, config: dict, **hashes) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": uuid.uuid4().hex,
        "kind": kind,
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": config,
        **hashes,
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def parse_config_file(path: str | Path, allowed: set[str]) -> dict:
    """Flat key=value config; '#' starts a comment. Unknown keys are an error."""
    values = {}
    unknown = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click_cli.ClickException(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            unknown.append(key)
        values[key] = value
    if unknown:
        raise click_cli.ClickException(
            f"unknown config keys: {', '.join(sorted(unknown))}; known keys: {', '.join(sorted(allowed))}"
        )
    return values


def build_pipeline(checkpoint: str | Path, cache_dir: str | None = None) -> SamRefPipeline:
    modules = trainer.modules_from_checkpoint(checkpoint)
    backbone = modules["backbone"]
    if cache_dir:
        backbone = CachingBackbone(backbone, EmbeddingCache(cache_dir))
    return SamRefPipeline(
        backbone,
        modules["fusion"],
        modules["upscaler"],
        modules["refiner"],
        modules["local_heads"],
        PipelineConfig(n_blocks=modules["refiner"].n_blocks),
    ).eval()


@click_cli.group()
@click_cli.version_option(__version__)
def main():
    """Interactive segmentation refinement toolkit."""


@main.command("gen-data")
@click_cli.option("-n", "n", type=int, required=True, help="Number of samples.")
@click_cli.option("--seed", type=int, default=0, show_default=True)
@click_cli.option("--out", type=click_cli.Path(), default="data", show_default=True)
@click_cli.option("--split", default="train", show_default=True)
@click_cli.option("--force", is_flag=True, help="Overwrite an existing non-empty split dir.")
def cmd_gen_data(n, seed, out, split, force):
    """Generate a synthetic shape dataset on disk."""
    split_dir = Path(out) / split
    if split_dir.exists() and any(split_dir.iterdir()) and not force:
        raise click_cli.ClickException(f"{split_dir} exists and is not empty; use --force to overwrite")
    samples = data_mod.generate_synthetic_dataset(n, seed)
    root = data_mod.save_dataset(samples, out, split)
    write_manifest(root, "gen-data", {"n": n, "seed": seed, "split": split},
                   dataset_hash=data_mod.dataset_hash(root))
    click_cli.echo(f"wrote {n} samples to {root}")


@main.command("cache-embeddings")
@click_cli.option("--data", "data_dir", type=click_cli.Path(exists=True), required=True)
@click_cli.option("--cache", "cache_dir", type=click_cli.Path(), default="cache", show_default=True)
@click_cli.option("--checkpoint", type=click_cli.Path(exists=True), default=None,
                  help="Checkpoint providing encoder weights (fresh toy weights otherwise).")
def cmd_cache_embeddings(data_dir, cache_dir, checkpoint):
    """Pre-extract and store image embeddings for a dataset."""
    cache_dir = _cache_dir(cache_dir)
    if checkpoint:
        backbone = trainer.modules_from_checkpoint(checkpoint)["backbone"]
    else:
        torch.manual_seed(0)
        backbone = trainer.build_modules()["backbone"]
    entries = data_mod.load_dataset(data_dir)
    written = trainer.precompute_embeddings(backbone, entries, EmbeddingCache(cache_dir))
    click_cli.echo(f"wrote {written} embeddings ({len(entries) - written} already cached)")


_CONFIG_KEYS = {f.name for f in dataclasses.fields(trainer.TrainConfig)}


@main.command("train")
@click_cli.option("--config", "config_path", type=click_cli.Path(exists=True), default=None,
                  help="Flat key=value config file.")
@click_cli.option("--stage", type=click_cli.IntRange(1, 2), required=True)
@click_cli.option("--data", "data_dir", type=click_cli.Path(exists=True), default=None)
@click_cli.option("--out", "out_dir", type=click_cli.Path(), default=None)
@click_cli.option("--cache", "cache_dir", type=click_cli.Path(), default=None)
@click_cli.option("--iterations", type=int, default=None)
@click_cli.option("--batch-size", type=int, default=None)
@click_cli.option("--seed", type=int, default=None)
@click_cli.option("--stage1-checkpoint", type=click_cli.Path(exists=True), default=None)
def cmd_train(config_path, stage, data_dir, out_dir, cache_dir, iterations, batch_size, seed, stage1_checkpoint):
    """Run one training stage and write a checkpoint."""
    values: dict = {}
    if config_path:
        values.update(parse_config_file(config_path, _CONFIG_KEYS))
    overrides = {
        "stage": stage, "data_dir": data_dir, "out_dir": out_dir, "cache_dir": cache_dir,
        "iterations": iterations, "batch_size": batch_size, "seed": seed,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "data_dir" not in values or "out_dir" not in values:
        raise click_cli.ClickException("data_dir and out_dir are required (config file or flags)")
    values["cache_dir"] = _cache_dir(values.get("cache_dir"))
    for key in ("stage", "iterations", "batch_size", "n_blocks", "seed", "min_clicks", "max_clicks"):
        if key in values and values[key] is not None:
            values[key] = int(values[key])
    if "learning_rate" in values:
        values["learning_rate"] = float(values["learning_rate"])
    config = trainer.TrainConfig(**values)

    try:
        if config.stage == 1:
            ckpt = trainer.train_stage1(config)
        else:
            if not stage1_checkpoint:
                raise click_cli.ClickException("stage 2 requires --stage1-checkpoint from a stage-1 run")
            ckpt = trainer.train_stage2(config, stage1_checkpoint)
    except RuntimeError as exc:
        raise click_cli.ClickException(f"training aborted: {exc}")

    hashes = {"checkpoint_hash": _file_hash(ckpt), "dataset_hash": data_mod.dataset_hash(config.data_dir)}
    if stage1_checkpoint:
        hashes["stage1_checkpoint_hash"] = _file_hash(stage1_checkpoint)
    write_manifest(config.out_dir, "train", dataclasses.asdict(config), **hashes)
    log = Path(config.out_dir) / f"train_stage{config.stage}.jsonl"
    if log.exists():
        last = json.loads(log.read_text().splitlines()[-1])
        click_cli.echo("final losses: " + ", ".join(f"{k}={v:.4f}" for k, v in last.items() if k not in ("stage", "step")))
    click_cli.echo(f"checkpoint: {ckpt}")


@main.command("eval")
@click_cli.option("--checkpoint", type=click_cli.Path(exists=True), required=True)
@click_cli.option("--data", "data_dir", type=click_cli.Path(exists=True), required=True)
@click_cli.option("--out", "out_dir", type=click_cli.Path(), default="runs/eval", show_default=True)
@click_cli.option("--max-clicks", type=int, default=eval_harness.MAX_CLICKS, show_default=True)
@click_cli.option("--coarse-only", is_flag=True, help="Evaluate the coarse decoder baseline instead.")
@click_cli.option("--sat", is_flag=True, help="Also measure sequential grid-prompt latency.")
@click_cli.option("--dump-masks", is_flag=True, help="Store per-click masks as PNGs.")
def cmd_eval(checkpoint, data_dir, out_dir, max_clicks, coarse_only, sat, dump_masks):
    """Run the interactive benchmark and write CSV/JSONL/figure reports."""
    pipeline = build_pipeline(checkpoint)
    if coarse_only:
        pipeline = CoarseOnlyPipeline(pipeline.backbone).eval()
    entries = data_mod.load_dataset(data_dir)
    out = Path(out_dir)
    sessions, skipped = [], 0
    for entry in entries:
        if not entry.mask_path.exists():
            click_cli.echo(f"warning: missing gt mask for {entry.sample_id}, skipping", err=True)
            skipped += 1
            continue
        image = data_mod.load_image_tensor(entry.image_path)
        gt_map = data_mod.mask_to_map(data_mod.load_mask(entry.mask_path))
        dump = out / "masks" if dump_masks else None
        sessions.append(
            eval_harness.run_session(pipeline, image, gt_map, image_id=entry.sample_id,
                                     max_clicks=max_clicks, dump_dir=dump)
        )
    report = eval_harness.compute_report(sessions)
    report.skipped = skipped
    paths = eval_harness.write_report(report, out)
    if sat:
        image = data_mod.load_image_tensor(entries[0].image_path)
        seconds, prompts = eval_harness.sat_latency(pipeline, image)
        (out / "sat_latency.json").write_text(json.dumps({"seconds": seconds, "prompts": prompts}))
        click_cli.echo(f"SAT latency: {seconds:.2f}s for {prompts} prompts")
    write_manifest(out, "eval", {"max_clicks": max_clicks, "coarse_only": coarse_only},
                   checkpoint_hash=_file_hash(checkpoint), dataset_hash=data_mod.dataset_hash(data_dir))
    click_cli.echo(json.dumps(report.to_row()))
    click_cli.echo(f"report: {paths['csv']}")


@main.command("report")
@click_cli.option("--sessions", "sessions_path", type=click_cli.Path(exists=True), required=True,
                  help="A *_sessions.jsonl file from a previous eval run.")
@click_cli.option("--out", "out_dir", type=click_cli.Path(), default="runs/report", show_default=True)
def cmd_report(sessions_path, out_dir):
    """Recompute aggregates and figures from logged per-image rows."""
    sessions = [
        eval_harness.SessionRecord.from_dict(json.loads(line))
        for line in Path(sessions_path).read_text().splitlines() if line.strip()
    ]
    report = eval_harness.compute_report(sessions)
    paths = eval_harness.write_report(report, out_dir)
    click_cli.echo(json.dumps(report.to_row()))
    click_cli.echo(f"report: {paths['csv']}")


@main.command("serve")
@click_cli.option("--checkpoint", type=click_cli.Path(exists=True), required=True)
@click_cli.option("--host", default="127.0.0.1", show_default=True)
@click_cli.option("--port", type=int, default=8000, show_default=True)
@click_cli.option("--idle-timeout", type=float, default=1800.0, show_default=True)
def cmd_serve(checkpoint, host, port, idle_timeout):
    """Serve the live session API until terminated."""
    import socket
    import uvicorn

    from .api_service import create_app

    # uvicorn logs bind failures instead of raising, so probe the port first
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            probe.bind((host, port))
        except OSError:
            raise click_cli.ClickException(f"port {port} is already in use")

    pipeline = build_pipeline(checkpoint)
    app = create_app(pipeline, idle_timeout=idle_timeout, version=__version__,
                     checkpoint_hash=_file_hash(checkpoint))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
