"""Command-line entry point: data generation, pretraining, duplex
training, evaluation, trace export, the ablation matrix, and serving.

Exit codes: 0 success, 1 usage error, 2 config validation error,
3 runtime failure. Precedence: defaults < --config file < flags.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import vocab
from .metrics import (
    ABLATION_ROWS,
    ablation_report,
    irq_trace_stats,
    run_interactive_eval,
    run_tts_eval,
    write_json,
)
from .model import DuplexModel, ModelConfig
from .params import FORMAT_VERSION
from .session import SamplerConfig
from .train import (
    ConfigError,
    TrainConfig,
    pretrain_listener,
    pretrain_tts,
    train_lslm,
)
from .world import World, WorldConfig, WorldError, read_split, write_dataset


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("duplexlm")
    except Exception:
        return "unknown"


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config file must contain a JSON object")
    return cfg


def _build(dc_cls, section: dict, flag_values: dict):
    """defaults < config-file section < explicitly passed flags."""
    known = {f.name for f in fields(dc_cls)}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown {dc_cls.__name__} key {key!r} in config file")
    merged = {**section, **flag_values}
    try:
        return dc_cls(**merged)
    except TypeError as e:
        raise ConfigError(str(e))


def _explicit_flags(ctx, mapping: dict) -> dict:
    """mapping: flag param name -> dataclass field name; keeps only flags
    the user actually passed on the command line."""
    from click.core import ParameterSource

    out = {}
    for param, field_name in mapping.items():
        if ctx.get_parameter_source(param) == ParameterSource.COMMANDLINE:
            out[field_name] = ctx.params[param]
    return out


def _write_manifest(dest: Path, command: str, resolved: dict):
    manifest = {
        "command": command,
        "resolved_config": resolved,
        "versions": {
            "duplexlm": _package_version(),
            "vocab": vocab.VOCAB_VERSION,
            "checkpoint_format": FORMAT_VERSION,
        },
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _world_from_data(data_dir: str) -> World:
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"no manifest.json in data dir {data_dir}")
    cfg = json.loads(manifest.read_text())["world_config"]
    return World(WorldConfig.from_dict(cfg))


def _require(value, name: str):
    if not value:
        raise ConfigError(f"missing required option: {name}")
    return value


def _require_checkpoint(path: Optional[str]) -> str:
    _require(path, "--checkpoint")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


@click.group()
def cli():
    """Desk-scale duplex speech-token language model toolkit."""


_world_flag_map = {
    "scenario": "scenario",
    "seed": "master_seed",
    "train_size": "train_size",
    "val_size": "val_size",
    "tts_test_size": "tts_test_size",
    "interactive_per_class": "interactive_per_class",
    "ctx_len_min": "ctx_len_min",
    "ctx_len_max": "ctx_len_max",
}


@cli.command("make-data")
@click.option("--config", "config_path", default=None, type=str)
@click.option("--scenario", type=click.Choice(["command", "voice"]), default="command")
@click.option("--seed", type=int, default=0)
@click.option("--train-size", type=int, default=6000)
@click.option("--val-size", type=int, default=500)
@click.option("--tts-test-size", type=int, default=500)
@click.option("--interactive-per-class", type=int, default=500)
@click.option("--ctx-len-min", type=int, default=5)
@click.option("--ctx-len-max", type=int, default=12)
@click.option("--out", required=True, type=str)
@click.pass_context
def make_data(ctx, config_path, out, **_):
    """Generate deterministic dataset splits into --out."""
    cfg_file = _load_config_file(config_path)
    world_cfg = _build(
        WorldConfig, cfg_file.get("world", {}), _explicit_flags(ctx, _world_flag_map)
    )
    write_dataset(out, world_cfg)
    _write_manifest(
        Path(out) / "run_manifest.json", "make-data",
        {"world": world_cfg.to_dict(), "out": out},
    )
    click.echo(f"wrote dataset to {out}")


_model_flag_map = {"fusion": "fusion", "seed": "seed"}
_train_flag_map = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "total_steps": "total_steps",
    "warmup_steps": "warmup_steps",
    "lr_max": "lr_max",
}


def _train_options(f):
    for opt in reversed(
        [
            click.option("--config", "config_path", default=None, type=str),
            click.option("--data", required=True, type=str),
            click.option("--out", required=True, type=str),
            click.option(
                "--fusion",
                type=click.Choice(["early", "middle", "late"]),
                default="middle",
            ),
            click.option("--seed", type=int, default=0),
            click.option("--epochs", type=int, default=20),
            click.option("--batch-size", type=int, default=32),
            click.option("--total-steps", type=int, default=None),
            click.option("--warmup-steps", type=int, default=500),
            click.option("--lr-max", type=float, default=5e-4),
        ]
    ):
        f = opt(f)
    return f


def _resolve_train(ctx, config_path):
    cfg_file = _load_config_file(config_path)
    model_cfg = _build(
        ModelConfig, cfg_file.get("model", {}), _explicit_flags(ctx, _model_flag_map)
    )
    train_cfg = _build(
        TrainConfig, cfg_file.get("train", {}), _explicit_flags(ctx, _train_flag_map)
    )
    return model_cfg, train_cfg


@cli.command("pretrain-tts")
@_train_options
@click.pass_context
def pretrain_tts_cmd(ctx, config_path, data, out, **_):
    """Pretrain the vanilla speaking backbone on the TTS task."""
    model_cfg, train_cfg = _resolve_train(ctx, config_path)
    world = _world_from_data(data)
    train = read_split(data, "train")
    val = read_split(data, "val")
    model, log = pretrain_tts(train_cfg, model_cfg, world, train, val, out)
    log.write_jsonl(Path(out).with_suffix(".log.jsonl"))
    _write_manifest(
        Path(out).with_suffix(".manifest.json"), "pretrain-tts",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data},
    )
    click.echo(f"best val loss {log.best_val_loss:.4f} at epoch {log.best_epoch}")


@cli.command("pretrain-listener")
@_train_options
@click.pass_context
def pretrain_listener_cmd(ctx, config_path, data, out, **_):
    """Pretrain the listening encoder on frame classification."""
    model_cfg, train_cfg = _resolve_train(ctx, config_path)
    train = read_split(data, "train")
    val = read_split(data, "val")
    _, log, acc = pretrain_listener(train_cfg, model_cfg, train, val, out)
    log.write_jsonl(Path(out).with_suffix(".log.jsonl"))
    _write_manifest(
        Path(out).with_suffix(".manifest.json"), "pretrain-listener",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data},
    )
    click.echo(f"held-out frame accuracy {acc:.4f}")


@cli.command("train")
@_train_options
@click.option(
    "--speaking-init",
    type=click.Choice(["scratch", "frozen", "finetune"]),
    default="scratch",
)
@click.option(
    "--listening-init",
    type=click.Choice(["scratch", "frozen", "finetune"]),
    default="scratch",
)
@click.option("--speaking-checkpoint", default=None, type=str)
@click.option("--listening-checkpoint", default=None, type=str)
@click.pass_context
def train_cmd(ctx, config_path, data, out, speaking_init, listening_init,
              speaking_checkpoint, listening_checkpoint, **_):
    """Train the duplex model with per-channel initialization modes."""
    cfg_file = _load_config_file(config_path)
    model_cfg = _build(
        ModelConfig, cfg_file.get("model", {}), _explicit_flags(ctx, _model_flag_map)
    )
    init_flags = {
        "speaking_init": speaking_init,
        "listening_init": listening_init,
        "speaking_checkpoint": speaking_checkpoint,
        "listening_checkpoint": listening_checkpoint,
    }
    train_cfg = _build(
        TrainConfig,
        cfg_file.get("train", {}),
        {**{k: v for k, v in init_flags.items() if v not in (None, "scratch")},
         **_explicit_flags(ctx, _train_flag_map)},
    )
    world = _world_from_data(data)
    train = read_split(data, "train")
    val = read_split(data, "val")
    _, log = train_lslm(
        train_cfg, model_cfg, world, train, val, out,
        log_path=Path(out).with_suffix(".log.jsonl"),
    )
    _write_manifest(
        Path(out).with_suffix(".manifest.json"), "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data},
    )
    click.echo(f"best val loss {log.best_val_loss:.4f} at epoch {log.best_epoch}")


def _sampler(seed: int, greedy: bool) -> SamplerConfig:
    return SamplerConfig(seed=seed, greedy=greedy)


@cli.command("eval-tts")
@click.option("--config", "config_path", default=None, type=str)
@click.option("--checkpoint", default=None, type=str)
@click.option("--data", required=True, type=str)
@click.option("--vanilla", is_flag=True, default=False)
@click.option("--seed", type=int, default=0)
@click.option("--greedy", is_flag=True, default=False)
@click.option("--out", required=True, type=str)
def eval_tts_cmd(config_path, checkpoint, data, vanilla, seed, greedy, out):
    """TTS-capability error rates over the non-interactive test split."""
    _load_config_file(config_path)
    checkpoint = _require_checkpoint(checkpoint)
    model = DuplexModel.load(checkpoint)
    world = _world_from_data(data)
    testset = read_split(data, "test_tts")
    report = run_tts_eval(
        model, testset, world.codebook, _sampler(seed, greedy), vanilla=vanilla
    )
    write_json(out, report.to_dict())
    _write_manifest(
        Path(out).with_suffix(".manifest.json"), "eval-tts",
        {"checkpoint": checkpoint, "data": data, "vanilla": vanilla, "seed": seed},
    )
    click.echo(
        f"token_error_rate {report.token_error_rate:.4f} "
        f"transcript_error_rate {report.transcript_error_rate:.4f} "
        f"over {report.n_utterances} utterances"
    )


@cli.command("eval-interactive")
@click.option("--config", "config_path", default=None, type=str)
@click.option("--checkpoint", default=None, type=str)
@click.option("--data", required=True, type=str)
@click.option("--condition", type=click.Choice(["clean", "noise"]), default="clean")
@click.option("--seed", type=int, default=0)
@click.option("--greedy", is_flag=True, default=False)
@click.option("--out", required=True, type=str)
def eval_interactive_cmd(config_path, checkpoint, data, condition, seed, greedy, out):
    """Turn-taking confusion metrics over the interactive test split."""
    _load_config_file(config_path)
    checkpoint = _require_checkpoint(checkpoint)
    model = DuplexModel.load(checkpoint)
    world = _world_from_data(data)
    testset = read_split(data, f"test_{condition}")
    result = run_interactive_eval(
        model, testset, _sampler(seed, greedy), window=world.config.detection_window
    )
    stats = irq_trace_stats(result["traces"], window=world.config.detection_window)
    payload = {k: v for k, v in result.items() if k != "traces"}
    payload["irq_stats"] = stats.to_dict()
    payload["condition"] = condition
    write_json(out, payload)
    _write_manifest(
        Path(out).with_suffix(".manifest.json"), "eval-interactive",
        {"checkpoint": checkpoint, "data": data, "condition": condition,
         "seed": seed},
    )
    click.echo(
        f"{condition}: P {result['precision']:.4f} R {result['recall']:.4f} "
        f"F1 {result['f1']:.4f} counts {payload['counts']}"
    )


def run_ablation(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: str,
    out_dir,
    seed: int = 0,
    greedy: bool = False,
    condition: str = "clean",
    skip_train: bool = False,
) -> dict:
    """Train (or reuse) the vanilla baseline plus the six duplex
    initialization modes, then evaluate every available checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = _world_from_data(data)
    train = read_split(data, "train")
    val = read_split(data, "val")
    tts_test = read_split(data, "test_tts")
    interactive = read_split(data, f"test_{condition}")
    sampler = _sampler(seed, greedy)

    tts_ckpt = out / "vanilla.ckpt"
    enc_ckpt = out / "listener.ckpt"
    if not skip_train:
        if not tts_ckpt.exists():
            pretrain_tts(train_cfg, model_cfg, world, train, val, tts_ckpt)
        if not enc_ckpt.exists():
            pretrain_listener(train_cfg, model_cfg, train, val, enc_ckpt)

    rows = []
    for model_name, sp, li in ABLATION_ROWS:
        if model_name == "vanilla":
            ckpt = tts_ckpt
        else:
            ckpt = out / f"lslm_{sp}_{li}.ckpt"
            if not ckpt.exists() and not skip_train:
                mode_cfg = TrainConfig(
                    **{
                        **train_cfg.to_dict(),
                        "speaking_init": sp,
                        "listening_init": li,
                        "speaking_checkpoint": (
                            str(tts_ckpt) if sp != "scratch" else None
                        ),
                        "listening_checkpoint": (
                            str(enc_ckpt) if li != "scratch" else None
                        ),
                    }
                )
                train_lslm(mode_cfg, model_cfg, world, train, val, ckpt)
        row = {"model": model_name, "speaking": sp, "listening": li}
        if not ckpt.exists():
            row["absent"] = True
            rows.append(row)
            continue
        model = DuplexModel.load(ckpt)
        tts_rep = run_tts_eval(
            model, tts_test, world.codebook, sampler, vanilla=(model_name == "vanilla")
        )
        row["transcript_error_rate"] = tts_rep.transcript_error_rate
        row["token_error_rate"] = tts_rep.token_error_rate
        if model_name != "vanilla":
            inter = run_interactive_eval(
                model, interactive, sampler, window=world.config.detection_window
            )
            row["precision"] = inter["precision"]
            row["recall"] = inter["recall"]
            row["f1"] = inter["f1"]
        rows.append(row)
    report = ablation_report(rows)
    write_json(out / "ablation.json", report)
    (out / "ablation.txt").write_text(report["text"] + "\n")
    return report


@cli.command("ablation")
@_train_options
@click.option("--condition", type=click.Choice(["clean", "noise"]), default="clean")
@click.option("--greedy", is_flag=True, default=False)
@click.option("--skip-train", is_flag=True, default=False)
@click.pass_context
def ablation_cmd(ctx, config_path, data, out, condition, greedy, skip_train, **kw):
    """Run the training-mode matrix and emit the comparison table."""
    model_cfg, train_cfg = _resolve_train(ctx, config_path)
    report = run_ablation(
        model_cfg, train_cfg, data, out,
        seed=ctx.params["seed"], greedy=greedy, condition=condition,
        skip_train=skip_train,
    )
    _write_manifest(
        Path(out) / "run_manifest.json", "ablation",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
         "data": data, "condition": condition},
    )
    click.echo(report["text"])


@cli.command("trace-irq")
@click.option("--config", "config_path", default=None, type=str)
@click.option("--checkpoint", default=None, type=str)
@click.option("--data", required=True, type=str)
@click.option("--condition", type=click.Choice(["clean", "noise"]), default="clean")
@click.option("--seed", type=int, default=0)
@click.option("--greedy", is_flag=True, default=False)
@click.option("--out", required=True, type=str)
def trace_irq_cmd(config_path, checkpoint, data, condition, seed, greedy, out):
    """Export per-step IRQ probability traces for interrupted items."""
    _load_config_file(config_path)
    checkpoint = _require_checkpoint(checkpoint)
    model = DuplexModel.load(checkpoint)
    world = _world_from_data(data)
    testset = [
        r for r in read_split(data, f"test_{condition}") if r.interrupted
    ]
    result = run_interactive_eval(
        model, testset, _sampler(seed, greedy), window=world.config.detection_window
    )
    stats = irq_trace_stats(result["traces"], window=world.config.detection_window)
    write_json(out, {"traces": result["traces"], "stats": stats.to_dict()})
    _write_manifest(
        Path(out).with_suffix(".manifest.json"), "trace-irq",
        {"checkpoint": checkpoint, "data": data, "condition": condition,
         "seed": seed},
    )
    click.echo(
        f"{stats.n_items} traces, {100 * stats.frac_ratio_ge_10:.1f}% "
        f"with rise ratio >= 10"
    )


@cli.command("serve")
@click.option("--config", "config_path", default=None, type=str)
@click.option("--checkpoint", default=None, type=str)
@click.option("--data", default=None, type=str)
@click.option("--host", default="127.0.0.1", type=str)
@click.option("--port", type=int, default=8707)
@click.option("--transport", type=click.Choice(["ws", "tcp"]), default="ws")
def serve_cmd(config_path, checkpoint, data, host, port, transport):
    """Serve live duplex sessions over WebSocket or TCP."""
    _load_config_file(config_path)
    checkpoint = _require_checkpoint(checkpoint)
    from .server import build_app, serve_tcp

    model = DuplexModel.load(checkpoint)
    world = _world_from_data(data) if data else World(WorldConfig())
    if transport == "tcp":
        import asyncio

        click.echo(f"serving tcp on {host}:{port}")
        asyncio.run(serve_tcp(model, world, host, port))
    else:
        import uvicorn

        app = build_app(model, world)
        click.echo(f"serving ws on {host}:{port}")
        uvicorn.run(app, host=host, port=port, log_level="warning")


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        click.echo("run with --help for usage", err=True)
        return 1
    except (ConfigError, WorldError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    except Exception as e:  # runtime failure
        click.echo(f"error: {e}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
