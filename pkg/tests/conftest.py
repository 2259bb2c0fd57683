"""Shared acceptance-suite plumbing: trained artifacts are expensive, so
they are built once into .acceptance_cache/ at the repo root and reused
across runs. Delete the directory to force a rebuild.
"""

from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance_cache"

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str):
    ACCEPTANCE_LINES.append(
        f"{criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


# -- cached artifact builders -------------------------------------------------

DESK_MODEL = dict(
    n_blocks=4, n_heads=4, d_model=128, d_ff=512, max_seq_len=256,
    fusion="middle", seed=0,
)
DESK_TRAIN = dict(
    lr_max=5e-4, warmup_steps=500, batch_size=32, epochs=16, seed=0,
)


def command_data() -> Path:
    from duplexlm.world import WorldConfig, write_dataset

    out = CACHE / "data_command"
    if not (out / "manifest.json").exists():
        write_dataset(out, WorldConfig(scenario="command", master_seed=0))
    return out


def voice_data() -> Path:
    from duplexlm.world import WorldConfig, write_dataset

    out = CACHE / "data_voice"
    if not (out / "manifest.json").exists():
        write_dataset(out, WorldConfig(scenario="voice", master_seed=0))
    return out


def _train_common(data_dir: Path):
    from duplexlm.cli import _world_from_data
    from duplexlm.world import read_split

    world = _world_from_data(data_dir)
    return world, read_split(data_dir, "train"), read_split(data_dir, "val")


def vanilla_ckpt() -> Path:
    from duplexlm.model import ModelConfig
    from duplexlm.train import TrainConfig, pretrain_tts

    path = CACHE / "vanilla.ckpt"
    if not path.exists():
        world, train, val = _train_common(command_data())
        pretrain_tts(
            TrainConfig(**DESK_TRAIN),
            ModelConfig(**DESK_MODEL),
            world,
            train,
            val,
            path,
        )
    return path


def lslm_command_ckpt() -> Path:
    from duplexlm.model import ModelConfig
    from duplexlm.train import TrainConfig, train_lslm

    path = CACHE / "lslm_command.ckpt"
    if not path.exists():
        world, train, val = _train_common(command_data())
        train_lslm(
            TrainConfig(**DESK_TRAIN),
            ModelConfig(**DESK_MODEL),
            world,
            train,
            val,
            path,
            log_path=path.with_suffix(".log.jsonl"),
        )
    return path


def lslm_voice_ckpt() -> Path:
    from duplexlm.model import ModelConfig
    from duplexlm.train import TrainConfig, train_lslm

    path = CACHE / "lslm_voice.ckpt"
    if not path.exists():
        world, train, val = _train_common(voice_data())
        train_lslm(
            TrainConfig(**DESK_TRAIN),
            ModelConfig(**DESK_MODEL),
            world,
            train,
            val,
            path,
            log_path=path.with_suffix(".log.jsonl"),
        )
    return path


def build_all():
    command_data()
    voice_data()
    vanilla_ckpt()
    lslm_command_ckpt()
    lslm_voice_ckpt()
