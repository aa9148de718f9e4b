"""Flat key=value run configuration: model axes, schedule preset + overrides."""

from dataclasses import dataclass, fields, replace

from .errors import InvalidArgument
from .model import ModelConfig, config_from_dict, config_to_dict
from .optim import PRESETS, TrainSchedule

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_SCHED_KEYS = {f.name for f in fields(TrainSchedule)}
_FLOAT_SCHED = {"base_lr", "plateau_factor"}


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: TrainSchedule
    preset: str = "toy"
    seed: int = 0
    margin: float = 1.0
    duplicate_floor: float = 0.0
    hflip: bool = True
    rot90: bool = True
    normalization: str = "per_patch"
    train_path: str = ""
    val_path: str = ""


def _parse_bool(key, val):
    low = val.strip().lower()
    if low in ("true", "1", "on", "yes"):
        return True
    if low in ("false", "0", "off", "no"):
        return False
    raise InvalidArgument(f"config key {key}: expected a boolean, got {val!r}")


def parse_runconfig(text):
    """Parse key=value lines; '#' starts a comment; unknown keys are fatal."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise InvalidArgument(f"config key {key!r} given twice")
        pairs[key] = val

    preset = pairs.pop("preset", "toy")
    if preset not in PRESETS:
        raise InvalidArgument(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
    sched = PRESETS[preset]

    model_kv = {}
    run_kwargs = {}
    for key, val in pairs.items():
        if key in _MODEL_KEYS:
            model_kv[key] = val
        elif key in _SCHED_KEYS:
            cast = float if key in _FLOAT_SCHED else int
            sched = replace(sched, **{key: cast(val)})
        elif key == "seed":
            run_kwargs["seed"] = int(val)
        elif key in ("margin", "duplicate_floor"):
            run_kwargs[key] = float(val)
        elif key in ("hflip", "rot90"):
            run_kwargs[key] = _parse_bool(key, val)
        elif key == "normalization":
            if val not in ("per_patch", "dataset"):
                raise InvalidArgument("normalization must be per_patch or dataset")
            run_kwargs[key] = val
        elif key in ("train_path", "val_path"):
            run_kwargs[key] = val
        else:
            raise InvalidArgument(f"unknown config key {key!r}")

    model = config_from_dict(model_kv)
    model.validate()
    return RunConfig(model=model, schedule=sched, preset=preset, **run_kwargs)


def load_runconfig(path):
    with open(path) as fh:
        return parse_runconfig(fh.read())


def checkpoint_config(run):
    """The key=value block stored inside checkpoints: model + normalization."""
    d = config_to_dict(run.model)
    d["normalization"] = run.normalization
    return d


def model_config_from_checkpoint(config_dict):
    d = dict(config_dict)
    normalization = d.pop("normalization", "per_patch")
    cfg = config_from_dict(d)
    cfg.validate()
    return cfg, normalization
