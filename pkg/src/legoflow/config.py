"""Sectioned key=value experiment configuration.

Every key has a typed schema entry and a default; unknown sections or keys
are hard errors so a typo cannot silently change an experiment. The
canonical rendering (defaults applied, fixed order) is what gets embedded
in checkpoints and must survive a save/load round trip byte-identically.
"""

from __future__ import annotations

import configparser
import io
from typing import Dict, List

from .engine import SIMTConfig
from .tasks import TaskSpec, make_conflict_suite, make_shape_suite


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# (type, default) per key; section and key order here is the canonical order
SCHEMA = {
    "suite": {
        "kind": (str, "conflict"),
        "seed": (int, -1),
        "num_groups": (int, 2),
        "tasks_per_group": (int, 2),
        "input_dim": (int, 16),
        "target_dim": (int, 8),
        "noise_scale": (float, 0.05),
        "offset_scale": (float, 0.5),
        "row_scale": (float, 2.0),
        "batch_size": (int, 16),
    },
    "model": {
        "layers": (int, 4),
        "units": (int, 2),
        "dim": (int, 32),
    },
    "simt": {
        "workers": (int, 4),
        "total_steps": (int, 3000),
        "mode": (str, "simt"),
        "sync_bn": (_bool, True),
        "routing": (str, "soft"),
        "execution": (str, "parallel"),
        "seed": (int, 0),
        "checkpoint_every": (int, 0),
    },
    "schedules": {
        "base_lr": (float, 0.05),
        "warmup_steps": (int, 100),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "tau_start": (float, 5.0),
        "tau_end": (float, 0.01),
        "tau_decay_end_fraction": (float, 0.9),
    },
    "finetune": {
        "steps": (int, 500),
        "base_lr": (float, 0.02),
        "warmup_steps": (int, 0),
        "group": (int, 0),
        "task_seed": (int, 0),
        "task_name": (str, "transfer"),
    },
}

_CHOICES = {
    ("suite", "kind"): ("conflict", "shape"),
    ("simt", "mode"): ("simt", "per_batch"),
    ("simt", "routing"): ("soft", "hard"),
    ("simt", "execution"): ("parallel", "sequential"),
}


def default_config() -> Dict[str, dict]:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _validate_choices(cfg: Dict[str, dict]) -> None:
    for (sec, key), allowed in _CHOICES.items():
        if cfg[sec][key] not in allowed:
            raise ConfigError(
                f"[{sec}] {key} must be one of {allowed}, got {cfg[sec][key]!r}")


def parse_config(text: str) -> Dict[str, dict]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            caster = SCHEMA[section][key][0]
            try:
                cfg[section][key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for [{section}] {key}: {raw!r}") from exc
    _validate_choices(cfg)
    return cfg


def load_config(path: str) -> Dict[str, dict]:
    with open(path) as fh:
        return parse_config(fh.read())


def canonical_text(cfg: Dict[str, dict]) -> str:
    """Fixed-order rendering of the effective config."""
    out = io.StringIO()
    for si, (section, keys) in enumerate(SCHEMA.items()):
        if si:
            out.write("\n")
        out.write(f"[{section}]\n")
        for key in keys:
            value = cfg[section][key]
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            else:
                rendered = repr(value) if isinstance(value, float) else str(value)
            out.write(f"{key} = {rendered}\n")
    return out.getvalue()


def apply_overrides(cfg: Dict[str, dict], *, seed=None, workers=None, steps=None,
                    mode=None, sync_bn=None, routing=None) -> Dict[str, dict]:
    if seed is not None:
        cfg["simt"]["seed"] = int(seed)
    if workers is not None:
        cfg["simt"]["workers"] = int(workers)
    if steps is not None:
        cfg["simt"]["total_steps"] = int(steps)
    if mode is not None:
        cfg["simt"]["mode"] = mode
    if sync_bn is not None:
        cfg["simt"]["sync_bn"] = bool(sync_bn)
    if routing is not None:
        cfg["simt"]["routing"] = routing
    _validate_choices(cfg)
    return cfg


def suite_seed(cfg: Dict[str, dict]) -> int:
    s = cfg["suite"]["seed"]
    return cfg["simt"]["seed"] if s < 0 else s


def build_suite(cfg: Dict[str, dict]) -> List[TaskSpec]:
    suite = cfg["suite"]
    seed = suite_seed(cfg)
    if suite["kind"] == "conflict":
        return make_conflict_suite(
            num_groups=suite["num_groups"],
            tasks_per_group=suite["tasks_per_group"],
            seed=seed,
            input_dim=suite["input_dim"],
            target_dim=suite["target_dim"],
            noise_scale=suite["noise_scale"],
            offset_scale=suite["offset_scale"],
            row_scale=suite["row_scale"],
            batch_size=suite["batch_size"],
        )
    return make_shape_suite(seed=seed, offset_scale=suite["offset_scale"])


def build_simt_config(cfg: Dict[str, dict]) -> SIMTConfig:
    simt = cfg["simt"]
    sched = cfg["schedules"]
    return SIMTConfig(
        num_workers=simt["workers"],
        total_steps=simt["total_steps"],
        warmup_steps=sched["warmup_steps"],
        base_lr=sched["base_lr"],
        momentum=sched["momentum"],
        weight_decay=sched["weight_decay"],
        tau_start=sched["tau_start"],
        tau_end=sched["tau_end"],
        tau_decay_end_fraction=sched["tau_decay_end_fraction"],
        sampling_mode=simt["mode"],
        sync_bn=simt["sync_bn"],
        routing=simt["routing"],
        execution=simt["execution"],
        seed=simt["seed"],
    )
