"""Run configuration: flat key=value sections with strict schema validation.

Every field has a default; unknown sections or keys are rejected so typos
fail loudly. A run archives its full effective config before doing anything,
which together with the seed makes every command reproducible.
"""

from __future__ import annotations

import configparser
import io

_SCHEMA: dict[str, dict[str, object]] = {
    "run": {
        "task": "pattern",  # pattern | autoencode | simulate
        "seed": 0,
        "out": "runs/latest",
        "threads": 1,
    },
    "model": {
        "coord_dim": 2,
        "hidden_dim": 16,
        "message_dim": 32,
        "normalization": "pairnorm",  # pairnorm | nodenorm | off
    },
    "optim": {
        "lr": -1.0,  # negative: per-task default (5e-4 pattern/autoencode, 1e-3 simulate)
        "weight_decay": 1e-5,
        "clip_norm": 1.0,
        "lr_floor": 1e-5,
        "plateau_factor": 0.75,
    },
    "pattern": {
        "target": "grid",  # grid | torus | points
        "rows": 8,
        "cols": 8,
        "spacing": 1.0,
        "torus_major": 2.0,
        "torus_minor": 1.0,
        "points_path": "",
        "knn_k": 6,
        "pool_size": 256,
        "sigma": 0.5,
        "t_min": 15,
        "t_max": 25,
        "batch_min": 4,
        "batch_max": 32,
        "max_steps": 2000,
        "plateau_patience": 500,
        "val_every": 100,
        "val_states": 4,
        "val_t": 25,
        "damage_magnitude": 0.0,  # 0: derived from the target's spread
        "damage_radius": 0.0,  # 0: derived from the target's diameter
        "checkpoint_every": 0,  # steps; 0 disables periodic checkpoints
    },
    "autoencode": {
        "dataset": "comm-s",  # comm-s | planar-s | planar-l | sbm | edge-list dir
        "data_path": "",
        "n_graphs": 100,
        "nodes_lo": 12,
        "nodes_hi": 20,
        "data_seed": 0,
        "pool_size": 8,
        "sigma": 1.0,
        "t_min": 25,
        "t_max": 35,
        "max_replacements": 10,
        "batch_graphs": 32,
        "max_epochs": 400,
        "early_stop_patience": 20,
        "plateau_patience": 5,
        "neg_ratio": 1.0,
        "delta1_init": 4.0,
        "delta2_init": 0.5,
        "t_eval": 100,
        "val_t": 30,
        "checkpoint_every": 0,  # epochs
    },
    "simulate": {
        "system": "boids",  # boids | nbody
        "data_path": "",
        "n_traj": 50,
        "traj_len": 500,
        "n_boids": 100,
        "data_seed": 0,
        "radius": 3.0,
        "half_side": 10.0,
        "separation_dist": 1.0,
        "cohesion": 0.005,
        "alignment": 0.3,
        "separation": 0.05,
        "wall": 0.3,
        "wall_margin": 2.0,
        "max_speed": 1.0,
        "dt": 1.0,
        "n_bodies": 5,
        "nbody_dt": 0.01,
        "softening": 0.5,
        "sub_len": 20,
        "batch_size": 16,
        "max_epochs": 60,
        "batches_per_epoch": 25,
        "early_stop_patience": 20,
        "plateau_patience": 5,
        "eval_rollout": 500,
        "eval_traj": 4,
        "checkpoint_every": 0,  # epochs
    },
}

_TASKS = ("pattern", "autoencode", "simulate")


class ConfigError(ValueError):
    """Malformed config file, unknown key, or invalid value."""


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


class RunConfig:
    """Validated configuration; every schema field is always present."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.sections: dict[str, dict] = {
            sec: dict(fields) for sec, fields in _SCHEMA.items()
        }
        if values:
            for sec, fields in values.items():
                if sec not in self.sections:
                    raise ConfigError(f"unknown config section [{sec}]")
                for key, val in fields.items():
                    if key not in self.sections[sec]:
                        raise ConfigError(f"unknown config key [{sec}] {key}")
                    self.sections[sec][key] = val
        self.validate()

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in self.sections or key not in self.sections[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.sections[section][key] = value

    def validate(self) -> None:
        if self["run"]["task"] not in _TASKS:
            raise ConfigError(f"run.task must be one of {_TASKS}")
        if self["model"]["normalization"] not in ("pairnorm", "nodenorm", "off"):
            raise ConfigError("model.normalization must be pairnorm|nodenorm|off")
        if self["run"]["threads"] < 1:
            raise ConfigError("run.threads must be >= 1")

    @property
    def task(self) -> str:
        return self["run"]["task"]

    @property
    def seed(self) -> int:
        return self["run"]["seed"]

    def lr(self) -> float:
        lr = self["optim"]["lr"]
        if lr > 0:
            return lr
        return 1e-3 if self.task == "simulate" else 5e-4

    def to_text(self) -> str:
        out = io.StringIO()
        for sec in _SCHEMA:
            out.write(f"[{sec}]\n")
            for key in _SCHEMA[sec]:
                out.write(f"{key} = {self.sections[sec][key]}\n")
            out.write("\n")
        return out.getvalue()

    def to_dict(self) -> dict:
        return {sec: dict(fields) for sec, fields in self.sections.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(data)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        values: dict[str, dict] = {}
        for sec in parser.sections():
            if sec not in _SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            values[sec] = {}
            for key, raw in parser.items(sec):
                if key not in _SCHEMA[sec]:
                    raise ConfigError(f"unknown config key [{sec}] {key}")
                values[sec][key] = _parse_value(raw, _SCHEMA[sec][key])
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())
