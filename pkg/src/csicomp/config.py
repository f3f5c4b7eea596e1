"""Run configuration: key=value files, named presets, CLI overrides, manifests.

Precedence (lowest to highest): schema defaults, named preset, config file,
``--set section.key=value`` flags.  Unknown sections or keys are rejected.
Every resolved value is echoed into the run manifest together with input
file hashes, so equal manifests imply equal outputs.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path


class UsageError(ValueError):
    """Bad configuration keys, values, or command-line arguments."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.replace(",", " ").split())


# key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "profile": (str, "indoor-like"),
        "samples": (int, 960),
        "seed": (int, 1),
        "nc": (int, 32),
        "nt": (int, 32),
        "nc_tilde": (int, 64),
    },
    "model": {
        "embed_dim": (int, 64),
        "window": (int, 8),
        "heads": (int, 4),
        "latent_len": (int, 512),
        "stb_count": (int, 2),
        "cr_count": (int, 2),
    },
    "quantizer": {
        "bits": (int, 8),
        "mu": (float, 255.0),
    },
    "train": {
        "lr": (float, 0.001),
        "batch": (int, 200),
        "epochs": (int, 1000),
        "lambda": (float, 1e-3),
        "seed": (int, 0),
        "target_nmse_db": (float, float("nan")),  # nan = no early stop
    },
    "sweep": {
        "snrs_db": (_parse_float_list, (0.0, 5.0, 10.0, 15.0, 20.0)),
        "bits_list": (_parse_int_list, (2, 4, 6, 8)),
        "seed": (int, 7),
    },
}

# named immutable presets; desk scale runs in minutes on one CPU core
PRESETS: dict[str, dict[str, str]] = {
    "paper": {},
    "desk": {
        "data.samples": "960",
        "model.embed_dim": "16",
        "model.stb_count": "1",
        "model.cr_count": "1",
        "train.batch": "16",
        "train.epochs": "40",
        "train.lr": "0.002",
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    sources: dict[str, str] = field(default_factory=dict)
    input_hashes: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def set_input_hash(self, label: str, path) -> None:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.input_hashes[label] = digest

    def manifest(self) -> str:
        lines = ["[manifest]"]
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                val = self.values[section][key]
                if isinstance(val, tuple):
                    val = " ".join(str(v) for v in val)
                lines.append(f"{section}.{key} = {val}")
        for label in sorted(self.input_hashes):
            lines.append(f"input.{label} = sha256:{self.input_hashes[label]}")
        return "\n".join(lines) + "\n"


def _defaults() -> dict[str, dict[str, object]]:
    return {section: {key: spec[1] for key, spec in keys.items()}
            for section, keys in SCHEMA.items()}


def _apply(values: dict, dotted: str, text: str, source: str) -> None:
    if "." not in dotted:
        raise UsageError(f"expected section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA:
        raise UsageError(f"unknown config section {section!r}")
    if key not in SCHEMA[section]:
        raise UsageError(f"unknown key {key!r} in section [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        values[section][key] = parser(text)
    except UsageError:
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {dotted}: {text!r} ({exc})") from None


def load_config(preset: str | None = None, config_file=None,
                overrides: list[str] | None = None) -> RunConfig:
    """Resolve the full configuration from preset, file, and flag overrides."""
    values = _defaults()
    cfg = RunConfig(values=values)
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r} (have: "
                             f"{', '.join(sorted(PRESETS))})")
        for dotted, text in PRESETS[preset].items():
            _apply(values, dotted, text, f"preset:{preset}")
        cfg.sources["preset"] = preset
    if config_file is not None:
        parser = configparser.ConfigParser()
        text = Path(config_file).read_text()
        parser.read_string(text)
        for section in parser.sections():
            if section not in SCHEMA:
                raise UsageError(f"unknown config section [{section}] "
                                 f"in {config_file}")
            for key, val in parser.items(section):
                _apply(values, f"{section}.{key}", val, f"file:{config_file}")
        cfg.set_input_hash("config_file", config_file)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        dotted, text = item.split("=", 1)
        _apply(values, dotted.strip(), text.strip(), "flag")
    return cfg


def model_config(cfg: RunConfig):
    from .model import ModelConfig

    return ModelConfig(
        nc=cfg["data.nc"], nt=cfg["data.nt"],
        embed_dim=cfg["model.embed_dim"], window=cfg["model.window"],
        heads=cfg["model.heads"], latent_len=cfg["model.latent_len"],
        stb_count=cfg["model.stb_count"], cr_count=cfg["model.cr_count"],
    )


def train_config(cfg: RunConfig):
    import math

    from .training import TrainConfig

    target = cfg["train.target_nmse_db"]
    return TrainConfig(
        lr=cfg["train.lr"], batch=cfg["train.batch"], epochs=cfg["train.epochs"],
        lam=cfg["train.lambda"], bits=cfg["quantizer.bits"],
        mu=cfg["quantizer.mu"], seed=cfg["train.seed"],
        target_nmse_db=None if math.isnan(target) else target,
    )
