"""
Run configuration for forenvit.

Defaults for every module live in DEFAULTS; an INI file (``key = value``
lines under ``[section]`` headers) overrides them, and command-line flags
override the file. ``snapshot`` writes the fully resolved result next to a
run's outputs so the run can be repeated.
"""

import configparser
import copy
import logging
from pathlib import Path

from backbone import ViTConfig
from data import CorpusSpec
from errors import ConfigurationError, ForenvitIOError
from heads import AdaptorSpec, FineTunePlan, FusionSpec
from probes import ProbeConfig
from trainer import PretrainConfig, TrainConfig

logger = logging.getLogger(__name__)

DEFAULTS = {
    "run": {
        "seed": 0,
        "out": "runs",
        "checkpoint": "",
    },
    "data": {
        "manifest": "corpus/manifest.tsv",
        "image_size": 28,
        "train_real": 1000,
        "train_fake": 1000,
        "val_real": 200,
        "val_fake": 200,
        "test_real": 200,
        "test_fake": 200,
        "val_unseen_real": 100,
        "val_unseen_fake": 100,
        "test_unseen_real": 100,
        "test_unseen_fake": 100,
    },
    "model": {
        "patch_size": 7,
        "depth": 8,
        "width": 64,
        "heads": 4,
        "registers": 4,
        "mlp_ratio": 4.0,
        "dropout": 0.0,
        "channels": 1,
        "backbone": "",
    },
    "train": {
        "approach": 2,
        "epochs": 3,
        "batch_size": 32,
        "eval_every": 50,
        "learning_rate": 3e-4,
        "weight_decay": 0.01,
        "optimizer": "adamw",
    },
    "fusion": {
        "k": 4,
        "mode": "concat",
        "scope": "cls_only",
        "include_registers": False,
        "max_concat_dim": 4096,
        "adaptor": "linear",
        "adaptor_dim": 0,
        "dropout": 0.1,
    },
    "finetune": {
        "k": 2,
        "tune_tokens": True,
        "head": "linear",
        "hidden_dim": 0,
    },
    "pretrain": {
        "recipe": "masked",
        "mask_ratio": 0.75,
        "epochs": 5,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "weight_decay": 0.05,
        "decoder_depth": 2,
        "num_classes": 4,
        "class_images": 2000,
    },
    "probe": {
        "kind": "all",
        "k_neighbors": 5,
        "n_components": 32,
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 1e-2,
        "hidden_dim": 0,
    },
    "eval": {
        "split": "test",
        "threshold": 0.5,
        "fixed_threshold": False,
        "calibrate_on": "",
        "calibrate_split": "val",
    },
    "ablate": {
        "k_list": "1,2,4,8",
    },
    "explain": {
        "alpha": 0.5,
        "scale": 4,
        "normalization": "raw",
        "direction": "query",
        "order": "average_first",
        "compare": "",
        "images": "",
    },
}


def _coerce(section, key, value, default):
    name = f"{section}.{key}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        state = configparser.ConfigParser.BOOLEAN_STATES.get(str(value).strip().lower())
        if state is None:
            raise ConfigurationError(f"{name} expects a boolean, got '{value}'")
        return state
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{name} expects {type(default).__name__}, got '{value}'"
        ) from None
    return str(value)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str) and "\n" in value:
        return "\n    ".join(value.split("\n"))
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Resolved settings, section -> key -> typed value."""

    def __init__(self, values=None):
        self.values = values if values is not None else copy.deepcopy(DEFAULTS)

    @classmethod
    def load(cls, path=None):
        config = cls()
        if path is None:
            return config
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with path.open(encoding="utf-8") as handle:
                parser.read_file(handle)
        except OSError as e:
            raise ForenvitIOError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigurationError(f"malformed config {path}: {e}") from e
        for section in parser.sections():
            for key, value in parser.items(section, raw=True):
                config.set(section, key, value)
        logger.info("loaded configuration from %s", path)
        return config

    def _default(self, section, key):
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigurationError(f"unknown configuration key '{section}.{key}'")
        return DEFAULTS[section][key]

    def set(self, section, key, value):
        self.values[section][key] = _coerce(section, key, value, self._default(section, key))

    def override(self, section, key, value):
        """Flag override; None means the flag was not given."""
        if value is not None:
            self.set(section, key, value)
        return self

    def get(self, section, key):
        self._default(section, key)
        return self.values[section][key]

    def section(self, name):
        if name not in DEFAULTS:
            raise ConfigurationError(f"unknown configuration section '{name}'")
        return dict(self.values[name])

    def to_text(self):
        lines = []
        for section in sorted(self.values):
            if lines:
                lines.append("")
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_format(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def snapshot(self, path):
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_text(), encoding="utf-8")
        except OSError as e:
            raise ForenvitIOError(f"cannot write config snapshot {path}: {e}") from e
        return path

    # Builders for the module-level dataclasses

    @property
    def seed(self):
        return self.get("run", "seed")

    def vit_config(self):
        m = self.values["model"]
        return ViTConfig(
            image_size=self.get("data", "image_size"),
            patch_size=m["patch_size"],
            depth=m["depth"],
            width=m["width"],
            heads=m["heads"],
            registers=m["registers"],
            mlp_ratio=m["mlp_ratio"],
            dropout_rate=m["dropout"],
            channels=m["channels"],
        )

    def corpus_spec(self):
        d = self.values["data"]
        counts = {key: value for key, value in d.items() if key.endswith(("_real", "_fake"))}
        return CorpusSpec(image_size=d["image_size"], seed=self.seed, **counts)

    def train_config(self):
        t, f, ft = self.values["train"], self.values["fusion"], self.values["finetune"]
        return TrainConfig(
            approach=t["approach"],
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            eval_every=t["eval_every"],
            seed=self.seed,
            learning_rate=t["learning_rate"],
            weight_decay=t["weight_decay"],
            optimizer=t["optimizer"],
            fusion=FusionSpec(f["k"], f["mode"], f["scope"], f["include_registers"], f["max_concat_dim"]),
            adaptor=AdaptorSpec(f["adaptor"], f["adaptor_dim"], f["dropout"]),
            plan=FineTunePlan(
                ft["k"] if t["approach"] == 2 else f["k"],
                ft["tune_tokens"],
                ft["head"],
                ft["hidden_dim"],
            ),
        )

    def pretrain_config(self):
        p = self.values["pretrain"]
        values = {key: value for key, value in p.items() if key != "class_images"}
        return PretrainConfig(seed=self.seed, **values)

    def probe_config(self):
        p = self.values["probe"]
        return ProbeConfig(
            k_neighbors=p["k_neighbors"],
            n_components=p["n_components"],
            epochs=p["epochs"],
            batch_size=p["batch_size"],
            learning_rate=p["learning_rate"],
            hidden_dim=p["hidden_dim"],
        )

    def k_list(self):
        text = self.get("ablate", "k_list")
        try:
            values = [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise ConfigurationError(f"ablate.k_list expects comma-separated integers, got '{text}'") from None
        if not values:
            raise ConfigurationError("ablate.k_list is empty")
        return values

    def set_list(self, section, key, items):
        if items:
            self.set(section, key, "\n".join(str(item) for item in items))
        return self

    def get_list(self, section, key):
        return [line.strip() for line in self.get(section, key).split("\n") if line.strip()]

    def require(self, section, key, flag):
        value = self.get(section, key)
        if not value:
            raise ConfigurationError(f"{flag} is required (or set {section}.{key} in the config)")
        return value
