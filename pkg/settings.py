"""
Configuration management for bliss.
Handles loading, saving, and validating run settings.
"""
import logging
from pathlib import Path

import utils
from augmentor import AUGMENT_PRESETS, MODES
from data import TASKS
from model import MODEL_PRESETS
from utils import ConfigError


class Settings:
    """Manages run settings with validation, presets and persistence."""

    # Every knob of every subcommand; dotted keys namespace the modules
    DEFAULT_SETTINGS = {
        "seed": 1,
        "threads": 1,

        "corpus.task": "copy",
        "corpus.vocab_size": 50,
        "corpus.min_len": 4,
        "corpus.max_len": 12,
        "corpus.samples": 2000,
        "corpus.test_samples": 200,

        "augment.preset": "",
        "augment.mode": "bliss",
        "augment.gamma": 0.3,
        "augment.alpha_shu": 0.1,
        "augment.alpha_rep": 0.1,
        "augment.p": 0.2,
        "augment.window": 3,

        "model.preset": "desk",
        "model.d_model": 64,
        "model.n_layers": 2,
        "model.n_heads": 2,
        "model.d_ffn": 128,
        "model.max_positions": 400,
        "model.dropout": 0.1,
        "model.label_smoothing": 0.1,
        "model.lambda_token": 0.005,
        "model.lambda_pos": 0.005,

        "train.max_steps": 2000,
        "train.batch_size": 32,
        "train.warmup": 400,
        "train.lr_factor": 1.0,
        "train.beta1": 0.9,
        "train.beta2": 0.98,
        "train.adam_eps": 1e-9,
        "train.clip_norm": 1.0,
        "train.log_every": 50,
        "train.checkpoint_every": 500,
        "train.no_aug": False,
        "train.no_smooth": False,
        "train.no_token": False,
        "train.no_pos": False,
        "train.token_on_replaced_only": False,
        "train.clean_nll": False,

        "beam.size": 4,
        "beam.length_penalty": 1.0,
        "beam.max_len": 64,

        "noise.kind": "replace",
        "noise.ratios": "0,0.02,0.04,0.08,0.16",

        "probe.task": "bshift",
        "probe.hidden": 256,
        "probe.lr": 0.001,
        "probe.epochs": 10,
        "probe.batch_size": 32,
        "probe.valid_fraction": 0.2,

        "experiment.seeds": 3,
        "experiment.variants": "vanilla,full,-aug-smooth,-smooth,-token,-pos",
        "experiment.sweep_params": "gamma,alpha_shu,alpha_rep",
    }

    # Setting constraints
    CONSTRAINTS = {
        "seed": {"min": 0},
        "threads": {"min": 1},
        "corpus.task": {"choices": TASKS},
        "corpus.vocab_size": {"min": 6},
        "corpus.min_len": {"min": 1},
        "corpus.max_len": {"min": 1},
        "corpus.samples": {"min": 0},
        "corpus.test_samples": {"min": 0},
        "augment.preset": {"choices": ("",) + tuple(AUGMENT_PRESETS)},
        "augment.mode": {"choices": MODES},
        "augment.gamma": {"min": 0.0, "max": 1.0},
        "augment.alpha_shu": {"min": 0.0, "max": 1.0},
        "augment.alpha_rep": {"min": 0.0, "max": 1.0},
        "augment.p": {"min": 1e-9, "max": 1.0 - 1e-9},
        "augment.window": {"min": 2},
        "model.preset": {"choices": tuple(MODEL_PRESETS)},
        "model.d_model": {"min": 1},
        "model.n_layers": {"min": 1},
        "model.n_heads": {"min": 1},
        "model.d_ffn": {"min": 1},
        "model.max_positions": {"min": 3},
        "model.dropout": {"min": 0.0, "max": 0.99},
        "model.label_smoothing": {"min": 0.0, "max": 1.0},
        "model.lambda_token": {"min": 0.0},
        "model.lambda_pos": {"min": 0.0},
        "train.max_steps": {"min": 0},
        "train.batch_size": {"min": 1},
        "train.warmup": {"min": 1},
        "train.lr_factor": {"min": 0.0},
        "train.clip_norm": {"min": 0.0},
        "train.log_every": {"min": 1},
        "train.checkpoint_every": {"min": 1},
        "beam.size": {"min": 1},
        "beam.length_penalty": {"min": 0.0},
        "beam.max_len": {"min": 1},
        "noise.kind": {"choices": ("replace", "shuffle-span", "all")},
        "probe.task": {"choices": ("bshift", "selen")},
        "probe.hidden": {"min": 1},
        "probe.epochs": {"min": 1},
        "probe.batch_size": {"min": 1},
        "probe.valid_fraction": {"min": 0.01, "max": 0.99},
        "experiment.seeds": {"min": 1},
    }

    # Values a preset fills in unless the key was set explicitly
    PRESETS = {
        "augment.preset": {
            name: {f"augment.{key}": value for key, value in values.items()}
            for name, values in AUGMENT_PRESETS.items()
        },
        "model.preset": {
            name: {f"model.{key}": value for key, value in values.items()}
            for name, values in MODEL_PRESETS.items()
        },
    }

    def __init__(self, config_path=None):
        """Initialize settings with an optional `key = value` config file."""
        self.logger = logging.getLogger(__name__)
        self.config_path = Path(config_path) if config_path is not None else None

        # Current settings dict
        self.settings = self.DEFAULT_SETTINGS.copy()
        self.explicit = set()

        if self.config_path is not None:
            self.load()

    def load(self, path=None):
        """Load settings from a config file; bad lines raise ConfigError naming the line."""
        path = Path(path) if path is not None else self.config_path
        utils.require_readable(path)
        with open(path, "r", encoding="utf-8") as f:
            for number, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw.strip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in self.settings:
                    raise ConfigError(f"{path}:{number}: unknown setting {key!r}")
                if not self.set(key, value):
                    raise ConfigError(f"{path}:{number}: invalid value {value!r} for {key}")
        self.apply_presets()
        self.logger.info(f"Settings loaded from {path}")

    def save(self, path):
        """Save the fully resolved settings as `key = value` lines."""
        return utils.atomic_write_text(path, self.dump())

    def dump(self):
        """Render every setting, defaults included."""
        return "".join(f"{key} = {self._format(value)}\n" for key, value in self.settings.items())

    def get(self, key, default=None):
        """Get a setting value with optional default."""
        return self.settings.get(key, default)

    def set(self, key, value):
        """Set a setting value with validation; strings are coerced to the default's type."""
        if key not in self.settings:
            self.logger.warning(f"Attempted to set unknown setting: {key}")
            return False

        try:
            value = self._coerce(key, value)
        except ValueError:
            self.logger.warning(f"Invalid value for setting {key}: {value}")
            return False

        if not self._validate_setting(key, value):
            self.logger.warning(f"Invalid value for setting {key}: {value}")
            return False

        self.settings[key] = value
        self.explicit.add(key)
        return True

    def update(self, overrides):
        """Apply several overrides (e.g. from CLI flags); raises ConfigError on the first bad one."""
        for key, value in overrides.items():
            if not self.set(key, value):
                raise ConfigError(f"invalid value {value!r} for {key}")
        self.apply_presets()

    def apply_presets(self):
        """Fill keys named by the selected presets unless they were set explicitly."""
        for preset_key, table in self.PRESETS.items():
            chosen = self.settings.get(preset_key)
            for key, value in table.get(chosen, {}).items():
                if key not in self.explicit:
                    self.settings[key] = value

    def copy(self):
        """Independent copy, e.g. for one ablation variant."""
        clone = Settings()
        clone.config_path = self.config_path
        clone.settings = dict(self.settings)
        clone.explicit = set(self.explicit)
        return clone

    def reset(self):
        """Reset all settings to defaults."""
        self.settings = self.DEFAULT_SETTINGS.copy()
        self.explicit = set()

    def get_list(self, key, cast=str):
        """Comma-separated setting as a list."""
        return [cast(item.strip()) for item in str(self.settings[key]).split(",") if item.strip()]

    def _coerce(self, key, value):
        default = self.DEFAULT_SETTINGS[key]
        if not isinstance(value, str):
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                return float(value)
            return value
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value

    def _validate_setting(self, key, value):
        """Validate setting against constraints."""
        if key not in self.settings:
            return False

        default = self.DEFAULT_SETTINGS[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                return False
        elif not isinstance(value, type(default)) or isinstance(value, bool):
            return False

        # Apply specific constraints if defined
        if key in self.CONSTRAINTS:
            constraints = self.CONSTRAINTS[key]

            if "choices" in constraints and value not in constraints["choices"]:
                return False

            # Check min/max for numeric values
            if isinstance(value, (int, float)):
                if "min" in constraints and value < constraints["min"]:
                    return False
                if "max" in constraints and value > constraints["max"]:
                    return False

        return True

    @staticmethod
    def _format(value):
        if isinstance(value, bool):
            return "true" if value else "false"
        return repr(value) if isinstance(value, float) else str(value)
