"""
The ConfigParser class handles the parsing of run configuration files
(YAML, TOML or JSON) from any location and merges them with the built-in defaults,
`--set` overrides and command-line flags.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import copy
import json
import os
import sys
import tomllib
try:
    import yaml
    PYYAML_PRESENT = True
except ImportError:
    PYYAML_PRESENT = False
from typing import Any, Dict, Iterable, Optional
from hybridode.utils.exceptions import ConfigurationError, MissingArtifactError
from hybridode.utils.logger import StructuredLogger


if not PYYAML_PRESENT:
    print("Error: The required library 'pyyaml' is not installed.")
    sys.exit(1)


logger = StructuredLogger()


def _train_defaults(**overrides: Any) -> Dict[str, Any]:
    config = {
        "batch_size": 64,
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
        "max_epochs": 100,
        "early_stop_patience": 12,
        "early_stop_tol": 0.0,
        "scheduler": {"kind": "none", "factor": 0.5, "patience": 5},
        "window_len": 20,
        "zero_start_min": 0.15,
        "nonzero_eta_min": 0.15,
        "validation_fraction": 0.1,
        "clip_norm": 10.0,
        "loss": "plain_mse",
        "batches_per_epoch": None,
    }
    config.update(overrides)
    return config


DEFAULT_CONFIG: Dict[str, Any] = {
    "service": {
        "log_level": "INFO",
    },
    "run": {
        "case": "pendulum",
        "model": "hybrid",
        "seed": 0,
        "threads": 1,
        "out": "runs",
        "force": False,
    },
    "data": {
        "path": None,
        "n": 5000,
        "n_test": 5000,
        "format": "csv",
        "source": "synthetic",
    },
    "pendulum": {
        "g": 9.81,
        "dt": 0.1,
        "t_max": 10.0,
        "mass": [3.5, 4.0],
        "length": [4.0, 4.5],
        "radius": [2.0, 2.5],
        "theta0": [-0.2, 0.2],
        "omega0": [-0.1, 0.1],
        "tau_base": 10.0,
        "tau_step": 0.5,
        "train_k": [0, 1, 2, 3, 4],
        "ood_k": [5, 6, 7],
        "encoder_window": 100,
        "beta_source": "encoder",
        "encoder_data": {
            "n": 2000,
            "mass": [3.0, 5.0],
            "l_cm": [1.5, 3.0],
            "zero_intervention": False,
            "validation_fraction": 0.2,
        },
        "counterfactual": {
            "t_max": 20.0,
            "t_switch": 10.0,
            "tau_before": 10.0,
            "tau_after": [6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
        },
    },
    "pk": {
        "dt": 0.5,
        "horizon": 210.0,
        "bolus_size": 30.0,
        "bolus_interval": 10.0,
        "age_split": 55.0,
        "young_grid": [1.5, 2.5, 0.1],
        "old_grid": [1.0, 1.5, 0.1],
        "cp_limit": 25.0,
        "target_intercept": 4.0,
        "target_slope": 0.04,
        "target_age_ref": 18.0,
        "require_target": False,
        "prior_table": "prior",
        "oracle_table": "oracle",
        "age_limit": 60.0,
        "bmi_limit": 30.0,
        "test_fraction": 0.25,
        "cohort": {
            "age": [18.0, 90.0],
            "bmi_mean": 27.0,
            "bmi_sd": 5.0,
            "bmi": [16.0, 50.0],
            "height_male": [176.0, 7.5],
            "height_female": [162.0, 7.0],
            "male_fraction": 0.5,
            "opioid_rate": 0.3,
            "csv_path": None,
        },
    },
    "encoder": _train_defaults(
        batch_size=256,
        learning_rate=1e-3,
        weight_decay=1e-5,
        max_epochs=200,
        early_stop_patience=25,
        early_stop_tol=1e-4,
        scheduler={"kind": "plateau", "factor": 0.5, "patience": 5},
        window_len=None,
        zero_start_min=0.0,
        nonzero_eta_min=0.0,
        validation_fraction=0.2,
        clip_norm=None,
    ),
    "training": {
        "pendulum": {
            "hybrid": _train_defaults(learning_rate=2e-4),
            "data-driven": _train_defaults(learning_rate=1e-3),
        },
        "pk": {
            "hybrid": _train_defaults(batch_size=32, early_stop_patience=None, window_len=80, loss="relative_mse"),
            "data-driven": _train_defaults(batch_size=32, early_stop_patience=None, window_len=80, loss="relative_mse"),
        },
    },
    "model": {
        "pendulum": {
            "hybrid": {"hidden_dim": 64, "num_blocks": 4, "gain": 0.3},
            "data-driven": {"hidden_dim": 128, "num_blocks": 6, "gain": 1.0},
            "encoder": {"hidden_dim": 128},
            "output_scale": {"f_np": 1.0, "f_np_eta": 1.0, "g_np": 1.0, "g_np_eta": 1.0, "f_dd": 1.0, "g_dd": 1.0},
        },
        "pk": {
            "hybrid": {"hidden_dim": 64, "num_blocks": 4, "gain": 0.2},
            "data-driven": {"hidden_dim": 64, "num_blocks": 4, "gain": 1.0},
            "output_scale": {"f_np_psi": 0.1, "f_np_eta": 1.0, "g_np_psi": 0.01, "cp_dd": 10.0, "ce_dd": 0.1},
        },
        "balance": {},
    },
    "eval": {
        "models": ["mechanistic", "data-driven", "hybrid"],
    },
    "replicate": {
        "n_reps": 5,
        "seeds": None,
    },
}


class ConfigParser:
    """
    The ConfigParser class handles the parsing of a configuration file.

    Methods:
    __init__(config_path: Optional[str])

    test_config_path(config_path: Optional[str]) -> Optional[str]
        Checks if the configuration file is present at the given config path.

    get_config(overrides: Iterable[str] = ()) -> Dict[str, Any]
        Parses the configuration file, merges it over DEFAULT_CONFIG and applies overrides.

    load_file(config_path: str) -> Dict[str, Any]
        Loads a YAML, TOML or JSON file, dispatching on the file extension.

    deep_merge(base: Dict, update: Dict) -> Dict
        Recursively merges two dictionaries without mutating either.

    apply_override(config: Dict, assignment: str) -> None
        Applies one dotted `key=value` assignment.

    apply_cli_flags(config: Dict, cli_args) -> Dict
        Applies explicit command-line flags, which take precedence over everything else.
    """
    def __init__(self, config_path: Optional[str] = None):
        """
        Initializes the configuration file parser and validates the config file.
        """
        logger.debug("Starting: ConfigParser.")
        self.config_path = self.test_config_path(config_path)
        logger.debug("Finished: ConfigParser.")

    def test_config_path(self, config_path: Optional[str]) -> Optional[str]:
        """
        Checks if configuration file is present at given config path. Without a path
        the built-in defaults are used.

        Raises:
            MissingArtifactError: If a path was given but the file does not exist.
        """
        logger.debug("Starting: test_config_path.")
        if config_path is not None:
            if os.path.exists(config_path):
                logger.debug(f"The file {config_path} exists.")
            else:
                raise MissingArtifactError(f"The config file {config_path} does not exist.", path=config_path)
        else:
            logger.debug("No config file given. Using built-in defaults.")

        logger.debug("Finished: test_config_path.")
        return config_path

    @staticmethod
    def load_file(config_path: str) -> Dict[str, Any]:
        """
        Loads a configuration file. `.toml` is read with tomllib, `.json` with json and
        everything else as YAML.

        Raises:
            ConfigurationError: If the file cannot be parsed or is not a mapping.
        """
        extension = os.path.splitext(config_path)[1].lower()
        try:
            if extension == ".toml":
                with open(config_path, "rb") as config_file:
                    config_data = tomllib.load(config_file)
            elif extension == ".json":
                with open(config_path, "r", encoding="utf-8") as config_file:
                    config_data = json.load(config_file)
            else:
                with open(config_path, "r", encoding="utf-8") as config_file:
                    config_data = yaml.safe_load(config_file)
        except (yaml.YAMLError, tomllib.TOMLDecodeError, json.JSONDecodeError) as exception_error:
            raise ConfigurationError(f"Error loading config file {config_path}: {exception_error}") from exception_error

        if config_data is None:
            return {}
        if not isinstance(config_data, dict):
            raise ConfigurationError(f"Config file {config_path} must contain a mapping at top level.")
        return config_data

    @staticmethod
    def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
        """
        Recursively merges `update` over `base` and returns a new dictionary.
        """
        merged = copy.deepcopy(base)
        for key, value in update.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = ConfigParser.deep_merge(merged[key], value)
            else:
                merged[key] = copy.deepcopy(value)
        return merged

    @staticmethod
    def apply_override(config: Dict[str, Any], assignment: str) -> None:
        """
        Applies a dotted assignment such as `training.pk.hybrid.learning_rate=5e-4`.
        Values are parsed as YAML scalars, so numbers, booleans, null and lists work.

        Raises:
            ConfigurationError: If the assignment is malformed.
        """
        if "=" not in assignment:
            raise ConfigurationError(f"Invalid override '{assignment}'. Expected key=value.")

        key, raw_value = assignment.split("=", 1)
        parts = [part for part in key.strip().split(".") if part]
        if not parts:
            raise ConfigurationError(f"Invalid override '{assignment}'. Empty key.")

        try:
            value = yaml.safe_load(raw_value) if raw_value.strip() else None
        except yaml.YAMLError as exception_error:
            raise ConfigurationError(f"Invalid value in override '{assignment}': {exception_error}") from exception_error

        node = config
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
        logger.debug("Applied config override.", key=".".join(parts), value=value)

    def get_config(self, overrides: Iterable[str] = ()) -> Dict[str, Any]:
        """
        Parses the configuration file and returns the merged configuration
        (defaults < file < overrides).
        """
        logger.debug("Starting: get_config.")
        config = copy.deepcopy(DEFAULT_CONFIG)

        if self.config_path is not None:
            logger.info(f"Using config path: {self.config_path}")
            config = self.deep_merge(config, self.load_file(self.config_path))

        for assignment in overrides or ():
            self.apply_override(config, assignment)

        logger.debug("Finished: get_config.")
        return config

    @staticmethod
    def apply_cli_flags(config: Dict[str, Any], cli_args: Any) -> Dict[str, Any]:
        """
        Applies explicit command-line flags over the merged configuration. Flags left
        unset on the command line do not touch the configuration.
        """
        logger.debug("Starting: apply_cli_flags.")
        mapping = {
            "seed": ("run", "seed"),
            "out": ("run", "out"),
            "threads": ("run", "threads"),
            "case": ("run", "case"),
            "model": ("run", "model"),
            "log_level": ("service", "log_level"),
            "n": ("data", "n"),
            "n_test": ("data", "n_test"),
            "format": ("data", "format"),
            "source": ("data", "source"),
            "data": ("data", "path"),
            "n_reps": ("replicate", "n_reps"),
        }
        for attribute, (section, key) in mapping.items():
            value = getattr(cli_args, attribute, None)
            if value is not None:
                config.setdefault(section, {})[key] = value

        if getattr(cli_args, "force", False):
            config["run"]["force"] = True

        source = getattr(cli_args, "source", None)
        if source is not None and source not in ("synthetic",):
            config["data"]["source"] = "csv"
            config["pk"]["cohort"]["csv_path"] = source

        logger.debug("Finished: apply_cli_flags.")
        return config

    @staticmethod
    def validate(config: Dict[str, Any]) -> None:
        """
        Validates the top-level selectors of a merged configuration.

        Raises:
            ConfigurationError: If the case, model kind, format or thread count is invalid.
        """
        run = config.get("run", {})
        if run.get("case") not in ("pendulum", "pk"):
            raise ConfigurationError(f"Unknown case '{run.get('case')}'. Use 'pendulum' or 'pk'.")
        if run.get("model") not in ("mechanistic", "data-driven", "hybrid"):
            raise ConfigurationError(f"Unknown model kind '{run.get('model')}'. Use 'mechanistic', 'data-driven' or 'hybrid'.")
        if config.get("data", {}).get("format") not in ("csv", "npz"):
            raise ConfigurationError(f"Unknown dataset format '{config['data'].get('format')}'. Use 'csv' or 'npz'.")
        if int(run.get("threads", 1)) < 1:
            raise ConfigurationError("run.threads must be at least 1.")
