"""
The CliParser class handles the parsing of command-line interface (CLI) arguments.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import argparse
from typing import List, Optional
import hybridode.utils.version
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

COMMANDS = ("generate", "pretrain-encoder", "train", "eval", "replicate", "dose-plan")


class CliParser:
    """
    The CliParser class handles the parsing of command-line interface (CLI) arguments.
    """
    def __init__(self):
        """
        Initializes the CliParser class.

        This method sets up an argument parser with the global options shared by every
        command and one sub-parser per command:
        - `generate`: Simulates datasets and writes them with a manifest.
        - `pretrain-encoder`: Trains the pendulum parameter encoder.
        - `train`: Trains a mechanistic, data-driven or hybrid model.
        - `eval`: Evaluates checkpoints and writes metric reports.
        - `replicate`: Repeats training and evaluation over several seeds.
        - `dose-plan`: Selects induction doses for a cohort with a trained model.

        Logs the start and end of the initialization process.
        """
        logger.debug("Starting: CliParser.")

        self.parser = argparse.ArgumentParser(
            prog="hybridode",
            description=(
                f"{hybridode.utils.version.__app_name__} ({hybridode.utils.version.__version__}): "
                f"{hybridode.utils.version.__app_desc__}"
            )
        )
        self.parser.add_argument(
            "-v", "--version",
            help="Returns the current HybridODE version",
            action="store_true",
            required=False
        )

        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("-c", "--config", help="Path to the configuration file (YAML, TOML or JSON)", type=str)
        common.add_argument("--seed", help="Random seed", type=int)
        common.add_argument("--out", help="Output directory", type=str)
        common.add_argument("--threads", help="Maximum number of worker threads", type=int)
        common.add_argument("--force", help="Overwrite an existing output directory", action="store_true")
        common.add_argument("--log-level", help="Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)", type=str.upper)
        common.add_argument("--set", help="Override a config value, e.g. training.pk.hybrid.learning_rate=5e-4",
                            action="append", default=[], dest="overrides", metavar="KEY=VALUE")
        common.add_argument("--case", help="Case study", choices=["pendulum", "pk"])

        self.subparsers = self.parser.add_subparsers(dest="command", metavar="COMMAND")

        generate = self.subparsers.add_parser("generate", parents=[common], help="Generate datasets")
        generate.add_argument("--n", help="Number of training trajectories or patients", type=int)
        generate.add_argument("--n-test", help="Number of test trajectories per split", type=int, dest="n_test")
        generate.add_argument("--format", help="Dataset file format", choices=["csv", "npz"])
        generate.add_argument("--source", help="PK cohort source: 'synthetic' or a CSV path", type=str)

        pretrain = self.subparsers.add_parser("pretrain-encoder", parents=[common], help="Pretrain the parameter encoder")
        pretrain.add_argument("--data", help="Dataset directory produced by generate", type=str)

        train = self.subparsers.add_parser("train", parents=[common], help="Train a model")
        self._add_model_arguments(train)

        evaluate = self.subparsers.add_parser("eval", parents=[common], help="Evaluate trained models")
        evaluate.add_argument("--data", help="Dataset directory produced by generate", type=str)
        evaluate.add_argument("--checkpoint", help="Model checkpoint (repeatable)", action="append", default=[], dest="checkpoints")
        evaluate.add_argument("--encoder", help="Encoder checkpoint for pendulum models", type=str)

        replicate = self.subparsers.add_parser("replicate", parents=[common], help="Run seeded replications")
        replicate.add_argument("--n-reps", help="Number of replications", type=int, dest="n_reps")
        replicate.add_argument("--n", help="Number of training trajectories or patients", type=int)
        replicate.add_argument("--n-test", help="Number of test trajectories per split", type=int, dest="n_test")

        dose_plan = self.subparsers.add_parser("dose-plan", parents=[common], help="Select induction doses for a cohort")
        dose_plan.add_argument("--data", help="PK dataset directory produced by generate", type=str)
        dose_plan.add_argument("--checkpoint", help="Model checkpoint (repeatable)", action="append", default=[], dest="checkpoints")
        dose_plan.add_argument("--model", help="Model kind used when no checkpoint is given", choices=["mechanistic", "data-driven", "hybrid"])

        logger.debug("Finished: CliParser.")

    @staticmethod
    def _add_model_arguments(parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--model", help="Model kind", choices=["mechanistic", "data-driven", "hybrid"])
        parser.add_argument("--data", help="Dataset directory produced by generate", type=str)
        parser.add_argument("--encoder", help="Encoder checkpoint for pendulum models", type=str)

    def parse_args(self, argv: Optional[List[str]] = None) -> argparse.Namespace:
        """
        Parses and returns the parsed command-line interface (CLI) arguments.

        Args:
            argv (Optional[List[str]]): Arguments to parse; defaults to sys.argv.

        Returns:
            argparse.Namespace: An object containing the parsed CLI arguments.
        """
        logger.debug("Starting: parse_args.")
        cli_args = self.parser.parse_args(argv)
        logger.debug(f"Parsed arguments: {vars(cli_args)}")
        logger.debug("Finished: parse_args.")
        return cli_args
