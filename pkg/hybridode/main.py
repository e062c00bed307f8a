"""
HybridODE trains and evaluates hybrid mechanistic/data-driven models of controlled
dynamical systems. It generates pendulum and propofol pharmacokinetic datasets,
pretrains the pendulum parameter encoder, trains mechanistic, data-driven and hybrid
models, evaluates reconstruction, counterfactual and dose-selection quality and runs
seeded replications. Every command writes into an atomically created output directory
together with a snapshot of the resolved configuration.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import logging
import os
import signal
import sys
from typing import Any, Dict, List, Optional
import numpy as np
import pandas as pd
from hybridode.models.datagen import DatasetStore, DoseProtocol, TEST_GROUPS, covariates_from_records, generate_datasets
from hybridode.models.evaluation import (ModelBundle, dose_report, eval_counterfactual_outcomes, eval_reconstruction, load_bundle,
                                         load_test_sets, pendulum_experiment, pk_experiment, run_replications, select_doses,
                                         write_report)
from hybridode.models.hybrid import ModelKind, build_model
from hybridode.models.mechanistic import PkParamTable
from hybridode.models.training import (ENCODER_STREAM, TrainConfig, fit_model, load_encoder, pretrain_encoder, save_encoder,
                                       write_config_snapshot, write_run_artifacts)
from hybridode.utils.cli_parser import CliParser
from hybridode.utils.config_parser import ConfigParser
from hybridode.utils.exceptions import ConfigurationError, HybridOdeError, MissingArtifactError
from hybridode.utils.helper import Helper
from hybridode.utils.logger import StructuredLogger


logger = StructuredLogger(level=logging.INFO)


def _require(value: Optional[str], flag: str, command: str) -> str:
    if not value:
        raise MissingArtifactError(f"Command '{command}' needs {flag}.")
    if not os.path.exists(value):
        raise MissingArtifactError(f"{flag} {value} does not exist.", path=value)
    return value


def _encoder_ref(path: str) -> Dict[str, str]:
    return {"path": os.path.abspath(path), "checksum": Helper.sha256_file(path)}


def cmd_generate(config: Dict[str, Any], cli_args) -> str:
    """
    Simulates the datasets of the configured case into the output directory.
    """
    out = config["run"]["out"]
    with Helper.atomic_output_dir(out, config["run"]["force"]) as work_dir:
        write_config_snapshot(work_dir, config)
        manifest = generate_datasets(config, work_dir)
    logger.info("Generation finished.", out=out, datasets=",".join(sorted(manifest["datasets"])))
    return out


def cmd_pretrain(config: Dict[str, Any], cli_args) -> str:
    """
    Pretrains the pendulum encoder on the `encoder_pretrain` dataset.
    """
    if config["run"]["case"] != "pendulum":
        raise ConfigurationError("Encoder pretraining only applies to the pendulum case.")
    data_dir = _require(config["data"]["path"], "--data", "pretrain-encoder")
    dataset = DatasetStore.read(data_dir, "encoder_pretrain")
    seed = int(config["run"]["seed"])
    cfg = TrainConfig.from_dict(config["encoder"], seed)
    out = config["run"]["out"]
    with Helper.atomic_output_dir(out, config["run"]["force"]) as work_dir:
        write_config_snapshot(work_dir, config)
        encoder, result = pretrain_encoder(dataset, cfg, int(config["model"]["pendulum"]["encoder"]["hidden_dim"]),
                                           int(config["pendulum"]["encoder_window"]), np.random.default_rng([seed, ENCODER_STREAM]))
        Helper.write_csv(os.path.join(work_dir, "epochs.csv"), result.history)
        save_encoder(encoder, os.path.join(work_dir, "encoder.json"),
                     {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss, "seed": seed})
    logger.info("Encoder pretrained.", out=out, best_val_loss=result.best_val_loss, epochs=result.epochs_run)
    return out


def _training_set(config: Dict[str, Any], data_dir: str):
    if config["run"]["case"] == "pendulum":
        return DatasetStore.read(data_dir, "train")
    return DatasetStore.read(data_dir, "cohort").where("split", "train", "train")


def cmd_train(config: Dict[str, Any], cli_args) -> str:
    """
    Trains one model kind and writes its run directory. Pendulum models with
    estimated parameters need the pretrained encoder.
    """
    case = config["run"]["case"]
    kind = ModelKind.parse(config["run"]["model"])
    data_dir = _require(config["data"]["path"], "--data", "train")
    dataset = _training_set(config, data_dir)

    encoder, encoder_ref, prior = None, None, None
    if case == "pendulum" and config["pendulum"].get("beta_source", "encoder") == "encoder":
        encoder_path = _require(getattr(cli_args, "encoder", None), "--encoder", "train")
        encoder = load_encoder(encoder_path)
        encoder_ref = _encoder_ref(encoder_path)
    if case == "pk":
        prior = PkParamTable.load(config["pk"]["prior_table"])

    out = config["run"]["out"]
    with Helper.atomic_output_dir(out, config["run"]["force"]) as work_dir:
        write_config_snapshot(work_dir, config)
        model, result = fit_model(kind.value, config, dataset, encoder, prior, encoder_ref)
        write_run_artifacts(work_dir, config, model, result,
                            {"run_id": Helper.get_uuid_string(config), "seed": int(config["run"]["seed"]), "case": case})
    logger.info("Model trained.", kind=kind.value, out=out, parameters=model.num_parameters(), best_val_loss=result.best_val_loss)
    return out


def _bundles(config: Dict[str, Any], cli_args, command: str) -> List[ModelBundle]:
    checkpoints = list(getattr(cli_args, "checkpoints", None) or [])
    if not checkpoints:
        raise MissingArtifactError(f"Command '{command}' needs at least one --checkpoint.")
    encoder_path = getattr(cli_args, "encoder", None)
    bundles = []
    for path in checkpoints:
        _require(path, "--checkpoint", command)
        bundle = load_bundle(path, config, encoder_path)
        if bundle.model.case != config["run"]["case"]:
            raise ConfigurationError(f"Checkpoint {path} is a {bundle.model.case} model, the run case is {config['run']['case']}.")
        if any(existing.name == bundle.name for existing in bundles):
            bundle.name = f"{bundle.name}:{os.path.basename(os.path.dirname(os.path.abspath(path)))}"
        bundles.append(bundle)
    return bundles


def cmd_eval(config: Dict[str, Any], cli_args) -> str:
    """
    Evaluates checkpoints: reconstruction on every test split plus counterfactual
    outcomes (pendulum) or dose selection (PK).
    """
    case = config["run"]["case"]
    data_dir = _require(config["data"]["path"], "--data", "eval")
    bundles = _bundles(config, cli_args, "eval")
    threads = int(config["run"]["threads"])
    run_id = Helper.get_uuid_string({"command": "eval", "config": config, "checkpoints": [b.name for b in bundles]})

    out = config["run"]["out"]
    with Helper.atomic_output_dir(out, config["run"]["force"]) as work_dir:
        write_config_snapshot(work_dir, config)
        recon = eval_reconstruction(bundles, load_test_sets(data_dir, case), threads)
        write_report(work_dir, "reconstruction", run_id, recon.cells, {"case": case}, {"trajectories": recon.trajectories})
        if case == "pendulum":
            section = config["pendulum"]
            training_taus = [float(section["tau_base"]) + float(section["tau_step"]) * k for k in section["train_k"]]
            cf = eval_counterfactual_outcomes(bundles, DatasetStore.read(data_dir, "counterfactual"), training_taus, threads)
            write_report(work_dir, "counterfactual", run_id, cf, {"case": case, "training_taus": training_taus})
        else:
            report = dose_report(bundles, DatasetStore.read(data_dir, "cohort"), DoseProtocol.from_config(config),
                                 PkParamTable.load(config["pk"]["oracle_table"]), threads)
            write_report(work_dir, "dose", run_id, report.cells, {"case": case}, {"patients": report.patients})
    logger.info("Evaluation written.", out=out, run_id=run_id)
    return out


def cmd_replicate(config: Dict[str, Any], cli_args) -> str:
    """
    Repeats the full in-memory pipeline over seeded replications and writes raw and
    aggregated cells.
    """
    case = config["run"]["case"]
    n_reps = int(config["replicate"]["n_reps"])
    seeds = config["replicate"].get("seeds")
    if seeds is None:
        seeds = [int(config["run"]["seed"]) + rep for rep in range(n_reps)]
    if len(seeds) != n_reps:
        raise ConfigurationError(f"replicate.seeds lists {len(seeds)} seeds for {n_reps} replications.")
    experiment = pendulum_experiment(config) if case == "pendulum" else pk_experiment(config)
    run_id = Helper.get_uuid_string({"command": "replicate", "config": config})

    out = config["run"]["out"]
    with Helper.atomic_output_dir(out, config["run"]["force"]) as work_dir:
        write_config_snapshot(work_dir, config)
        report = run_replications(experiment, n_reps, seeds)
        write_report(work_dir, "replications", run_id, report.aggregate,
                     {"case": case, "seeds": [int(s) for s in seeds], "failures": report.failures, "n_failed": len(report.failures)},
                     {"raw": report.raw})
    logger.info("Replications written.", out=out, n_reps=n_reps, failures=len(report.failures))
    return out


def _dose_bundles(config: Dict[str, Any], cli_args) -> List[ModelBundle]:
    if getattr(cli_args, "checkpoints", None):
        return _bundles(config, cli_args, "dose-plan")
    if ModelKind.parse(config["run"]["model"]) is not ModelKind.MECHANISTIC:
        raise MissingArtifactError("Command 'dose-plan' needs --checkpoint for trained models.")
    model = build_model(ModelKind.MECHANISTIC, "pk", config)
    return [ModelBundle(ModelKind.MECHANISTIC.value, model, prior=PkParamTable.load(config["pk"]["prior_table"]))]


def format_plan(plan: pd.DataFrame) -> str:
    header = f"{'model':<14} {'patient':<12} {'dose mg/kg':>10} {'max Ce':>8} {'safe':>5}"
    lines = [header, "-" * len(header)]
    for row in plan.itertuples(index=False):
        dose = "-" if row.dose is None or pd.isna(row.dose) else f"{row.dose:.2f}"
        max_ce = "-" if row.max_ce is None or pd.isna(row.max_ce) else f"{row.max_ce:.3f}"
        lines.append(f"{row.model:<14} {str(row.patient_id):<12} {dose:>10} {max_ce:>8} {'yes' if row.safe else 'NO':>5}")
    return "\n".join(lines)


def cmd_dose_plan(config: Dict[str, Any], cli_args) -> str:
    """
    Selects induction doses for every test patient of a PK dataset, prints the plan and
    writes it together with the dose report.
    """
    if config["run"]["case"] != "pk":
        raise ConfigurationError("Dose planning only applies to the pk case.")
    data_dir = _require(config["data"]["path"], "--data", "dose-plan")
    bundles = _dose_bundles(config, cli_args)
    threads = int(config["run"]["threads"])
    protocol = DoseProtocol.from_config(config)
    dataset = DatasetStore.read(data_dir, "cohort")
    test_records = dataset.records[dataset.records["split"].isin(TEST_GROUPS)].reset_index(drop=True)
    patients = covariates_from_records(test_records)
    run_id = Helper.get_uuid_string({"command": "dose-plan", "config": config, "models": [b.name for b in bundles]})

    out = config["run"]["out"]
    with Helper.atomic_output_dir(out, config["run"]["force"]) as work_dir:
        write_config_snapshot(work_dir, config)
        rows = []
        for bundle in bundles:
            for decision in select_doses(bundle, patients, protocol, threads):
                rows.append(dict(decision.to_dict(), model=bundle.name))
        plan = pd.DataFrame(rows, columns=["model", "patient_id", "dose", "target_ce", "max_ce", "max_cp", "safe", "reason"])
        Helper.write_csv(os.path.join(work_dir, f"dose_plan_{run_id}.csv"), plan)
        report = dose_report(bundles, dataset, protocol, PkParamTable.load(config["pk"]["oracle_table"]), threads)
        write_report(work_dir, "dose", run_id, report.cells, {"case": "pk"}, {"patients": report.patients})
    print(format_plan(plan))
    logger.info("Dose plan written.", out=out, patients=len(patients), unsafe=int((~plan["safe"].astype(bool)).sum()))
    return out


COMMANDS = {
    "generate": cmd_generate,
    "pretrain-encoder": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "replicate": cmd_replicate,
    "dose-plan": cmd_dose_plan,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    HybridODE main function
    """
    signal.signal(signal.SIGINT, Helper.handler_sigint)

    # Parses arguments passed from the CLI
    cli_parser = CliParser()
    cli_args = cli_parser.parse_args(argv)
    Helper.get_version(cli_args.version)
    if cli_args.command is None:
        cli_parser.parser.print_help()
        return 1

    try:
        # Parse the run config: defaults < file < --set < flags
        config_parser = ConfigParser(cli_args.config)
        config = config_parser.get_config(cli_args.overrides)
        config = ConfigParser.apply_cli_flags(config, cli_args)
        ConfigParser.validate(config)
        logger.set_log_level(config.get("service", {}).get("log_level", "INFO"))

        logger.debug(f"Starting: {cli_args.command}.")
        COMMANDS[cli_args.command](config, cli_args)
        logger.debug(f"Finished: {cli_args.command}.")
    except HybridOdeError as exception_error:
        logger.critical(f"{type(exception_error).__name__}: {exception_error}")
        print(f"Error: {exception_error}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
