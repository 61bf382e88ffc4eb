"""Command-line entry point: miaaudit run | sweep | report | serve."""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .attack import AttackError
from .cohort import CohortError
from .config import ConfigError, ExperimentConfig, Settings
from .evalstat import MetricError
from .inference import InferenceError
from .models import AttackSet, AuditReport, LabelMode, MultiRecordingBlock
from .nnet import NumericalError
from .pipeline import run_experiment, run_sweep
from .target import TargetError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# config section whose settings a stage error points back to
STAGE_ERRORS: dict[type[Exception], str] = {
    CohortError: "cohort",
    TargetError: "target",
    AttackError: "attack",
    InferenceError: "svm",
    MetricError: "cohort",
}


def _out_dir(settings: Settings, config: ExperimentConfig) -> Path:
    return settings.out if settings.out is not None else config.out_dir


def _stage_section(e: Exception) -> str:
    return next(
        section for error, section in STAGE_ERRORS.items() if isinstance(e, error)
    )


def _notes(e: Exception) -> str:
    notes = getattr(e, "__notes__", [])
    return f" ({'; '.join(notes)})" if notes else ""


def cmd_run(config_path: str, settings: Settings) -> int:
    try:
        config = ExperimentConfig.from_yaml_file(config_path)
    except ConfigError as e:
        logger.error(f"Invalid config: {e}")
        return EXIT_CONFIG

    try:
        result = run_experiment(config, _out_dir(settings, config))
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERIC
    except tuple(STAGE_ERRORS) as e:
        logger.error(f"{config_path}: {_stage_section(e)}: {e}")
        return EXIT_CONFIG

    logger.info(f"Run complete, artifacts in {result.out_dir}")
    return EXIT_OK


def cmd_sweep(
    config_path: str, dial: str, param: str | None, settings: Settings
) -> int:
    values = [value.strip() for value in dial.split(",") if value.strip()]
    try:
        config = ExperimentConfig.from_yaml_file(config_path)
        rows = run_sweep(
            config, param or config.sweep.param, values, _out_dir(settings, config)
        )
    except ConfigError as e:
        logger.error(f"Invalid sweep: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}{_notes(e)}")
        return EXIT_NUMERIC
    except tuple(STAGE_ERRORS) as e:
        logger.error(f"{config_path}: {_stage_section(e)}: {e}{_notes(e)}")
        return EXIT_CONFIG

    logger.info(f"Sweep complete: {len(rows)} rows")
    return EXIT_OK


def _format_p(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _multi_recording_line(attack_set: AttackSet, block: MultiRecordingBlock) -> str:
    hits = block.person_hits if block.person_hits is not None else block.instance_hits
    if not block.total or block.binomial is None or hits is None:
        return f"{attack_set.short:<8}{'n/a':>7}"
    b = block.binomial
    return (
        f"{attack_set.short:<8}{block.total:>7}{hits:>9}"
        f"{_format_p(b.one_sided_p):>13}{_format_p(b.two_sided_p):>13}"
        f"{_format_p(b.one_minus_two_sided_p):>9}"
        f"{_format_p(block.reference_p):>9}{_format_p(block.population_auc):>9}"
    )


def render_report(report: AuditReport) -> str:
    """Human-readable tables for one label-mode report."""
    evaluations = report.evaluations
    table_sets = [s for s in (AttackSet.VALID, AttackSet.TEST) if s in evaluations]
    lines = [
        f"Audit report: {report.label_mode} model, "
        f"feature config {report.feature_config}, threshold {report.threshold:.4f}",
        f"Target: {report.target_epochs} epochs, train MSE "
        f"{report.target_train_mse:.5f}, held-out MSE "
        + (
            "n/a"
            if report.target_heldout_mse is None
            else f"{report.target_heldout_mse:.5f}"
        ),
        "",
        "Accuracy / F1 (threshold tuned on validation)",
        f"{'set':<8}{'Acc':>7}{'F1':>7}{'BCE':>7}{'frameBCE':>10}",
    ]
    for attack_set in table_sets:
        e = evaluations[attack_set]
        frame_bce = "n/a" if e.frame_bce is None else f"{e.frame_bce:.3f}"
        lines.append(
            f"{attack_set.short:<8}{e.accuracy:>7.3f}{e.f1:>7.3f}"
            f"{e.mean_bce:>7.3f}{frame_bce:>10}"
        )

    lines += ["", "ROC AUC / average precision", f"{'set':<8}{'AUC':>7}{'AP':>7}"]
    for attack_set in table_sets:
        e = evaluations[attack_set]
        lines.append(
            f"{attack_set.short:<8}{_format_p(e.auc):>7}"
            f"{_format_p(e.average_precision):>7}"
        )

    member_label = "person" if report.label_mode is LabelMode.PERSON else "instance"
    lines += [
        "",
        "Multi-recording population (not trained on, person has a trained recording)",
        f"{'set':<8}{'total':>7}{member_label:>9}{'one-sided p':>13}"
        f"{'two-sided p':>13}{'1-p':>9}{'ref p':>9}{'AUC':>9}",
    ]
    for attack_set in AttackSet:
        if attack_set in evaluations:
            block = evaluations[attack_set].multi_recording
            lines.append(_multi_recording_line(attack_set, block))

    if report.feature_table:
        lines += [
            "",
            f"Frame classifier validation BCE (baseline {report.bce_baseline:.3f})",
        ]
        lines += [
            f"{row.feature_config:<24}{row.best_valid_bce:>7.3f}"
            for row in report.feature_table
        ]
    return "\n".join(lines)


def cmd_report(report_path: str) -> int:
    try:
        report = AuditReport.from_json_file(report_path)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Unreadable report {report_path}: {e}")
        return EXIT_CONFIG
    print(render_report(report))
    return EXIT_OK


def cmd_serve(host: str, port: int) -> int:
    import uvicorn

    uvicorn.run("miaaudit.main:app", host=host, port=port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miaaudit",
        description="White-box membership-inference audit of a gaze-regression model",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run the full audit pipeline")
    run.add_argument("config", help="Path to experiment config YAML")

    sweep = commands.add_parser("sweep", help="Run the pipeline once per dial value")
    sweep.add_argument("config", help="Path to experiment config YAML")
    sweep.add_argument("--dial", required=True, help="Comma-separated dial values")
    sweep.add_argument(
        "--param",
        default=None,
        help="Dotted config field to dial (default: sweep.param)",
    )

    report = commands.add_parser("report", help="Print a report as text tables")
    report.add_argument("report", help="Path to report-<mode>.json")

    serve = commands.add_parser("serve", help="Serve reports over HTTP")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings()
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    match args.command:
        case "run":
            return cmd_run(args.config, settings)
        case "sweep":
            return cmd_sweep(args.config, args.dial, args.param, settings)
        case "report":
            return cmd_report(args.report)
        case "serve":
            return cmd_serve(args.host, args.port)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
