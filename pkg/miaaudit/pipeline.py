"""End-to-end audit runs and memorization-dial sweeps.

Stage order within a run is fixed: cohort -> target -> probe -> frame
classifier -> recording statistics + SVM -> evaluation -> artifacts.
"""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import (
    AttackHistory,
    FeatureConfig,
    predict_frames,
    save_attack,
    train_attack,
)
from .cohort import (
    CohortSplit,
    Recording,
    assign_target_train,
    data_distribution,
    generate_cohort,
    split_for_attack,
    write_cohort,
)
from .config import ConfigError, ExperimentConfig, LabelModeSetting
from .evalstat import (
    accuracy_f1,
    binomial_test,
    hit_rate_test,
    mean_bce,
    pr_ap,
    roc_auc,
)
from .inference import (
    MembershipDecision,
    RecordingSummary,
    infer_membership,
    summarize_recording,
    train_svm,
    tune_threshold,
)
from .models import (
    AttackSet,
    AuditReport,
    EvalReport,
    FeatureTableRow,
    LabelMode,
    MultiRecordingBlock,
    SweepRow,
)
from .target import (
    TargetModel,
    WhiteBoxTrace,
    build_target,
    probe_recording,
    save_target,
    train_target,
)

logger = logging.getLogger(__name__)

COHORT_DIR = "cohort"
TARGET_FILE = "target.ckpt"
SWEEP_FILE = "sweep.csv"
CURVE_SETS = (AttackSet.VALID, AttackSet.TEST)

# keeps recording probabilities inside (0, 1) for BCE
_PROBABILITY_EPS = 1e-12


def report_file(label_mode: LabelMode) -> str:
    return f"report-{label_mode}.json"


def attack_file(label_mode: LabelMode) -> str:
    return f"attack-{label_mode}.ckpt"


def summaries_file(label_mode: LabelMode) -> str:
    return f"summaries-{label_mode}.csv"


def curves_file(label_mode: LabelMode, attack_set: AttackSet) -> str:
    return f"curves-{label_mode}-{attack_set.short}.csv"


@dataclass(frozen=True, eq=False)
class RunResult:
    out_dir: Path
    recordings: list[Recording]
    split: CohortSplit
    target: TargetModel
    reports: dict[LabelMode, AuditReport]


@dataclass(frozen=True, eq=False)
class _Audit:
    """Everything one label mode needs from the shared stages."""

    config: ExperimentConfig
    recordings: list[Recording]
    split: CohortSplit
    target: TargetModel
    traces: dict[str, list[WhiteBoxTrace]]

    def frames(
        self, attack_set: AttackSet, labels: dict[str, int]
    ) -> tuple[list[WhiteBoxTrace], list[int]]:
        traces: list[WhiteBoxTrace] = []
        frame_labels: list[int] = []
        for rid in self.split.recording_ids(attack_set):
            traces.extend(self.traces[rid])
            frame_labels.extend([labels[rid]] * len(self.traces[rid]))
        return traces, frame_labels


def _derive_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def run_experiment(config: ExperimentConfig, out_dir: Path | str) -> RunResult:
    """Run every stage and write all artifacts under `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = config.seeds
    cohort_config = config.cohort

    generate_seed, mark_seed, split_seed = _derive_seeds(seeds.cohort, 3)
    recordings = generate_cohort(cohort_config, generate_seed)
    recordings = assign_target_train(
        recordings,
        cohort_config.target_train_fraction,
        mark_seed,
        forced_pairs=cohort_config.forced_pairs,
        exact_count=cohort_config.exact_count,
    )
    split = split_for_attack(recordings, cohort_config.split_ratios, split_seed)
    write_cohort(recordings, split, out_dir / COHORT_DIR, seeds.cohort)

    target = train_target(
        build_target(config.target.architecture, seeds.target),
        recordings,
        epochs=config.target.epochs,
        learning_rate=config.target.learning_rate,
        seed=seeds.target,
        batch_size=config.target.batch_size,
        heldout=[r for r in recordings if not r.in_target_train],
    )
    save_target(target, out_dir / TARGET_FILE)

    traces = {r.recording_id: probe_recording(target, r) for r in recordings}
    logger.info(f"Probed {sum(len(t) for t in traces.values())} frames")

    audit = _Audit(
        config=config, recordings=recordings, split=split, target=target, traces=traces
    )
    reports = {
        mode: _audit_label_mode(audit, mode, out_dir) for mode in config.label_modes()
    }
    return RunResult(
        out_dir=out_dir,
        recordings=recordings,
        split=split,
        target=target,
        reports=reports,
    )


def _audit_label_mode(
    audit: _Audit, label_mode: LabelMode, out_dir: Path
) -> AuditReport:
    config = audit.config
    split = audit.split
    labels = split.labels(label_mode)

    train_traces, train_labels = audit.frames(AttackSet.TRAIN, labels)
    valid_traces, valid_labels = audit.frames(AttackSet.VALID, labels)
    attack_model, history = train_attack(
        train_traces,
        train_labels,
        valid_traces,
        valid_labels,
        config.attack.feature_config,
        config.attack.hyperparams,
        config.seeds.attack,
    )
    save_attack(attack_model, out_dir / attack_file(label_mode))

    frame_probabilities = {
        rid: predict_frames(attack_model, traces)
        for rid, traces in audit.traces.items()
    }
    summaries = {
        rid: summarize_recording(
            probabilities,
            recording_id=rid,
            y_instance=split.y_instance[rid],
            y_person=split.y_person[rid],
        )
        for rid, probabilities in frame_probabilities.items()
    }

    def recording_set(
        attack_set: AttackSet,
    ) -> tuple[list[RecordingSummary], list[int]]:
        ids = split.recording_ids(attack_set)
        return [summaries[rid] for rid in ids], [labels[rid] for rid in ids]

    svm = train_svm(
        *recording_set(AttackSet.TRAIN),
        regularization=config.svm.regularization,
        epochs=config.svm.epochs,
        seed=config.seeds.svm,
        learning_rate=config.svm.learning_rate,
        batch_size=config.svm.batch_size,
    )
    svm = svm.with_threshold(tune_threshold(svm, *recording_set(AttackSet.VALID)))
    decisions = {
        rid: infer_membership(svm, summary) for rid, summary in summaries.items()
    }

    evaluations = {
        attack_set: _evaluate(
            label_mode, attack_set, split, labels, decisions, frame_probabilities
        )
        for attack_set in AttackSet
    }

    _write_summaries(out_dir / summaries_file(label_mode), summaries, decisions, split)
    for attack_set in CURVE_SETS:
        _write_curves(
            out_dir / curves_file(label_mode, attack_set), evaluations[attack_set]
        )

    feature_table = []
    if config.attack.compare_feature_configs:
        feature_table = _feature_table(
            audit, train_traces, train_labels, valid_traces, valid_labels, history
        )

    log = audit.target.training_log
    report = AuditReport(
        label_mode=label_mode,
        feature_config=str(config.attack.feature_config),
        threshold=svm.threshold,
        target_epochs=config.target.epochs,
        target_train_mse=log.final_train_mse if log else float("nan"),
        target_heldout_mse=log.heldout_mse if log else None,
        attack_history=list(history.records),
        attack_best_epoch=history.best_epoch,
        evaluations=evaluations,
        distribution=data_distribution(audit.recordings, split),
        feature_table=feature_table,
        bce_baseline=float(np.log(2.0)),
        config=config.echo(),
    )
    path = out_dir / report_file(label_mode)
    path.write_text(report.to_json())
    logger.info(f"Wrote {label_mode} report to {path}")
    return report


def _evaluate(
    label_mode: LabelMode,
    attack_set: AttackSet,
    split: CohortSplit,
    labels: dict[str, int],
    decisions: dict[str, MembershipDecision],
    frame_probabilities: dict[str, list[float]],
) -> EvalReport:
    ids = split.recording_ids(attack_set)
    y = [labels[rid] for rid in ids]
    probabilities = [decisions[rid].probability for rid in ids]
    members = [int(decisions[rid].member) for rid in ids]

    roc = roc_auc(probabilities, y) if 0 < sum(y) < len(y) else None
    pr = pr_ap(probabilities, y) if sum(y) > 0 else None
    accuracy, f1 = accuracy_f1(members, y)

    frame_p = [p for rid in ids for p in frame_probabilities[rid]]
    frame_y = [labels[rid] for rid in ids for _ in frame_probabilities[rid]]

    population = split.multi_recording_population(attack_set)
    hits = sum(decisions[rid].member for rid in population)
    binomial = binomial_test(hits, len(population)) if population else None
    reference = [rid for rid in ids if split.y_person[rid] == 0]
    reference_hits = sum(decisions[rid].member for rid in reference)
    compared = bool(population and reference)
    block = MultiRecordingBlock(
        total=len(population),
        person_hits=hits if population and label_mode is LabelMode.PERSON else None,
        instance_hits=hits if population and label_mode is LabelMode.INSTANCE else None,
        binomial=binomial,
        reference_total=len(reference),
        reference_hits=reference_hits if reference else None,
        reference_p=(
            hit_rate_test(hits, len(population), reference_hits, len(reference))
            if compared
            else None
        ),
        population_auc=(
            roc_auc(
                [decisions[rid].probability for rid in population + reference],
                [1] * len(population) + [0] * len(reference),
            ).auc
            if compared
            else None
        ),
    )
    return EvalReport(
        label_mode=label_mode,
        attack_set=attack_set,
        roc_points=roc.points if roc else [],
        auc=roc.auc if roc else None,
        pr_points=pr.points if pr else [],
        average_precision=pr.average_precision if pr else None,
        accuracy=accuracy,
        f1=f1,
        mean_bce=mean_bce(
            np.clip(probabilities, _PROBABILITY_EPS, 1 - _PROBABILITY_EPS), y
        ),
        frame_bce=mean_bce(frame_p, frame_y),
        binomial=binomial,
        multi_recording=block,
    )


def _feature_table(
    audit: _Audit,
    train_traces: list[WhiteBoxTrace],
    train_labels: list[int],
    valid_traces: list[WhiteBoxTrace],
    valid_labels: list[int],
    selected: AttackHistory,
) -> list[FeatureTableRow]:
    """Best validation BCE of every feature config on the same data."""
    rows = []
    for feature_config in FeatureConfig:
        if feature_config is audit.config.attack.feature_config:
            history = selected
        else:
            _, history = train_attack(
                train_traces,
                train_labels,
                valid_traces,
                valid_labels,
                feature_config,
                audit.config.attack.hyperparams,
                audit.config.seeds.attack,
            )
        rows.append(
            FeatureTableRow(
                feature_config=str(feature_config),
                best_valid_bce=history.best_valid_bce,
                best_epoch=history.best_epoch,
            )
        )
    return rows


def _write_summaries(
    path: Path,
    summaries: dict[str, RecordingSummary],
    decisions: dict[str, MembershipDecision],
    split: CohortSplit,
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            [
                "recording_id",
                "mean",
                "variance",
                "skewness",
                "excess_kurtosis",
                "entropy",
                "probability",
                "decision",
                "y_instance",
                "y_person",
                "split",
            ]
        )
        for rid, summary in summaries.items():
            writer.writerow(
                [
                    rid,
                    *(f"{v:.17g}" for v in summary.statistics()),
                    f"{decisions[rid].probability:.17g}",
                    int(decisions[rid].member),
                    summary.y_instance,
                    summary.y_person,
                    split.assignment[rid].short,
                ]
            )


def _write_curves(path: Path, evaluation: EvalReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["curve", "x", "y"])
        for fpr, tpr in evaluation.roc_points:
            writer.writerow(["roc", f"{fpr:.17g}", f"{tpr:.17g}"])
        for recall, precision in evaluation.pr_points:
            writer.writerow(["pr", f"{recall:.17g}", f"{precision:.17g}"])


# ---------------------------------------------------------------------------
# Sweep


def _sweep_row(dial_value: str, result: RunResult) -> SweepRow:
    log = result.target.training_log
    instance = result.reports[LabelMode.INSTANCE].evaluations[AttackSet.TEST]
    person = result.reports[LabelMode.PERSON].evaluations[AttackSet.TEST]
    block = person.multi_recording
    gap = None
    if log and log.heldout_mse is not None:
        gap = log.heldout_mse - log.final_train_mse
    return SweepRow(
        dial_value=dial_value,
        generalization_gap=gap,
        instance_auc=instance.auc,
        person_auc=person.auc,
        person_hit_rate=(
            block.person_hits / block.total if block.person_hits is not None else None
        ),
        binomial_p=block.binomial.two_sided_p if block.binomial else None,
    )


def run_sweep(
    config: ExperimentConfig,
    param: str,
    values: Sequence[str],
    out_dir: Path | str,
) -> list[SweepRow]:
    """One full run per dial value (shared seeds), one sweep.csv row each."""
    if len(values) < 2:
        raise ConfigError(f"A sweep needs at least 2 dial values, got {list(values)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        run_config = config.with_override(param, value).model_copy(
            update={"label_mode": LabelModeSetting.BOTH}
        )
        logger.info(f"Sweep run {param}={value}")
        try:
            result = run_experiment(run_config, out_dir / f"{param}={value}")
        except Exception as e:
            e.add_note(f"sweep dial {param}={value}")
            logger.error(f"Sweep run {param}={value} failed: {e}")
            raise
        rows.append(_sweep_row(value, result))

    with open(out_dir / SWEEP_FILE, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([param, *list(SweepRow.model_fields)[1:]])
        for row in rows:
            writer.writerow(
                [
                    row.dial_value,
                    *(
                        "" if value is None else f"{value:.17g}"
                        for value in row.model_dump(exclude={"dial_value"}).values()
                    ),
                ]
            )
    logger.info(f"Wrote sweep table to {out_dir / SWEEP_FILE}")
    return rows
