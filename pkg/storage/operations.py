"""Read and write run artifacts: JSON, JSONL, CSV and plain-text summaries.

Every artifact carries the config hash of the run that wrote it.
"""

import csv
import json
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel

from logging_config import logger
from models.policy import DecodedPolicy, PerturbationReport
from models.report import EpisodeRecord, EvalReport, SearchHistory, SearchRecord
from navigator.errors import MissingArtifact, MixedConfigHashes, NothingToReport
from navigator.search import RecordSink
from storage.run_dir import (
    ALPHA_SNAPSHOT_FILE,
    ALPHA_TRAJECTORY_FILE,
    CANDIDATES_FILE,
    HISTORY_FILE,
    PERTURBATION_FILE,
    PLOT_DIR,
    POLICY_FILE,
    POLICY_SUMMARY_CSV,
    POLICY_SUMMARY_TXT,
    TABLES_DIR,
    RunDir,
)


# generic helpers

def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    with open(path, "w") as handle:
        json.dump(data, handle, indent=2)
    return path


def read_json(path: Path):
    if not path.is_file():
        raise MissingArtifact(f"{path} does not exist")
    with open(path) as handle:
        return json.load(handle)


def append_jsonl(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    with open(path, "a") as handle:
        handle.write(json.dumps(data) + "\n")
        handle.flush()


def read_jsonl(path: Path) -> List[dict]:
    if not path.is_file():
        raise MissingArtifact(f"{path} does not exist")
    with open(path) as handle:
        return [json.loads(line) for line in handle if line.strip()]


def write_csv(path: Path, header: List[str], rows: Iterable[Iterable]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> List[dict]:
    if not path.is_file():
        raise MissingArtifact(f"{path} does not exist")
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


# search history

def history_sink(run: RunDir) -> RecordSink:
    """Append each record to history.jsonl as soon as it is produced."""
    path = run.file(HISTORY_FILE)

    def sink(record: SearchRecord):
        append_jsonl(path, record)

    return sink


def reset_history(run: RunDir, keep_until: Optional[int] = None) -> None:
    """Drop the history file, or keep only search records before iteration keep_until (resume)."""
    path = run.file(HISTORY_FILE)
    if not path.exists():
        return
    if keep_until is None:
        path.unlink()
        return
    kept = [r for r in read_jsonl(path) if r["phase"] == "search" and r["iteration"] < keep_until]
    path.unlink()
    for record in kept:
        append_jsonl(path, record)


def read_history(run: RunDir, phase: Optional[str] = None) -> SearchHistory:
    records = [SearchRecord(**r) for r in read_jsonl(run.require(HISTORY_FILE))]
    if phase is not None:
        records = [r for r in records if r.phase == phase]
    return SearchHistory(records=records)


def write_alpha_trajectory(run: RunDir, history: SearchHistory, labels: Dict[str, List[str]]) -> Path:
    """Flat α table: one row per (iteration, stage, candidate)."""
    hashes = {r.iteration: r.config_hash for r in history.records}
    rows = [
        (iteration, stage, label, repr(alpha), hashes[iteration])
        for iteration, stage, label, alpha in history.alpha_rows(labels)
    ]
    path = write_csv(
        run.file(ALPHA_TRAJECTORY_FILE),
        ["iteration", "stage", "candidate_label", "alpha", "config_hash"],
        rows,
    )
    logger.info(f"Wrote {len(rows)} alpha rows to {path}")
    return path


# decoding

def write_decoded_policy(run: RunDir, policy: DecodedPolicy) -> List[Path]:
    paths = [write_json(run.file(POLICY_FILE), policy)]
    paths.append(write_json(run.file(ALPHA_SNAPSHOT_FILE), {
        "config_hash": policy.config_hash,
        "alpha_before_decoding": policy.alpha_before_decoding,
    }))

    perturbation = run.file(PERTURBATION_FILE)
    if perturbation.exists():
        perturbation.unlink()
    for report in policy.reports:
        append_jsonl(perturbation, {"config_hash": policy.config_hash, **report.model_dump(mode="json")})
    paths.append(perturbation)

    rows = [
        (
            s.stage_label, s.candidate.kind.value, s.candidate.strength.value,
            "" if s.original_lr is None else repr(s.original_lr),
            "" if s.fused_lr is None else repr(s.fused_lr),
            repr(s.alpha_at_decode), s.argmax_alpha_label, policy.config_hash,
        )
        for s in policy.selections
    ]
    paths.append(write_csv(
        run.file(POLICY_SUMMARY_CSV),
        ["stage", "kind", "strength", "original_lr", "fused_lr", "alpha", "argmax_alpha", "config_hash"],
        rows,
    ))
    paths.append(run.file(POLICY_SUMMARY_TXT))
    with open(paths[-1], "w") as handle:
        handle.write(render_policy_summary(policy))
    logger.info(f"Wrote decoded policy summary to {paths[-1]}")
    return paths


def render_policy_summary(policy: DecodedPolicy) -> str:
    lines = [f"# config_hash: {policy.config_hash}", f"{'stage':<12}{'policy':<14}{'lr':<22}alpha"]
    for s in policy.selections:
        lr = "-" if s.fused_lr is None else f"{s.original_lr:g} -> {s.fused_lr:.4g}"
        lines.append(f"{s.stage_label:<12}{s.candidate.kind.value:<14}{lr:<22}{s.alpha_at_decode:.3f}")
    return "\n".join(lines) + "\n"


def read_decoded_policy(run: RunDir) -> DecodedPolicy:
    return DecodedPolicy(**read_json(run.require(POLICY_FILE)))


def read_perturbation_reports(run: RunDir) -> List[PerturbationReport]:
    return [
        PerturbationReport(**{k: v for k, v in r.items() if k != "config_hash"})
        for r in read_jsonl(run.require(PERTURBATION_FILE))
    ]


# evaluation reports

def write_eval_report(run: RunDir, name: str, report: EvalReport, records: List[EpisodeRecord]) -> Path:
    path = write_json(run.report_path(name), report)
    episodes = run.episodes_path(name)
    if episodes.exists():
        episodes.unlink()
    for record in records:
        append_jsonl(episodes, {"config_hash": report.config_hash, **record.model_dump(mode="json")})
    logger.info(f"Wrote report '{name}' to {path}")
    return path


def read_reports(run: RunDir) -> "OrderedDict[str, EvalReport]":
    names = run.report_names()
    if not names:
        raise NothingToReport(f"run '{run.name}' holds no evaluation reports")
    return OrderedDict((name, EvalReport(**read_json(run.report_path(name)))) for name in names)


# comparison table

def format_cell(mean: float, ci: float) -> str:
    """Percent values rendered as "65.91 ± 0.83"."""
    return f"{mean:.2f} ± {ci:.2f}"


def task_setting(report: EvalReport) -> str:
    setting = f"{report.n_way}-way {report.k_shot}-shot {report.dataset}"
    if report.multicrop_views:
        setting += f" x{report.multicrop_views}crop"
    return setting


def check_config_hashes(reports: Dict[str, EvalReport], allow_mixed: bool = False) -> None:
    hashes = sorted({r.config_hash or "" for r in reports.values()})
    if len(hashes) > 1:
        if not allow_mixed:
            raise MixedConfigHashes(f"reports come from configs {', '.join(hashes)}; pass --allow-mixed to combine")
        logger.warning(f"Combining reports from configs {', '.join(hashes)}")


def comparison_table(
    reports: Dict[str, EvalReport], allow_mixed: bool = False
) -> Tuple[List[str], List[Tuple[str, Dict[str, EvalReport]]]]:
    """Rows are policies, columns are task settings."""
    if not reports:
        raise NothingToReport("no evaluation reports to tabulate")
    check_config_hashes(reports, allow_mixed)
    columns: List[str] = []
    rows: "OrderedDict[str, Dict[str, EvalReport]]" = OrderedDict()
    for name, report in reports.items():
        setting = task_setting(report)
        if setting not in columns:
            columns.append(setting)
        rows.setdefault(report.policy_name or name, {})[setting] = report
    return columns, list(rows.items())


def render_table(columns: List[str], rows) -> str:
    header = "| policy | " + " | ".join(columns) + " |"
    lines = [header, "|" + "---|" * (len(columns) + 1)]
    for policy, cells in rows:
        rendered = [
            format_cell(100 * cells[c].mean_accuracy, 100 * cells[c].ci95) if c in cells else "-"
            for c in columns
        ]
        lines.append(f"| {policy} | " + " | ".join(rendered) + " |")
    return "\n".join(lines) + "\n"


def write_report_outputs(run: RunDir, allow_mixed: bool = False) -> List[Path]:
    """Comparison table (markdown + CSV) and per-stage α plot data."""
    reports = read_reports(run)
    columns, rows = comparison_table(reports, allow_mixed)
    hashes = sorted({r.config_hash or "" for r in reports.values()})

    tables = run.path / TABLES_DIR
    tables.mkdir(parents=True, exist_ok=True)
    markdown = tables / "comparison.md"
    with open(markdown, "w") as handle:
        handle.write(f"<!-- config_hash: {', '.join(hashes)} -->\n")
        handle.write(render_table(columns, rows))
    wide = write_csv(
        tables / "comparison.csv",
        ["policy", *columns],
        [
            [policy] + [
                format_cell(100 * cells[c].mean_accuracy, 100 * cells[c].ci95) if c in cells else ""
                for c in columns
            ]
            for policy, cells in rows
        ],
    )
    long = write_csv(
        tables / "comparison_values.csv",
        ["policy", "setting", "mean_accuracy", "ci95", "n_episodes", "n_failed", "config_hash"],
        [
            [policy, c, repr(r.mean_accuracy), repr(r.ci95), r.n_episodes, r.n_failed, r.config_hash]
            for policy, cells in rows for c, r in cells.items()
        ],
    )
    paths = [markdown, wide, long, *write_alpha_plot_data(run)]
    logger.info(f"Report tables for {len(rows)} policies written to {tables}")
    return paths


def write_alpha_plot_data(run: RunDir) -> List[Path]:
    """One CSV per stage: iteration then one α column per candidate, search phase only."""
    try:
        history = read_history(run, phase="search")
    except MissingArtifact:
        logger.warning(f"Run '{run.name}' has no search history; skipping alpha plot data")
        return []
    if not history.records:
        return []
    labels = _candidate_labels(run, history)
    paths = []
    for stage, stage_labels in labels.items():
        rows = [
            [r.iteration, *[repr(a) for a in r.alphas[stage]], r.config_hash]
            for r in history.records if stage in r.alphas
        ]
        paths.append(write_csv(
            run.path / PLOT_DIR / f"alpha_{stage}.csv", ["iteration", *stage_labels, "config_hash"], rows,
        ))
    return paths


def write_candidate_labels(run: RunDir, labels: Dict[str, List[str]], config_hash: Optional[str]) -> Path:
    # a list keeps stage order (stage1..stageM, classifier)
    stages = [{"stage": stage, "labels": list(stage_labels)} for stage, stage_labels in labels.items()]
    return write_json(run.file(CANDIDATES_FILE), {"config_hash": config_hash, "stages": stages})


def read_candidate_labels(run: RunDir) -> "OrderedDict[str, List[str]]":
    stages = read_json(run.require(CANDIDATES_FILE))["stages"]
    return OrderedDict((entry["stage"], entry["labels"]) for entry in stages)


def _candidate_labels(run: RunDir, history: SearchHistory) -> Dict[str, List[str]]:
    try:
        return read_candidate_labels(run)
    except MissingArtifact:
        first = history.records[0].alphas
        return {stage: [f"candidate{i}" for i in range(len(alphas))] for stage, alphas in first.items()}
