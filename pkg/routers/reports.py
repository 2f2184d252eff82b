from fastapi import APIRouter, HTTPException, Query, status
from typing import List

from models.report import EpisodeRecord, EvalReport
from models.run import ComparisonRow, ComparisonTable
from navigator.errors import MissingArtifact, MixedConfigHashes, NothingToReport
from storage.operations import comparison_table, format_cell, read_json, read_jsonl, read_reports
from storage.run_dir import resolve_run
from logging_config import logger

router = APIRouter()


# List a run's reports
@router.get(
    "/{run_name}/reports",
    response_model=List[str],
    summary="List evaluation report names of a run",
)
async def get_reports(run_name: str):
    try:
        return resolve_run(run_name).report_names()
    except MissingArtifact as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))


# Get one report
@router.get(
    "/{run_name}/reports/{report_name}",
    response_model=EvalReport,
    summary="Get one evaluation report",
    description="""
    Mean accuracy, 95% confidence interval and per-episode accuracies of one
    evaluation, with the config hash it was produced under.
    """,
)
async def get_report(run_name: str, report_name: str):
    try:
        run = resolve_run(run_name)
        if report_name not in run.report_names():
            raise MissingArtifact(f"run '{run_name}' has no report '{report_name}'")
        return EvalReport(**read_json(run.report_path(report_name)))
    except MissingArtifact as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))


@router.get(
    "/{run_name}/reports/{report_name}/episodes",
    response_model=List[EpisodeRecord],
    summary="Get the per-episode records behind a report",
)
async def get_report_episodes(run_name: str, report_name: str):
    try:
        run = resolve_run(run_name)
        if report_name not in run.report_names():
            raise MissingArtifact(f"run '{run_name}' has no report '{report_name}'")
        rows = read_jsonl(run.episodes_path(report_name)) if run.episodes_path(report_name).exists() else []
    except MissingArtifact as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))
    return [EpisodeRecord(**{k: v for k, v in row.items() if k != "config_hash"}) for row in rows]


# Comparison table
@router.get(
    "/{run_name}/table",
    response_model=ComparisonTable,
    summary="Get the comparison table (policies x task settings)",
    description="""
    Cells are rendered as `"65.91 ± 0.83"` (percent). Reports produced under
    different configs are refused with 400 unless `allow_mixed=true`.
    """,
)
async def get_table(run_name: str, allow_mixed: bool = Query(False)):
    try:
        reports = read_reports(resolve_run(run_name))
        columns, rows = comparison_table(reports, allow_mixed=allow_mixed)
    except (MissingArtifact, NothingToReport) as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))
    except MixedConfigHashes as e:
        logger.warning(f"Refusing mixed table for {run_name}: {str(e)}")
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    return ComparisonTable(
        columns=columns,
        rows=[
            ComparisonRow(
                policy=policy,
                cells={c: format_cell(100 * r.mean_accuracy, 100 * r.ci95) for c, r in cells.items()},
                mean_accuracy={c: r.mean_accuracy for c, r in cells.items()},
                ci95={c: r.ci95 for c, r in cells.items()},
            )
            for policy, cells in rows
        ],
        config_hashes=sorted({r.config_hash or "" for r in reports.values()}),
    )
