from fastapi import APIRouter, HTTPException, Query, status
from typing import List, Optional
import traceback

import yaml

from models.policy import DecodedPolicy
from models.report import SearchRecord
from models.run import PolicyRow, RunDetail, RunSummary
from navigator.errors import MissingArtifact, NavigatorError
from storage.operations import read_candidate_labels, read_decoded_policy, read_history
from storage.run_dir import (
    CONFIG_FILE,
    DECODED_CHECKPOINT,
    PRETRAINED_CHECKPOINT,
    SUPERNET_CHECKPOINT,
    RunDir,
    list_runs,
    resolve_run,
)
from logging_config import logger

router = APIRouter()


def _read_config(run: RunDir) -> dict:
    with open(run.require(CONFIG_FILE)) as handle:
        return yaml.safe_load(handle) or {}


def _config_hash(run: RunDir) -> Optional[str]:
    # dump_config writes the hash as the first comment line
    with open(run.require(CONFIG_FILE)) as handle:
        first = handle.readline().strip()
    return first.split(":", 1)[1].strip() if first.startswith("# config_hash:") else None


def _summary(run: RunDir) -> RunSummary:
    try:
        stages = list(read_candidate_labels(run))
    except MissingArtifact:
        stages = []
    return RunSummary(
        name=run.name,
        config_hash=_config_hash(run),
        stages=stages,
        has_pretrained=run.file(PRETRAINED_CHECKPOINT).exists(),
        has_supernet=run.file(SUPERNET_CHECKPOINT).exists(),
        has_decoded_policy=run.file(DECODED_CHECKPOINT).exists(),
        reports=run.report_names(),
    )


def _not_found(e: NavigatorError) -> HTTPException:
    logger.warning(f"Artifact lookup failed: {str(e)}")
    return HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))


# List runs
@router.get(
    "",
    response_model=List[RunSummary],
    summary="List experiment runs",
    description="""
    List every run directory under `RUNS_ROOT` that holds a `config.yaml`.

    ### Response Format

    ```json
    [
      {
        "name": "synthetic-5way1shot",
        "config_hash": "3f2a9c01d4e5b6a7",
        "stages": ["stage1", "stage2", "stage3", "stage4", "classifier"],
        "has_pretrained": true,
        "has_supernet": true,
        "has_decoded_policy": true,
        "reports": ["protonet-5way-1shot", "searched-5way-1shot"]
      }
    ]
    ```
    """,
)
async def get_runs():
    runs = list_runs()
    logger.info(f"Listing {len(runs)} runs")
    return [_summary(run) for run in runs]


# Get one run
@router.get(
    "/{run_name}",
    response_model=RunDetail,
    summary="Get a run's configuration and artifact list",
)
async def get_run(run_name: str):
    try:
        run = resolve_run(run_name)
        summary = _summary(run)
        return RunDetail(**summary.model_dump(), config=_read_config(run), artifacts=run.artifacts())
    except NavigatorError as e:
        raise _not_found(e)


# Search / decode history
@router.get(
    "/{run_name}/history",
    response_model=List[SearchRecord],
    summary="Get the per-iteration search history",
    description="""
    Records of the bi-level search and of the decode-time recovery and
    fine-tuning phases, one per outer iteration.

    ### Query Parameters

    - `phase` (string, optional): `search`, `recover-<stage>` or `finetune`.
    - `limit` (integer, optional): return only the last `limit` records.
    """,
)
async def get_history(
    run_name: str,
    phase: Optional[str] = Query(None, description="Filter by phase"),
    limit: Optional[int] = Query(None, ge=1, description="Return the last N records"),
):
    try:
        records = read_history(resolve_run(run_name), phase=phase).records
    except NavigatorError as e:
        raise _not_found(e)
    return records[-limit:] if limit else records


# Decoded policy
@router.get(
    "/{run_name}/policy",
    response_model=DecodedPolicy,
    summary="Get the decoded policy with its perturbation reports",
)
async def get_policy(run_name: str):
    try:
        return read_decoded_policy(resolve_run(run_name))
    except NavigatorError as e:
        raise _not_found(e)


@router.get(
    "/{run_name}/policy/summary",
    response_model=List[PolicyRow],
    summary="Get the per-stage policy summary (kind and fused learning rate)",
)
async def get_policy_summary(run_name: str):
    try:
        policy = read_decoded_policy(resolve_run(run_name))
    except NavigatorError as e:
        raise _not_found(e)
    except Exception as e:
        logger.error(f"Error reading policy for {run_name}: {str(e)}")
        logger.error(traceback.format_exc())
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Error reading policy: {str(e)}"
        )
    return [
        PolicyRow(
            stage=s.stage_label,
            kind=s.candidate.kind.value,
            original_lr=s.original_lr,
            fused_lr=s.fused_lr,
            alpha=s.alpha_at_decode,
            argmax_alpha=s.argmax_alpha_label,
        )
        for s in policy.selections
    ]
