"""Read-only HTTP access to audit reports and evaluation metrics."""

import json
import logging
from contextlib import asynccontextmanager
from pathlib import Path
from typing import NoReturn

from fastapi import FastAPI, HTTPException, Request, status
from pydantic import ValidationError

from . import __version__
from .config import Settings
from .evalstat import MetricError, accuracy_f1, binomial_test, pr_ap, roc_auc
from .models import (
    AuditReport,
    BinomialResult,
    EvaluatePayload,
    EvaluateResult,
    LabelMode,
    SignificancePayload,
)
from .pipeline import report_file

# Configure logging
settings = Settings()
logging.basicConfig(
    level=settings.log_level,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

DEFAULT_REPORTS_DIR = Path("miaaudit-out")


# Resolve the report directory once on app startup
# see https://fastapi.tiangolo.com/advanced/events/
@asynccontextmanager
async def resolve_reports_dir_on_startup(app: FastAPI):
    app.state.reports_dir = settings.out or DEFAULT_REPORTS_DIR
    logger.info(f"Serving reports from {app.state.reports_dir}")
    yield


app = FastAPI(
    title="miaaudit",
    description="Membership-inference audit reports and evaluation metrics",
    version=__version__,
    lifespan=resolve_reports_dir_on_startup,
)


def _422(msg: str) -> NoReturn:
    """Helper to return 422"""
    raise HTTPException(
        status_code=422,
        detail=msg,
    )


@app.get("/v1/reports")
async def list_reports(request: Request) -> list[LabelMode]:
    """Label modes with a report in the output directory."""
    reports_dir: Path = request.app.state.reports_dir
    return [mode for mode in LabelMode if (reports_dir / report_file(mode)).is_file()]


@app.get("/v1/reports/{label_mode}")
async def get_report(label_mode: LabelMode, request: Request) -> AuditReport:
    path: Path = request.app.state.reports_dir / report_file(label_mode)
    if not path.is_file():
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"No {label_mode} report",
        )
    try:
        return AuditReport.from_json_file(path)
    except (json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Stored report {path} is malformed: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Stored report is malformed",
        ) from e


@app.post("/v1/evaluate")
async def evaluate(payload: EvaluatePayload) -> EvaluateResult:
    """AUC, AP and thresholded accuracy/F1 of the posted scores."""
    try:
        decisions = [int(score >= payload.threshold) for score in payload.scores]
        accuracy, f1 = accuracy_f1(decisions, payload.labels)
        return EvaluateResult(
            auc=roc_auc(payload.scores, payload.labels).auc,
            average_precision=pr_ap(payload.scores, payload.labels).average_precision,
            accuracy=accuracy,
            f1=f1,
        )
    except MetricError as e:
        logger.warning(f"Evaluation rejected: {e}")
        _422(str(e))


@app.post("/v1/significance")
async def significance(payload: SignificancePayload) -> BinomialResult:
    """Exact binomial test of the hit count against chance."""
    try:
        return binomial_test(payload.successes, payload.trials)
    except MetricError as e:
        _422(str(e))
