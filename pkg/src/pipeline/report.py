"""
Edit-run report.

Written as indented JSON with sorted keys and no wall-clock fields, so two
runs with the same config and seed produce byte-identical files in wide
precision. Field list in docs/FORMATS.md.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

REPORT_VERSION = 1


class FrameScore(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_id: str
    camera_id: str
    timestamp: float
    held_out: bool = False
    edit_count: int = 0
    psnr_target: Optional[float] = Field(None, description="Against the buffer entry (or the original frame)")
    psnr_ground_truth: Optional[float] = Field(None, description="Against the oracle applied to the original frame")
    edit_locality: Optional[float] = None


class RunReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = REPORT_VERSION
    status: Literal["ok", "failed"] = "failed"
    error: Optional[Dict[str, str]] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    schedule: Dict[str, Any] = Field(default_factory=dict)
    stages: Dict[str, Any] = Field(default_factory=dict)
    loss_curve: List[Dict[str, Any]] = Field(default_factory=list)
    gaussian_counts: List[Dict[str, Any]] = Field(default_factory=list)
    buffer_timeline: List[Dict[str, Any]] = Field(default_factory=list)
    frames: List[FrameScore] = Field(default_factory=list)
    metrics: Dict[str, Optional[float]] = Field(default_factory=dict)


def _finite(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite(v) for v in value]
    return value


def dumps_report(report: RunReport) -> str:
    return json.dumps(_finite(report.model_dump()), indent=2, sort_keys=True) + "\n"


def write_report(report: RunReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(report), encoding="utf-8")
    return path


def read_report(path: Union[str, Path]) -> RunReport:
    return RunReport(**json.loads(Path(path).read_text(encoding="utf-8")))


def mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(sum(values) / len(values)) if values else None
