from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.core.errors import ResultsParseError
from src.core.schemas import ProfileReport, RDCurve, RDRecord

RESULTS_SCHEMA_VERSION = 1
TRAINING_LOG_SCHEMA_VERSION = 1


class ResultsFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = RESULTS_SCHEMA_VERSION
    records: List[RDRecord] = Field(default_factory=list)
    profiles: List[ProfileReport] = Field(default_factory=list)

    def curves(self) -> List[RDCurve]:
        """One curve per model_id, in first-seen order."""
        grouped: Dict[str, list] = {}
        for record in self.records:
            grouped.setdefault(record.model_id, []).append(record.point)
        return [RDCurve(points=points, model_id=model_id) for model_id, points in grouped.items()]

    def curve(self, model_id: Optional[str] = None) -> RDCurve:
        curves = self.curves()
        if not curves:
            raise ResultsParseError("<results>", "no RD records")
        if model_id is None:
            if len(curves) > 1:
                ids = ", ".join(c.model_id for c in curves)
                raise ResultsParseError("<results>", f"several models ({ids}); pick one with --model-id")
            return curves[0]
        for c in curves:
            if c.model_id == model_id:
                return c
        raise ResultsParseError("<results>", f"no records for model_id '{model_id}'")


class ResultsStore:
    """Read/modify/write access to one RD results file."""

    def __init__(self, path):
        self.path = Path(path)
        logger.debug(f"ResultsStore initialized for {self.path}")

    def load(self, missing_ok: bool = False) -> ResultsFile:
        """
        Parse the results file.

        Args:
            missing_ok: Return an empty ResultsFile when the file does not exist

        Returns:
            ResultsFile

        Raises:
            ResultsParseError: With the line number for JSON syntax errors
        """
        if not self.path.exists():
            if missing_ok:
                return ResultsFile()
            raise ResultsParseError(self.path, "file not found")

        text = self.path.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ResultsParseError(self.path, e.msg, line=e.lineno) from e

        if not isinstance(raw, dict) or "schema_version" not in raw:
            raise ResultsParseError(self.path, "missing schema_version", line=1)
        if raw["schema_version"] != RESULTS_SCHEMA_VERSION:
            raise ResultsParseError(
                self.path,
                f"schema_version {raw['schema_version']} is not supported "
                f"(expected {RESULTS_SCHEMA_VERSION})",
            )
        try:
            return ResultsFile.model_validate(raw)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first["loc"])
            raise ResultsParseError(
                self.path, f"{where}: {first['msg']}", line=_line_of(text, first["loc"])
            ) from e

    def save(self, results: ResultsFile) -> Path:
        results.records.sort(key=lambda r: (r.model_id, r.point.label))
        results.profiles.sort(key=lambda p: p.model_id)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = results.model_dump(mode="json")
        self.path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return self.path

    def upsert_records(self, records: List[RDRecord]) -> ResultsFile:
        """Insert records, replacing any with the same (model_id, label)."""
        results = self.load(missing_ok=True)
        keys = {(r.model_id, r.point.label) for r in records}
        kept = [r for r in results.records if (r.model_id, r.point.label) not in keys]
        replaced = len(results.records) - len(kept)
        results.records = kept + list(records)
        self.save(results)
        logger.info(f"Wrote {len(records)} RD record(s) to {self.path} ({replaced} replaced)")
        return results

    def upsert_profile(self, report: ProfileReport) -> ResultsFile:
        results = self.load(missing_ok=True)
        results.profiles = [p for p in results.profiles if p.model_id != report.model_id]
        results.profiles.append(report)
        self.save(results)
        logger.info(f"Wrote profile of {report.model_id} to {self.path}")
        return results


def _line_of(text: str, loc) -> Optional[int]:
    """Best-effort line of the list item a validation error points into."""
    if len(loc) < 2 or not isinstance(loc[1], int):
        return None
    section, index = f'"{loc[0]}"', loc[1]
    lines = text.splitlines()
    start = next((i for i, line in enumerate(lines) if section in line), None)
    if start is None:
        return None
    depth, seen = 0, -1
    for i in range(start, len(lines)):
        stripped = lines[i].strip()
        if stripped.startswith("{") and depth == 0:
            seen += 1
            if seen == index:
                return i + 1
        depth += stripped.count("{") - stripped.count("}")
    return None


class TrainingLog:
    """Append-only JSON-lines log of training steps and evaluations."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, step: int, **values: Any) -> None:
        record = {"v": TRAINING_LOG_SCHEMA_VERSION, "kind": kind, "step": step, **values}
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        records = []
        with open(self.path) as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ResultsParseError(self.path, e.msg, line=lineno) from e
        return records
