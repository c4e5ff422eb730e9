from __future__ import annotations

import csv
import io
import threading
from collections.abc import Iterable
from pathlib import Path

from pydantic import ValidationError

from kansym.errors import ConfigError
from kansym.sweep.models import RunResult

RESULT_COLUMNS = ["dataset", "pipeline", "m", "lambda", "cycles", "seed", "factor",
                  "test_mse", "valid", "reason", "expression", "wall_ms"]


def _row(result: RunResult) -> list[str]:
    return [
        result.dataset,
        result.pipeline.value,
        str(result.width),
        repr(result.lam),
        str(result.cycles),
        str(result.seed),
        result.factor.value,
        "" if result.test_mse is None else repr(result.test_mse),
        "true" if result.valid else "false",
        "" if result.reason is None else result.reason.value,
        result.expression,
        repr(result.wall_ms),
    ]


def _parse_row(row: dict[str, str]) -> RunResult:
    return RunResult(
        dataset=row["dataset"],
        pipeline=row["pipeline"],  # type: ignore[arg-type]
        factor=row["factor"],  # type: ignore[arg-type]
        width=int(row["m"]),
        lam=float(row["lambda"]),
        cycles=int(row["cycles"]),
        seed=int(row["seed"]),
        test_mse=float(row["test_mse"]) if row["test_mse"] else None,
        valid=row["valid"] == "true",
        reason=row["reason"] or None,  # type: ignore[arg-type]
        expression=row["expression"],
        wall_ms=float(row["wall_ms"] or 0.0),
    )


def format_results(results: Iterable[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    writer.writerows(_row(r) for r in results)
    return buf.getvalue()


def write_results(results: Iterable[RunResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_results(results))
    return path


def read_results(path: str | Path) -> list[RunResult]:
    """Parse a results CSV, rejecting files whose header or rows do not match."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"results file not found: {path}")
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ConfigError(
                f"{path}: expected columns {','.join(RESULT_COLUMNS)}, "
                f"got {','.join(reader.fieldnames or [])}"
            )
        results = []
        for n, row in enumerate(reader, start=2):
            try:
                results.append(_parse_row(row))
            except (ValueError, ValidationError, KeyError, TypeError) as e:
                raise ConfigError(f"{path}, line {n}: {e}") from e
    return results


class ResultLedger:
    """Thread-safe record of completed runs, journalled for resume.

    Results are keyed by (dataset, pipeline, configuration); each new result is
    appended to the journal as soon as it is recorded so an interrupted sweep
    can skip finished work.
    """

    def __init__(self, journal: str | Path | None = None) -> None:
        self._records: dict[tuple, RunResult] = {}
        self._lock = threading.Lock()
        self.journal = Path(journal) if journal is not None else None

    @classmethod
    def resume(cls, output: str | Path, journal: str | Path) -> ResultLedger:
        """Ledger seeded from a finished results file and any partial journal."""
        ledger = cls(journal)
        for path in (Path(output), Path(journal)):
            if path.is_file() and path.stat().st_size:
                for result in read_results(path):
                    ledger._records.setdefault(result.key, result)
        return ledger

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def get(self, key: tuple) -> RunResult | None:
        with self._lock:
            return self._records.get(key)

    def done(self, key: tuple) -> bool:
        with self._lock:
            return key in self._records

    def record(self, result: RunResult) -> RunResult:
        with self._lock:
            if result.key in self._records:
                return self._records[result.key]
            self._records[result.key] = result
            if self.journal is not None:
                fresh = not self.journal.is_file() or not self.journal.stat().st_size
                with self.journal.open("a", newline="") as f:
                    writer = csv.writer(f, lineterminator="\n")
                    if fresh:
                        writer.writerow(RESULT_COLUMNS)
                    writer.writerow(_row(result))
        return result

    def discard_journal(self) -> None:
        with self._lock:
            if self.journal is not None and self.journal.exists():
                self.journal.unlink()
