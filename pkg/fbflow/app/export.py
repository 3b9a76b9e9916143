from __future__ import annotations

import csv
import hashlib
import logging
from pathlib import Path
from typing import Iterable, List, Sequence

from .models import RunSummary

logger = logging.getLogger(__name__)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    """Пишет CSV с окончаниями строк '\\n', возвращает sha256 файла."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        count = 0
        for row in rows:
            writer.writerow(row)
            count += 1
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    logger.info(f"Записан {path} ({count} строк)")
    return digest


def write_summary(path: Path, summary: RunSummary) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_csv(path: Path) -> List[List[str]]:
    with path.open("r", encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))
