from __future__ import annotations

"""Tableau comparatif (modèle, schéma, bitwidth, taille, EER) à partir des
résumés d'évaluation."""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from app.core.experiment import Experiment, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

COLUMNS = (
    "model_id", "scheme", "bits", "params", "params_m", "size_bytes", "size_mb",
    "compression", "eer", "eer_norm", "run_id",
)


@dataclass
class ReportRow:
    model_id: str
    scheme: str
    bits: int
    params: int
    size_bytes: int
    size_fp32_bytes: int
    eer: float
    eer_norm: Optional[float] = None
    run_id: str = ""

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def size_mb(self) -> float:
        return self.size_bytes / 1e6

    @property
    def compression(self) -> float:
        return self.size_fp32_bytes / self.size_bytes if self.size_bytes else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d.update(params_m=self.params_m, size_mb=self.size_mb, compression=self.compression)
        return d

    @classmethod
    def from_summary(cls, d: Dict[str, Any], run_id: str = "") -> "ReportRow":
        try:
            return cls(
                model_id=str(d["model_id"]),
                scheme=str(d.get("scheme") or "fp32"),
                bits=int(d.get("bits", 32)),
                params=int(d["params"]),
                size_bytes=int(d["size_bytes"]),
                size_fp32_bytes=int(d.get("size_fp32_bytes") or d["size_bytes"]),
                eer=float(d["eer"]),
                eer_norm=None if d.get("eer_norm") is None else float(d["eer_norm"]),
                run_id=str(run_id or d.get("run_id") or ""),
            )
        except KeyError as e:
            raise ValueError(f"Résumé d'évaluation incomplet : clé {e} absente.")


def sort_rows(rows: Iterable[ReportRow]) -> List[ReportRow]:
    return sorted(rows, key=lambda r: (r.model_id, -r.bits, r.scheme, r.run_id))


def rows_from_experiment(exp: Experiment) -> List[ReportRow]:
    rows = [ReportRow.from_summary(r.metrics, run_id=r.id) for r in exp.runs_of("eval")]
    return sort_rows(rows)


def rows_from_files(paths: Sequence[Path]) -> List[ReportRow]:
    rows = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"Résumé introuvable : {p}")
        with p.open("r", encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError(f"{p} : objet JSON attendu.")
        rows.append(ReportRow.from_summary(data))
    return sort_rows(rows)


def write_report_json(path: Path, rows: Sequence[ReportRow]) -> None:
    atomic_write_json(Path(path), {"rows": [r.to_dict() for r in rows]})


def write_report_csv(path: Path, rows: Sequence[ReportRow]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(COLUMNS), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r.to_dict())
    atomic_write_text(Path(path), buf.getvalue())
