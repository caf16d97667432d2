from __future__ import annotations

import json
import os
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

RUN_KINDS = (
    "gen-corpus", "train", "quantize", "finetune", "eval",
    "analyze", "pack", "probe", "report",
)


# -------------------------
# Helpers
# -------------------------

def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


def _slugify(name: str) -> str:
    s = (name or "").strip().lower()
    out = []
    for ch in s:
        if ch.isalnum():
            out.append(ch)
        elif ch in (" ", "-", "_", "."):
            out.append("-")
    slug = "".join(out).strip("-")
    while "--" in slug:
        slug = slug.replace("--", "-")
    return slug or "run"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Écrit dans un fichier temporaire voisin puis renomme (os.replace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex[:8]}.tmp")
    try:
        with tmp.open("wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, ensure_ascii=False, indent=2) + "\n")


# -------------------------
# Data models
# -------------------------

@dataclass
class RunRecord:
    id: str
    kind: str
    model_id: str = ""
    scheme: str = "fp32"
    bits: int = 32
    outputs: Dict[str, str] = field(default_factory=dict)   # ex: {"checkpoint": "checkpoints/..npz"}
    metrics: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=_now)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind,
            "model_id": self.model_id,
            "scheme": self.scheme,
            "bits": int(self.bits),
            "outputs": dict(self.outputs or {}),
            "metrics": dict(self.metrics or {}),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunRecord":
        return cls(
            id=str(d.get("id") or uuid.uuid4().hex),
            kind=str(d.get("kind") or ""),
            model_id=str(d.get("model_id") or ""),
            scheme=str(d.get("scheme") or "fp32"),
            bits=int(d.get("bits", 32) or 32),
            outputs=dict(d.get("outputs") or {}),
            metrics=dict(d.get("metrics") or {}),
            created_at=str(d.get("created_at") or _now()),
        )


@dataclass
class Experiment:
    version: int = 1
    name: str = "experiment"
    root_dir: Path = field(default_factory=lambda: Path.cwd())
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)

    runs: List[RunRecord] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)

    # ---- folders ----
    @property
    def corpus_dir(self) -> Path:
        return (self.root_dir / "corpus").resolve()

    @property
    def checkpoints_dir(self) -> Path:
        return (self.root_dir / "checkpoints").resolve()

    @property
    def packs_dir(self) -> Path:
        return (self.root_dir / "packs").resolve()

    @property
    def reports_dir(self) -> Path:
        return (self.root_dir / "reports").resolve()

    @property
    def experiment_file(self) -> Path:
        return (self.root_dir / "experiment.json").resolve()

    def _ensure_dirs(self) -> None:
        for d in (self.corpus_dir, self.checkpoints_dir, self.packs_dir, self.reports_dir):
            d.mkdir(parents=True, exist_ok=True)

    # ---- lifecycle ----
    @classmethod
    def create(cls, root_dir: Path, name: str = "") -> "Experiment":
        root = Path(root_dir).expanduser().resolve()
        root.mkdir(parents=True, exist_ok=True)
        exp = cls(name=name or root.name or "experiment", root_dir=root)
        exp._ensure_dirs()
        exp.save()
        return exp

    @classmethod
    def load(cls, path: Path) -> "Experiment":
        """
        Charge une expérience à partir de :
        - un dossier contenant experiment.json
        - un chemin direct vers experiment.json
        """
        path = Path(path).expanduser().resolve()
        if path.is_dir():
            path = path / "experiment.json"

        if not path.exists():
            raise FileNotFoundError(f"experiment.json introuvable : {path}")

        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)

        if not isinstance(data, dict):
            raise ValueError("Fichier d'expérience invalide (JSON attendu).")

        version = int(data.get("version", 1) or 1)
        if version != 1:
            raise ValueError(f"Expérience invalide (version attendue = 1, reçu {version}).")

        exp = cls.from_dict(data)
        exp.root_dir = path.parent.resolve()
        exp._ensure_dirs()
        return exp

    @classmethod
    def open_or_create(cls, root_dir: Path) -> "Experiment":
        root = Path(root_dir).expanduser().resolve()
        if (root / "experiment.json").exists():
            return cls.load(root)
        return cls.create(root)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Experiment":
        return cls(
            version=int(d.get("version", 1) or 1),
            name=str(d.get("name") or "experiment"),
            created_at=str(d.get("created_at") or _now()),
            updated_at=str(d.get("updated_at") or _now()),
            runs=[RunRecord.from_dict(x) for x in (d.get("runs") or [])],
            history=[dict(x) for x in (d.get("history") or []) if isinstance(x, dict)],
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": int(self.version),
            "name": self.name,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "runs": [r.to_dict() for r in self.runs],
            "history": list(self.history),
        }

    def save(self) -> None:
        self.updated_at = _now()
        atomic_write_json(self.experiment_file, self.to_dict())

    # ---- history ----
    def add_history(self, action: str, **kwargs: Any) -> None:
        self.history.append({"t": _now(), "action": str(action), "meta": dict(kwargs or {})})

    # ---- runs ----
    def add_run(
        self,
        kind: str,
        *,
        model_id: str = "",
        scheme: str = "fp32",
        bits: int = 32,
        outputs: Optional[Dict[str, Path]] = None,
        metrics: Optional[Dict[str, Any]] = None,
    ) -> RunRecord:
        if kind not in RUN_KINDS:
            raise ValueError(f"Type de run inconnu : {kind!r}")
        rec = RunRecord(
            id=uuid.uuid4().hex,
            kind=kind,
            model_id=model_id,
            scheme=scheme,
            bits=int(bits),
            outputs={k: self.abs_to_rel(Path(v)) for k, v in (outputs or {}).items()},
            metrics=dict(metrics or {}),
        )
        self.runs.append(rec)
        self.add_history(kind, run_id=rec.id, model_id=model_id, scheme=scheme, bits=int(bits))
        return rec

    def runs_of(self, kind: str) -> List[RunRecord]:
        return [r for r in self.runs if r.kind == kind]

    def get_run(self, run_id: str) -> RunRecord:
        for r in self.runs:
            if r.id == run_id:
                return r
        raise KeyError(f"Run introuvable: {run_id}")

    # ---- path helpers ----
    def rel_to_abs(self, rel: str) -> Path:
        rel = str(rel).replace("\\", "/").lstrip("/")
        return (self.root_dir / rel).resolve()

    def abs_to_rel(self, p: Path) -> str:
        p = Path(p).resolve()
        try:
            rel = p.relative_to(self.root_dir.resolve())
        except ValueError:
            # hors de l'expérience : chemin absolu conservé
            return p.as_posix()
        return rel.as_posix()

    def checkpoint_path(self, tag: str) -> Path:
        return self.checkpoints_dir / f"{_slugify(tag)}.npz"

    def pack_path(self, tag: str) -> Path:
        return self.packs_dir / f"{_slugify(tag)}.qsvw"

    def report_path(self, tag: str, suffix: str) -> Path:
        return self.reports_dir / f"{_slugify(tag)}{suffix}"
