from __future__ import annotations

"""Points de contrôle ``.npz``.

Clés : ``param/<nom>``, ``buffer/<nom>``, ``alpha/<couche>``, ``adam/m/<nom>``,
``adam/v/<nom>``, ``adam/step`` et ``meta`` (JSON : config modèle, étape,
assignation de quantification, époque, tête AAM).
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from app.core.errors import CorruptionError
from app.core.experiment import atomic_write_bytes
from app.core.models import AamHead, ModelConfig, SpeakerModel, build_model
from app.core.quantizer import QuantizerConfig
from app.core.tensor import Tensor
from app.services.training import AdamState

logger = logging.getLogger(__name__)

FORMAT = "qsv-checkpoint"


@dataclass
class Checkpoint:
    model: SpeakerModel
    head: AamHead
    state: AdamState
    stage: str = "fp32"
    epoch: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Path,
    model: SpeakerModel,
    head: AamHead,
    *,
    state: Optional[AdamState] = None,
    stage: str = "fp32",
    epoch: int = 0,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    arrays: Dict[str, np.ndarray] = {}
    for name, t in model.parameters().items():
        arrays[f"param/{name}"] = t.data
    arrays["param/head.weight"] = head.weight.data
    for name, b in model.buffers().items():
        arrays[f"buffer/{name}"] = b
    for name, a in model.alphas().items():
        arrays[f"alpha/{name}"] = a.data
    state = state or AdamState()
    for name, m in state.m.items():
        arrays[f"adam/m/{name}"] = m
    for name, v in state.v.items():
        arrays[f"adam/v/{name}"] = v
    arrays["adam/step"] = np.asarray(state.step, dtype=np.int64)

    meta = {
        "format": FORMAT,
        "model": model.config.full_precision().to_dict(),
        "quant": {k: {"scheme": q.scheme.value, "bits": q.bits} for k, q in model.config.quant.items()},
        "stage": stage,
        "epoch": int(epoch),
        "head": {"margin": head.margin, "scale": head.scale},
        **(extra or {}),
    }
    arrays["meta"] = np.asarray(json.dumps(meta, ensure_ascii=False))

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    logger.info("Point de contrôle écrit : %s (stage=%s, époque=%d)", path, stage, epoch)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Point de contrôle introuvable : {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (ValueError, OSError, zipfile.BadZipFile) as e:
        raise CorruptionError(f"Point de contrôle illisible ({path}) : {e}")
    if "meta" not in arrays:
        raise CorruptionError(f"{path} : entrée 'meta' absente.")
    try:
        meta = json.loads(str(arrays["meta"]))
    except json.JSONDecodeError as e:
        raise CorruptionError(f"{path} : métadonnées illisibles ({e}).")
    if meta.get("format") != FORMAT:
        raise CorruptionError(f"{path} : format inattendu {meta.get('format')!r}.")

    model = build_model(ModelConfig.from_dict(meta.get("model")))
    assignment: Dict[str, QuantizerConfig] = {}
    for layer, q in (meta.get("quant") or {}).items():
        alpha = arrays.get(f"alpha/{layer}")
        if alpha is None:
            raise CorruptionError(f"{path} : alpha absent pour la couche {layer}.")
        assignment[layer] = QuantizerConfig.from_dict({**q, "alpha": float(alpha)})
    if assignment:
        model.apply_quantization(assignment)

    try:
        for key, value in arrays.items():
            if key.startswith("param/") and key != "param/head.weight":
                model.set_tensor(key[len("param/"):], value)
            elif key.startswith("buffer/"):
                model.set_tensor(key[len("buffer/"):], value)
        for layer, alpha in model.alphas().items():
            alpha.data = np.asarray(arrays[f"alpha/{layer}"], dtype=alpha.data.dtype).reshape(alpha.shape)
        head_w = arrays["param/head.weight"]
    except KeyError as e:
        raise CorruptionError(f"{path} : tenseur manquant ou inconnu ({e}).")

    head_meta = meta.get("head") or {}
    head = AamHead(
        weight=Tensor(head_w, requires_grad=True, name="head.weight"),
        margin=float(head_meta.get("margin", 0.2)),
        scale=float(head_meta.get("scale", 30.0)),
    )
    state = AdamState(
        m={k[len("adam/m/"):]: v for k, v in arrays.items() if k.startswith("adam/m/")},
        v={k[len("adam/v/"):]: v for k, v in arrays.items() if k.startswith("adam/v/")},
        step=int(arrays.get("adam/step", 0)),
    )
    return Checkpoint(
        model=model,
        head=head,
        state=state,
        stage=str(meta.get("stage", "fp32")),
        epoch=int(meta.get("epoch", 0)),
        meta=meta,
    )
