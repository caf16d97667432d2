from __future__ import annotations

"""Entraînement en deux étapes.

1. ``train_fp32`` : classification AAM-softmax en pleine précision.
2. ``finetune_quantized`` : à chaque pas, W maître → Ŵ (quantification factice),
   passe avant avec Ŵ, rétro-propagation STE vers W et α, mise à jour Adam.

Le journal d'entraînement est écrit en JSON, un objet par époque.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

import numpy as np

from app.core import ops
from app.core.config import TrainConfig
from app.core.errors import ConfigurationError, NumericError, TrainingError, UsageError
from app.core.models import AamHead, SpeakerModel, aam_logits
from app.core.quantizer import QuantizerConfig, QuantScheme, check_alpha
from app.core.seeding import rng_for
from app.core.tensor import Tape, Tensor, zero_grad
from app.services.corpus import SyntheticCorpus

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
ALPHA_FLOOR = 1e-4
EVAL_BATCH = 256


# -------------------------
# Adam
# -------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decay: Iterable[str] = (),
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Un pas d'Adam avec décroissance de poids découplée sur les noms de ``decay``.

    Les paramètres sans gradient (absents de ``grads``) sont inchangés.
    """
    decay = set(decay)
    step = state.step + 1
    bc1 = 1.0 - BETA1 ** step
    bc2 = 1.0 - BETA2 ** step
    new_params: Dict[str, np.ndarray] = {}
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.size != p.size:
            raise ConfigurationError(f"{name} : gradient {g.shape} pour un paramètre {p.shape}.")
        g = g.reshape(p.shape)
        m = BETA1 * state.m.get(name, np.zeros(p.shape)) + (1.0 - BETA1) * g
        v = BETA2 * state.v.get(name, np.zeros(p.shape)) + (1.0 - BETA2) * g * g
        p64 = p.astype(np.float64)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if name in decay and weight_decay:
            update = update + weight_decay * p64
        new_params[name] = (p64 - lr * update).astype(p.dtype)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=step)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Planning multi-paliers : lr0 · ratio^(nombre de paliers <= epoch), epoch à partir de 0."""
    passed = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.lr * (cfg.decay_ratio ** passed)


# -------------------------
# Résultats
# -------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: str
    lr: float
    loss: float
    accuracy: float
    alpha: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "stage": self.stage,
            "lr": self.lr,
            "loss": self.loss,
            "accuracy": self.accuracy,
            "alpha": dict(self.alpha),
        }


@dataclass
class TrainResult:
    model: SpeakerModel
    head: AamHead
    state: AdamState
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.history]

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].accuracy if self.history else float("nan")


# -------------------------
# Boucle
# -------------------------

def _trainables(model: SpeakerModel, head: AamHead) -> Dict[str, Tensor]:
    out = dict(model.parameters())
    out["head.weight"] = head.weight
    for name, alpha in model.alphas().items():
        out[f"{name}.alpha"] = alpha
    return out


def _decay_names(model: SpeakerModel) -> Set[str]:
    names = {f"{n}.weight" for n in model.weight_layers()}
    names.add("head.weight")
    return names


def _batch_loss(model: SpeakerModel, head: AamHead, x: np.ndarray, y: np.ndarray, train: bool) -> Tuple[Tensor, np.ndarray]:
    emb = model.forward(Tensor.wrap(x), train=train)
    logits = aam_logits(emb, head, y)
    loss = ops.softmax_cross_entropy(logits, y)
    cos = ops.cos_angle(Tensor.wrap(emb.data), Tensor.wrap(head.weight.data)).data
    return loss, np.argmax(cos, axis=1)


def classification_metrics(model: SpeakerModel, head: AamHead, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """(perte AAM moyenne, précision) en mode inférence, avec les poids effectifs courants."""
    losses, correct = [], 0
    for start in range(0, x.shape[0], EVAL_BATCH):
        xb, yb = x[start:start + EVAL_BATCH], y[start:start + EVAL_BATCH]
        loss, pred = _batch_loss(model, head, xb, yb, train=False)
        losses.append(loss.item() * xb.shape[0])
        correct += int(np.sum(pred == yb))
    return float(np.sum(losses) / x.shape[0]), correct / x.shape[0]


def _write_log(path: Optional[Path], record: EpochRecord) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def _run_epochs(
    model: SpeakerModel,
    head: AamHead,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    state: AdamState,
    log_path: Optional[Path],
    on_epoch: Optional[Callable[[EpochRecord], None]],
) -> TrainResult:
    decay = _decay_names(model)
    result = TrainResult(model=model, head=head, state=state)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng_for(seed, "batches", cfg.stage, epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            tensors = _trainables(model, head)
            zero_grad(tensors.values())
            try:
                with Tape() as tape:
                    loss, pred = _batch_loss(model, head, xb, yb, train=True)
                tape.backward(loss)
            except NumericError as e:
                raise TrainingError(
                    f"Divergence à l'époque {epoch} (stage {cfg.stage}, lr={lr:g}) : {e}"
                ) from e
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            arrays = {k: t.data for k, t in tensors.items()}
            new, result.state = optimizer_step(arrays, grads, result.state, lr, cfg.weight_decay, decay)
            for k, t in tensors.items():
                t.data = new[k]
            for alpha in model.alphas().values():
                alpha.data = np.maximum(alpha.data, ALPHA_FLOOR).astype(alpha.data.dtype)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(pred == yb))

        alphas = {k: a.item() for k, a in model.alphas().items()}
        collapsed = sorted(k for k, a in alphas.items() if a <= ALPHA_FLOOR)
        if collapsed:
            raise TrainingError(f"Effondrement de alpha (< {ALPHA_FLOOR:g}) à l'époque {epoch} : {collapsed}")
        rec = EpochRecord(epoch=epoch, stage=cfg.stage, lr=lr, loss=loss_sum / n, accuracy=correct / n, alpha=alphas)
        result.history.append(rec)
        _write_log(log_path, rec)
        logger.info("[%s] époque %d : lr=%.2e perte=%.4f précision=%.3f", cfg.stage, epoch, lr, rec.loss, rec.accuracy)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def train_fp32(
    model: SpeakerModel,
    corpus: SyntheticCorpus,
    cfg: TrainConfig,
    *,
    seed: int = 0,
    head: Optional[AamHead] = None,
    log_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Étape 1 : entraînement pleine précision."""
    cfg.validate()
    if cfg.stage != "fp32":
        raise ConfigurationError(f"train_fp32 attend stage=fp32 (reçu {cfg.stage!r}).")
    if model.quant_layers():
        raise UsageError("train_fp32 : le modèle a des couches quantifiées.")
    x, y = corpus.train_arrays()
    if head is None:
        head = AamHead.create(
            corpus.num_train_speakers, model.config.embed_dim, seed=seed, margin=cfg.margin, scale=cfg.scale
        )
    return _run_epochs(model, head, x, y, cfg, seed, AdamState(), log_path, on_epoch)


def quantization_assignment(model: SpeakerModel, cfg: TrainConfig) -> Dict[str, QuantizerConfig]:
    qc = QuantizerConfig(
        scheme=QuantScheme.parse(cfg.scheme), bits=int(cfg.bits), alpha=check_alpha(cfg.alpha_init)
    ).validate()
    return {name: qc for name in model.weight_layers()}


def finetune_quantized(
    model: SpeakerModel,
    corpus: SyntheticCorpus,
    cfg: TrainConfig,
    head: AamHead,
    *,
    seed: int = 0,
    assignment: Optional[Dict[str, QuantizerConfig]] = None,
    log_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Étape 2 : fine-tuning quantifié depuis un modèle pleine précision.

    α est initialisé à ``cfg.alpha_init`` sauf si le modèle est déjà quantifié
    (reprise). Avec ``cfg.epochs == 0`` on obtient une quantification post-entraînement.
    """
    cfg.validate()
    if cfg.stage != "qat":
        raise ConfigurationError(f"finetune_quantized attend stage=qat (reçu {cfg.stage!r}).")
    if not model.quant_layers():
        model.apply_quantization(assignment or quantization_assignment(model, cfg))
    x, y = corpus.train_arrays()
    return _run_epochs(model, head, x, y, cfg, seed, AdamState(), log_path, on_epoch)
