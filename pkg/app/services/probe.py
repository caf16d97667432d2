from __future__ import annotations

"""Sondes d'information sur des embeddings figés.

Un MLP à deux couches FC (ReLU entre les deux) est entraîné à prédire un
attribut (genre, scène, style) à partir des embeddings d'énoncés des locuteurs
d'entraînement ; la précision sur la partition de test mesure l'information
conservée par le modèle (pleine précision ou quantifié).
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binom

from app.core import ops
from app.core.config import ProbeConfig
from app.core.errors import ConfigurationError, UsageError
from app.core.experiment import atomic_write_json
from app.core.models import SpeakerModel
from app.core.seeding import rng_for
from app.core.tensor import Tape, Tensor, zero_grad
from app.services.corpus import Utterance
from app.services.training import AdamState, optimizer_step

logger = logging.getLogger(__name__)

TASKS = ("gender", "scene", "style")
EMBED_BATCH = 128


# -------------------------
# Types
# -------------------------

@dataclass
class EmbeddingSet:
    ids: List[str]
    embeddings: np.ndarray              # (N, E)
    labels: Dict[str, np.ndarray]       # tâche → (N,) entiers
    speakers: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ProbeTask:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    def validate(self) -> "ProbeTask":
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            if np.unique(y).size < 2:
                raise UsageError(f"Sonde {self.name} : une seule classe dans la partition {split}.")
        return self

    @property
    def chance(self) -> float:
        """Taux de la classe majoritaire sur la partition de test."""
        return float(np.bincount(self.y_test, minlength=self.num_classes).max() / self.y_test.size)


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    chance: float
    train_size: int
    test_size: int
    num_classes: int

    def to_dict(self, **extra: object) -> Dict[str, object]:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "chance": self.chance,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "num_classes": self.num_classes,
            **extra,
        }


class ProbeClassifier:
    """FC → ReLU → FC."""

    def __init__(self, in_dim: int, hidden: int, classes: int, seed: int, tag: str = "probe"):
        rng = rng_for(seed, "probe", tag, "init")
        self.w1 = Tensor(rng.standard_normal((in_dim, hidden)) * np.sqrt(2.0 / in_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((hidden, classes)) * np.sqrt(1.0 / hidden), requires_grad=True)
        self.b2 = Tensor(np.zeros(classes), requires_grad=True)

    def parameters(self) -> Dict[str, Tensor]:
        return {"fc1.weight": self.w1, "fc1.bias": self.b1, "fc2.weight": self.w2, "fc2.bias": self.b2}

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(ops.add(ops.matmul(x, self.w1), self.b1))
        return ops.add(ops.matmul(h, self.w2), self.b2)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(Tensor.wrap(x)).data, axis=1)


# -------------------------
# Embeddings et tâches
# -------------------------

def extract_embeddings(model: SpeakerModel, utterances: Sequence[Utterance]) -> EmbeddingSet:
    """Un embedding par énoncé (passe avant sur l'énoncé entier)."""
    if not utterances:
        raise UsageError("Aucun énoncé à projeter.")
    by_length: Dict[int, List[int]] = {}
    for i, u in enumerate(utterances):
        by_length.setdefault(u.frames.shape[0], []).append(i)
    emb = np.zeros((len(utterances), model.config.embed_dim), dtype=np.float64)
    for idx in by_length.values():
        for start in range(0, len(idx), EMBED_BATCH):
            sel = idx[start:start + EMBED_BATCH]
            emb[sel] = model.embed(np.stack([utterances[i].frames for i in sel]))
    return EmbeddingSet(
        ids=[u.id for u in utterances],
        embeddings=emb,
        labels={
            "gender": np.asarray([u.gender for u in utterances], dtype=np.int64),
            "scene": np.asarray([u.scene for u in utterances], dtype=np.int64),
            "style": np.asarray([u.style for u in utterances], dtype=np.int64),
        },
        speakers=np.asarray([u.speaker for u in utterances], dtype=np.int64),
    )


def _speaker_split(data: EmbeddingSet, labels: np.ndarray, cfg: ProbeConfig, seed: int, name: str) -> Tuple[np.ndarray, np.ndarray]:
    """Locuteurs de test tirés à tour de rôle dans chaque classe (classe majoritaire du locuteur)."""
    speakers = np.asarray(data.speakers)
    order = rng_for(seed, "probe", name, "split").permutation(np.unique(speakers))
    if order.size < 2:
        raise UsageError(f"Sonde {name} : au moins 2 locuteurs nécessaires.")
    major = {int(s): int(np.bincount(labels[speakers == s]).argmax()) for s in order}
    queues = {c: [s for s in order if major[int(s)] == c] for c in sorted(set(major.values()))}
    n_test = order.size - int(round(cfg.train_fraction * order.size))
    n_test = min(max(n_test, len(queues), 1), order.size - 1)
    test_spk: List[int] = []
    while len(test_spk) < n_test:
        for c in queues:
            if queues[c] and len(test_spk) < n_test:
                test_spk.append(int(queues[c].pop(0)))
    is_test = np.isin(speakers, test_spk)
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def build_task(
    name: str,
    data: EmbeddingSet,
    cfg: ProbeConfig,
    seed: int,
    labels: Optional[np.ndarray] = None,
) -> ProbeTask:
    """Partition par locuteur (aucun locuteur commun aux deux parties), standardisation sur la partie train."""
    if labels is None:
        if name not in data.labels:
            raise ConfigurationError(f"Tâche de sonde inconnue : {name!r} (attendu {TASKS}).")
        labels = data.labels[name]
    labels = np.asarray(labels, dtype=np.int64)
    tr, te = _speaker_split(data, labels, cfg, seed, name)
    x = data.embeddings
    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return ProbeTask(
        name=name,
        x_train=((x[tr] - mean) / std).astype(np.float32),
        y_train=labels[tr],
        x_test=((x[te] - mean) / std).astype(np.float32),
        y_test=labels[te],
        num_classes=int(labels.max()) + 1,
    ).validate()


def shuffled(task: ProbeTask, seed: int) -> ProbeTask:
    """Contrôle nul : étiquettes permutées dans chaque partition."""
    return replace(
        task,
        name=f"{task.name}-shuffled",
        y_train=rng_for(seed, "probe", task.name, "shuffle", "train").permutation(task.y_train),
        y_test=rng_for(seed, "probe", task.name, "shuffle", "test").permutation(task.y_test),
    )


def run_probe(task: ProbeTask, cfg: ProbeConfig, seed: int) -> ProbeResult:
    """Entraîne le classifieur (Adam) et retourne la précision sur la partition de test."""
    task.validate()
    cfg.validate()
    clf = ProbeClassifier(task.x_train.shape[1], cfg.hidden, task.num_classes, seed, task.name)
    params = clf.parameters()
    state = AdamState()
    n = task.x_train.shape[0]
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "probe", task.name, "batches", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            zero_grad(params.values())
            with Tape() as tape:
                loss = ops.softmax_cross_entropy(clf.forward(Tensor.wrap(task.x_train[idx])), task.y_train[idx])
            tape.backward(loss)
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            new, state = optimizer_step({k: t.data for k, t in params.items()}, grads, state, cfg.lr)
            for k, t in params.items():
                t.data = new[k]
    accuracy = float(np.mean(clf.predict(task.x_test) == task.y_test))
    logger.info("Sonde %s : précision %.3f (hasard %.3f)", task.name, accuracy, task.chance)
    return ProbeResult(
        task=task.name,
        accuracy=accuracy,
        chance=task.chance,
        train_size=n,
        test_size=int(task.y_test.size),
        num_classes=task.num_classes,
    )


def binomial_interval(p: float, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Précisions compatibles avec le hasard ``p`` sur ``n`` essais (quantiles binomiaux)."""
    if n < 1:
        raise UsageError("binomial_interval : n doit être >= 1.")
    lo, hi = binom.interval(confidence, int(n), float(p))
    return float(lo) / n, float(hi) / n


def write_probe_report(path: Path, results: Sequence[ProbeResult], *, model_id: str, scheme: str, bits: int) -> None:
    rows = [r.to_dict(model_id=model_id, scheme=scheme, bits=int(bits)) for r in results]
    atomic_write_json(Path(path), {"probes": rows})
