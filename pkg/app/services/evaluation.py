from __future__ import annotations

"""Évaluation en vérification du locuteur.

- segments glissants de 400 trames (4 s), pas de 300 trames (1 s de recouvrement) ;
- score d'un essai = moyenne des cosinus sur toutes les paires de segments ;
- AS-norm sur une cohorte (embeddings moyens des locuteurs d'entraînement) ;
- EER par balayage des seuils (roc_curve), interpolé au croisement FAR = FRR.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import roc_curve

from app.core.config import EvalConfig
from app.core.errors import ConfigurationError, DimensionError, NumericError, UsageError
from app.core.experiment import atomic_write_text
from app.core.models import SpeakerModel
from app.services.corpus import SyntheticCorpus, Trial

logger = logging.getLogger(__name__)

WINDOW = 400
HOP = 300
SIGMA_FLOOR = 1e-8


# -------------------------
# Types
# -------------------------

@dataclass
class ScoreSet:
    trials: List[Trial]
    raw: np.ndarray
    norm: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (len(self.trials),):
            raise DimensionError(f"{self.raw.shape[0]} scores pour {len(self.trials)} essais.")
        if not np.all(np.isfinite(self.raw)):
            raise NumericError("Scores non finis.")

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([t.target for t in self.trials], dtype=bool)

    def best(self) -> np.ndarray:
        return self.raw if self.norm is None else self.norm


@dataclass
class EvalResult:
    scores: ScoreSet
    eer: float
    threshold: float
    eer_norm: Optional[float] = None
    threshold_norm: Optional[float] = None
    top_k: int = 0
    segments: Dict[str, int] = field(default_factory=dict)

    def summary(self) -> Dict[str, object]:
        return {
            "trials": len(self.scores.trials),
            "targets": int(self.scores.labels.sum()),
            "eer": self.eer,
            "threshold": self.threshold,
            "eer_norm": self.eer_norm,
            "threshold_norm": self.threshold_norm,
            "top_k": self.top_k,
        }


# -------------------------
# Segments
# -------------------------

def segment_bounds(num_frames: int, window: int = WINDOW, hop: int = HOP) -> List[Tuple[int, int]]:
    if num_frames <= 0:
        raise DimensionError("Énoncé vide.")
    if num_frames < window:
        return [(0, num_frames)]
    return [(s, s + window) for s in range(0, num_frames - window + 1, hop)]


def segment_embed(frames: np.ndarray, model: SpeakerModel, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """Embeddings (S, E) des segments d'un énoncé (T, F)."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DimensionError(f"Trames (T, F) non vides attendues, reçu {frames.shape}.")
    bounds = segment_bounds(frames.shape[0], window, hop)
    batch = np.stack([frames[a:b] for a, b in bounds])
    return np.asarray(model.embed(batch), dtype=np.float64)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise NumericError("Embedding de norme nulle.")
    return x / n


def trial_score(enroll: np.ndarray, test: np.ndarray) -> float:
    """Moyenne des cosinus sur les paires (segment d'enrôlement, segment de test)."""
    e, t = _unit_rows(enroll), _unit_rows(test)
    if e.shape[0] == 0 or t.shape[0] == 0:
        raise DimensionError("Segments vides.")
    if e.shape[1] != t.shape[1]:
        raise DimensionError(f"Dimensions d'embedding {e.shape[1]} et {t.shape[1]}.")
    return float(np.mean(e @ t.T))


# -------------------------
# AS-norm
# -------------------------

def cohort_stats(segments: np.ndarray, cohort: np.ndarray, top_k: int) -> Tuple[float, float]:
    """(μ, σ) des ``top_k`` meilleurs scores de l'énoncé contre la cohorte."""
    cohort = _unit_rows(cohort)
    if not 2 <= top_k <= cohort.shape[0]:
        raise ConfigurationError(f"top_k={top_k} hors de [2, {cohort.shape[0]}] (taille de cohorte).")
    scores = np.mean(_unit_rows(segments) @ cohort.T, axis=0)
    top = np.sort(scores)[::-1][:top_k]
    mu, sigma = float(np.mean(top)), float(np.std(top))
    if sigma < SIGMA_FLOOR:
        logger.warning("AS-norm : variance de cohorte nulle, plancher %.0e appliqué.", SIGMA_FLOOR)
        sigma = SIGMA_FLOOR
    return mu, sigma


def as_norm_score(score: float, mu_e: float, sigma_e: float, mu_t: float, sigma_t: float) -> float:
    """s' = ½[(s − μ_e)/σ_e + (s − μ_t)/σ_t]."""
    return 0.5 * ((score - mu_e) / sigma_e + (score - mu_t) / sigma_t)


def as_norm(raw: ScoreSet, segments: Dict[str, np.ndarray], cohort: np.ndarray, top_k: int) -> ScoreSet:
    """Normalise chaque score brut avec les statistiques de cohorte des deux côtés."""
    stats: Dict[str, Tuple[float, float]] = {}

    def side(utt: str) -> Tuple[float, float]:
        if utt not in stats:
            stats[utt] = cohort_stats(segments[utt], cohort, top_k)
        return stats[utt]

    norm = np.empty_like(raw.raw)
    for i, (trial, s) in enumerate(zip(raw.trials, raw.raw)):
        mu_e, sd_e = side(trial.enroll)
        mu_t, sd_t = side(trial.test)
        norm[i] = as_norm_score(float(s), mu_e, sd_e, mu_t, sd_t)
    return ScoreSet(trials=list(raw.trials), raw=raw.raw.copy(), norm=norm)


# -------------------------
# EER
# -------------------------

def compute_eer(scores: Sequence[float], labels: Sequence[bool]) -> Tuple[float, float]:
    """(EER, seuil). FAR(t) = part des non-cibles >= t ; FRR(t) = part des cibles < t."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("compute_eer : scores et labels de même longueur attendus.")
    if labels.all() or not labels.any():
        raise UsageError("compute_eer : au moins un essai cible et un non-cible sont nécessaires.")
    far, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    frr = 1.0 - tpr
    diff = far - frr
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(far[i]), _finite_threshold(thresholds, i)
    # interpolation linéaire entre les points i-1 et i
    w = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + w * (far[i] - far[i - 1])
    t_prev = thresholds[i - 1] if np.isfinite(thresholds[i - 1]) else thresholds[i]
    return float(eer), float(t_prev + w * (thresholds[i] - t_prev))


def _finite_threshold(thresholds: np.ndarray, i: int) -> float:
    if np.isfinite(thresholds[i]):
        return float(thresholds[i])
    return float(thresholds[min(i + 1, thresholds.size - 1)])


# -------------------------
# Pipeline
# -------------------------

def cohort_embeddings(model: SpeakerModel, corpus: SyntheticCorpus, cfg: EvalConfig) -> np.ndarray:
    """Embedding moyen (normalisé) de chaque locuteur d'entraînement."""
    rows = []
    for spk in range(corpus.num_train_speakers):
        utts = [u for u in corpus.train if u.speaker == spk]
        lengths = {u.frames.shape[0] for u in utts}
        if len(lengths) == 1 and lengths.pop() < cfg.window:
            # un seul segment par énoncé : un batch par locuteur
            segs = np.asarray(model.embed(np.stack([u.frames for u in utts])), dtype=np.float64)
        else:
            segs = np.concatenate([segment_embed(u.frames, model, cfg.window, cfg.hop) for u in utts])
        rows.append(np.mean(_unit_rows(segs), axis=0))
    return np.stack(rows)


def evaluate(
    model: SpeakerModel,
    corpus: SyntheticCorpus,
    trials: Sequence[Trial],
    cfg: EvalConfig,
    *,
    normalize: bool = True,
) -> EvalResult:
    cfg.validate()
    trials = list(trials)
    if not trials:
        raise UsageError("Aucun essai à évaluer.")
    needed = sorted({t.enroll for t in trials} | {t.test for t in trials})
    missing = [u for u in needed if u not in corpus]
    if missing:
        raise ConfigurationError(f"Énoncés inconnus dans les essais : {missing[:5]}")
    segments = {u: segment_embed(corpus.get(u).frames, model, cfg.window, cfg.hop) for u in needed}
    raw = ScoreSet(trials=trials, raw=np.asarray([trial_score(segments[t.enroll], segments[t.test]) for t in trials]))
    eer, thr = compute_eer(raw.raw, raw.labels)
    result = EvalResult(scores=raw, eer=eer, threshold=thr, segments={u: s.shape[0] for u, s in segments.items()})
    if normalize:
        cohort = cohort_embeddings(model, corpus, cfg)
        top_k = cfg.top_k
        if top_k > cohort.shape[0]:
            logger.warning("top_k=%d ramené à la taille de la cohorte (%d).", top_k, cohort.shape[0])
            top_k = cohort.shape[0]
        normed = as_norm(raw, segments, cohort, top_k)
        result.scores = normed
        result.eer_norm, result.threshold_norm = compute_eer(normed.norm, normed.labels)
        result.top_k = top_k
    logger.info("EER brute %.4f, EER AS-norm %s", result.eer, result.eer_norm)
    return result


def write_scores(path: Path, scores: ScoreSet) -> None:
    """Une ligne par essai : « enroll test raw norm »."""
    norm = scores.norm if scores.norm is not None else scores.raw
    lines = [f"{t.enroll} {t.test} {r:.6f} {n:.6f}\n" for t, r, n in zip(scores.trials, scores.raw, norm)]
    atomic_write_text(Path(path), "".join(lines))
