from __future__ import annotations

"""Corpus synthétique de locuteurs (trames 64 dimensions façon FBank).

Génération d'un énoncé (locuteur s, énoncé u) :
- latent du locuteur z_s ~ N(0, I_L) + facteur binaire « genre » (±GENDER_SHIFT
  le long d'une direction fixe) ;
- offset de session ~ N(0, session_std²) par énoncé ;
- spectre moyen = A · latent / √L (matrice de mélange A commune) ;
- modulation temporelle selon le « style » (profondeur 0 / 0.15 / 0.3 / 0.45) ;
- bruit coloré de « scène » (blanc, rose, brun, bleu) au SNR demandé.

La variante ``shifted`` applique une pente spectrale et un autre mélange de
scènes (évaluation hors distribution).

Chaque énoncé a son propre flux aléatoire ``rng_for(seed, "corpus", s, u)``.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import CorpusConfig
from app.core.errors import ConfigurationError, CorruptionError
from app.core.experiment import atomic_write_bytes, atomic_write_text
from app.core.seeding import rng_for

logger = logging.getLogger(__name__)

GENDER_SHIFT = 2.0
STYLE_DEPTHS = (0.0, 0.15, 0.30, 0.45)
STYLE_PERIOD = 16.0
SCENES = ("white", "pink", "brown", "blue")
SCENE_MIX = (0.25, 0.25, 0.25, 0.25)
SHIFTED_SCENE_MIX = (0.1, 0.1, 0.4, 0.4)
SHIFTED_TILT = 0.5


# -------------------------
# Types
# -------------------------

@dataclass
class Utterance:
    id: str
    speaker: int
    frames: np.ndarray          # (T, F) float32
    gender: int
    scene: int
    style: int


@dataclass
class SyntheticCorpus:
    config: CorpusConfig
    seed: int
    train: List[Utterance] = field(default_factory=list)
    test: List[Utterance] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._index: Dict[str, Utterance] = {u.id: u for u in self.train + self.test}

    def get(self, utt_id: str) -> Utterance:
        try:
            return self._index[utt_id]
        except KeyError:
            raise KeyError(f"Énoncé inconnu : {utt_id}")

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._index

    @property
    def num_train_speakers(self) -> int:
        return self.config.train_speakers

    def train_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(X (N, T, F), y (N,)) ; y = indice de locuteur d'entraînement."""
        x = np.stack([u.frames for u in self.train]).astype(np.float32)
        y = np.asarray([u.speaker for u in self.train], dtype=np.int64)
        return x, y

    def test_speakers(self) -> List[int]:
        return sorted({u.speaker for u in self.test})

    def utterances_of(self, speaker: int) -> List[Utterance]:
        return [u for u in self.train + self.test if u.speaker == speaker]


# -------------------------
# Génération
# -------------------------

def utterance_id(speaker: int, index: int) -> str:
    return f"spk{speaker:03d}-utt{index:03d}"


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _mixing(cfg: CorpusConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = rng_for(seed, "corpus", "mixing")
    a = rng.standard_normal((cfg.feat_dim, cfg.latent_dim))
    gender_dir = _unit(rng.standard_normal(cfg.latent_dim))
    return a, gender_dir


def _scene_shapes(feat_dim: int) -> np.ndarray:
    """Profils d'amplitude (4, F) normalisés à une puissance moyenne de 1."""
    f = np.arange(1, feat_dim + 1, dtype=np.float64)
    shapes = np.stack([np.ones_like(f), 1.0 / np.sqrt(f), 1.0 / f, np.sqrt(f)])
    return shapes / np.sqrt(np.mean(shapes ** 2, axis=1, keepdims=True))


def speaker_latent(cfg: CorpusConfig, seed: int, speaker: int, gender_dir: np.ndarray) -> Tuple[np.ndarray, int]:
    rng = rng_for(seed, "corpus", "speaker", speaker)
    gender = speaker % 2
    z = rng.standard_normal(cfg.latent_dim) + (2 * gender - 1) * GENDER_SHIFT * gender_dir
    return z, gender


def generate_utterance(
    cfg: CorpusConfig,
    seed: int,
    speaker: int,
    index: int,
    frames: int,
    *,
    mixing: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Utterance:
    a, gender_dir = mixing if mixing is not None else _mixing(cfg, seed)
    z, gender = speaker_latent(cfg, seed, speaker, gender_dir)
    stream = "corpus-shifted" if cfg.shifted else "corpus"
    rng = rng_for(seed, stream, speaker, index)

    scene = int(rng.choice(len(SCENES), p=SHIFTED_SCENE_MIX if cfg.shifted else SCENE_MIX))
    style = int(rng.integers(len(STYLE_DEPTHS)))

    latent = z + cfg.session_std * rng.standard_normal(cfg.latent_dim)
    base = a @ latent / np.sqrt(cfg.latent_dim)
    if cfg.shifted:
        base = base * (1.0 + SHIFTED_TILT * np.linspace(-1.0, 1.0, cfg.feat_dim))

    t = np.arange(frames, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    envelope = 1.0 + STYLE_DEPTHS[style] * np.sin(2.0 * np.pi * t / STYLE_PERIOD + phase)
    clean = envelope[:, None] * base[None, :]

    power = float(np.mean(clean ** 2))
    noise_power = power / (10.0 ** (cfg.snr_db / 10.0))
    shape = _scene_shapes(cfg.feat_dim)[scene]
    noise = rng.standard_normal((frames, cfg.feat_dim)) * shape[None, :] * np.sqrt(noise_power)

    return Utterance(
        id=utterance_id(speaker, index),
        speaker=int(speaker),
        frames=(clean + noise).astype(np.float32),
        gender=int(gender),
        scene=scene,
        style=style,
    )


def generate_corpus(cfg: CorpusConfig, seed: int) -> SyntheticCorpus:
    """Locuteurs 0..N-1 : entraînement ; N..N+M-1 : locuteurs d'essai (disjoints)."""
    cfg.validate()
    mixing = _mixing(cfg, seed)
    train = [
        generate_utterance(cfg, seed, s, u, cfg.train_frames, mixing=mixing)
        for s in range(cfg.train_speakers)
        for u in range(cfg.utterances)
    ]
    first_test = cfg.train_speakers
    test = [
        generate_utterance(cfg, seed, s, u, cfg.trial_frames, mixing=mixing)
        for s in range(first_test, first_test + cfg.test_speakers)
        for u in range(cfg.utterances)
    ]
    logger.info(
        "Corpus généré : %d énoncés d'entraînement, %d d'essai (seed=%d, shifted=%s).",
        len(train), len(test), seed, cfg.shifted,
    )
    return SyntheticCorpus(config=cfg, seed=seed, train=train, test=test)


# -------------------------
# Essais de vérification
# -------------------------

@dataclass(frozen=True)
class Trial:
    target: bool
    enroll: str
    test: str

    @property
    def label(self) -> str:
        return "target" if self.target else "nontarget"


def generate_trials(corpus: SyntheticCorpus, seed: int, per_speaker: int = 20) -> List[Trial]:
    """Pour chaque locuteur d'essai : ``per_speaker`` paires cibles et autant de non-cibles."""
    speakers = corpus.test_speakers()
    if len(speakers) < 2:
        raise ConfigurationError("Au moins 2 locuteurs d'essai sont nécessaires.")
    by_spk = {s: [u.id for u in corpus.test if u.speaker == s] for s in speakers}
    trials: List[Trial] = []
    for s in speakers:
        rng = rng_for(seed, "trials", s)
        own = by_spk[s]
        others = [x for x in speakers if x != s]
        for _ in range(per_speaker):
            i, j = rng.choice(len(own), size=2, replace=False)
            trials.append(Trial(True, own[i], own[j]))
        for _ in range(per_speaker):
            other = by_spk[others[int(rng.integers(len(others)))]]
            trials.append(Trial(False, own[int(rng.integers(len(own)))], other[int(rng.integers(len(other)))]))
    return trials


def write_trials(path: Path, trials: Sequence[Trial]) -> None:
    atomic_write_text(Path(path), "".join(f"{t.label} {t.enroll} {t.test}\n" for t in trials))


def read_trials(path: Path) -> List[Trial]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Liste d'essais introuvable : {path}")
    trials: List[Trial] = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[0] not in ("target", "nontarget"):
            raise ConfigurationError(f"{path}:{n} : ligne « label enroll test » attendue.")
        trials.append(Trial(parts[0] == "target", parts[1], parts[2]))
    return trials


# -------------------------
# Persistance (.npz)
# -------------------------

def _pack_split(prefix: str, utts: List[Utterance]) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}/frames": np.stack([u.frames for u in utts]).astype(np.float32),
        f"{prefix}/ids": np.asarray([u.id for u in utts]),
        f"{prefix}/speaker": np.asarray([u.speaker for u in utts], dtype=np.int64),
        f"{prefix}/gender": np.asarray([u.gender for u in utts], dtype=np.int64),
        f"{prefix}/scene": np.asarray([u.scene for u in utts], dtype=np.int64),
        f"{prefix}/style": np.asarray([u.style for u in utts], dtype=np.int64),
    }


def _unpack_split(prefix: str, data) -> List[Utterance]:
    frames = data[f"{prefix}/frames"]
    return [
        Utterance(
            id=str(data[f"{prefix}/ids"][i]),
            speaker=int(data[f"{prefix}/speaker"][i]),
            frames=frames[i],
            gender=int(data[f"{prefix}/gender"][i]),
            scene=int(data[f"{prefix}/scene"][i]),
            style=int(data[f"{prefix}/style"][i]),
        )
        for i in range(frames.shape[0])
    ]


def save_corpus(path: Path, corpus: SyntheticCorpus) -> None:
    arrays = {**_pack_split("train", corpus.train), **_pack_split("test", corpus.test)}
    meta = {"seed": int(corpus.seed), "config": corpus.config.to_dict()}
    arrays["meta"] = np.asarray(json.dumps(meta))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(Path(path), buf.getvalue())


def load_corpus(path: Path) -> SyntheticCorpus:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Corpus introuvable : {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            train = _unpack_split("train", data)
            test = _unpack_split("test", data)
    except (KeyError, ValueError, OSError) as e:
        raise CorruptionError(f"Corpus illisible ({path}) : {e}")
    cfg = CorpusConfig.from_dict(meta.get("config"))
    return SyntheticCorpus(config=cfg, seed=int(meta.get("seed", 0)), train=train, test=test)
