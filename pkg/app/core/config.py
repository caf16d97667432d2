from __future__ import annotations

"""Configuration d'une expérience (fichier JSON unique).

Sections : corpus, model, train, finetune, eval, probe. Les clés absentes
prennent les valeurs par défaut ci-dessous (protocole « desk scale »), les clés
inconnues sont ignorées, les valeurs invalides lèvent ``ConfigurationError``.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from app.core.errors import ConfigurationError
from app.core.models import ModelConfig
from app.core.quantizer import DEFAULT_ALPHA, QuantScheme, check_bits

T = TypeVar("T")


def _from_section(cls: Type[T], d: Optional[Dict[str, Any]]) -> T:
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"Section {cls.__name__} : objet JSON attendu.")
    known = {f.name: f for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in d.items():
        f = known.get(key)
        if f is None:
            continue
        default = getattr(cls(), key)
        try:
            if isinstance(default, bool):
                kwargs[key] = bool(value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            elif isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in value)
            else:
                kwargs[key] = value
        except (TypeError, ValueError):
            raise ConfigurationError(f"{cls.__name__}.{key} invalide : {value!r}")
    return cls(**kwargs).validate()  # type: ignore[attr-defined]


# -------------------------
# Sections
# -------------------------

@dataclass
class CorpusConfig:
    train_speakers: int = 20
    test_speakers: int = 10
    utterances: int = 50
    train_frames: int = 200
    trial_frames: int = 700
    feat_dim: int = 64
    latent_dim: int = 32
    snr_db: float = 10.0
    session_std: float = 0.12
    shifted: bool = False

    def validate(self) -> "CorpusConfig":
        if self.train_speakers < 2 or self.test_speakers < 2:
            raise ConfigurationError("Au moins 2 locuteurs par partition.")
        if self.utterances < 2:
            raise ConfigurationError("Au moins 2 énoncés par locuteur.")
        if min(self.train_frames, self.trial_frames, self.feat_dim, self.latent_dim) <= 0:
            raise ConfigurationError("Dimensions du corpus : valeurs > 0 attendues.")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "CorpusConfig":
        return _from_section(cls, d)


@dataclass
class TrainConfig:
    stage: str = "fp32"                 # fp32 | qat
    epochs: int = 40
    lr: float = 1e-3
    decay_epochs: Tuple[int, ...] = (20, 32)
    decay_ratio: float = 0.1
    weight_decay: float = 2e-5
    batch_size: int = 128
    margin: float = 0.2
    scale: float = 30.0
    # fine-tune uniquement
    scheme: str = "uniform"
    bits: int = 8
    alpha_init: float = DEFAULT_ALPHA

    def validate(self) -> "TrainConfig":
        if self.stage not in ("fp32", "qat"):
            raise ConfigurationError(f"stage inconnu : {self.stage!r} (fp32 | qat).")
        if self.epochs < 0:
            raise ConfigurationError("epochs doit être >= 0.")
        if not self.lr > 0:
            raise ConfigurationError("lr doit être > 0.")
        decays = list(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ConfigurationError(f"decay_epochs doit être strictement croissant : {decays}")
        # epochs = 0 : quantification post-entraînement, planning ignoré
        if self.epochs > 0 and decays and (decays[0] < 0 or decays[-1] >= self.epochs):
            raise ConfigurationError(f"decay_epochs hors de [0, {self.epochs}) : {decays}")
        if not 0 < self.decay_ratio <= 1:
            raise ConfigurationError("decay_ratio doit être dans (0, 1].")
        if self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigurationError("weight_decay >= 0 et batch_size >= 1 attendus.")
        if self.margin < 0 or not self.scale > 0:
            raise ConfigurationError("margin >= 0 et scale > 0 attendus.")
        if self.stage == "qat":
            QuantScheme.parse(self.scheme)
            check_bits(self.bits)
            if not self.alpha_init > 0:
                raise ConfigurationError("alpha_init doit être > 0.")
        return self

    @classmethod
    def finetune_defaults(cls) -> "TrainConfig":
        return cls(stage="qat", epochs=20, decay_epochs=(10, 16))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "TrainConfig":
        return _from_section(cls, d)


@dataclass
class EvalConfig:
    window: int = 400
    hop: int = 300
    top_k: int = 50
    trials_per_speaker: int = 20

    def validate(self) -> "EvalConfig":
        if self.window < 1 or self.hop < 1:
            raise ConfigurationError("window et hop doivent être >= 1.")
        if self.top_k < 2:
            raise ConfigurationError("top_k doit être >= 2.")
        if self.trials_per_speaker < 1:
            raise ConfigurationError("trials_per_speaker doit être >= 1.")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "EvalConfig":
        return _from_section(cls, d)


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    train_fraction: float = 0.7

    def validate(self) -> "ProbeConfig":
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("hidden, epochs et batch_size doivent être >= 1.")
        if not self.lr > 0:
            raise ConfigurationError("lr doit être > 0.")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction doit être dans (0, 1).")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "ProbeConfig":
        return _from_section(cls, d)


# -------------------------
# Fichier complet
# -------------------------

@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig.finetune_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, model=replace(self.model, seed=int(seed)))

    def model_for_corpus(self) -> ModelConfig:
        """ModelConfig aligné sur le corpus (dimension des trames, nombre de locuteurs)."""
        return replace(
            self.model,
            feat_dim=self.corpus.feat_dim,
            num_speakers=self.corpus.train_speakers,
        ).validate()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "eval": self.eval.to_dict(),
            "probe": self.probe.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigurationError("Configuration invalide (objet JSON attendu).")
        finetune = dict(TrainConfig.finetune_defaults().to_dict())
        finetune.update(d.get("finetune") or {})
        finetune["stage"] = "qat"
        train = dict(d.get("train") or {})
        train["stage"] = "fp32"
        return cls(
            corpus=CorpusConfig.from_dict(d.get("corpus")),
            model=ModelConfig.from_dict(d.get("model")),
            train=TrainConfig.from_dict(train),
            finetune=TrainConfig.from_dict(finetune),
            eval=EvalConfig.from_dict(d.get("eval")),
            probe=ProbeConfig.from_dict(d.get("probe")),
        )


def load_config(path: Optional[Path]) -> RunConfig:
    """Charge un fichier JSON ; ``None`` → configuration par défaut."""
    if path is None:
        return RunConfig()
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"Fichier de configuration introuvable : {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Configuration JSON invalide ({path}) : {e}")
    return RunConfig.from_dict(data)
