from __future__ import annotations

"""Modèles d'embedding jouets, tête AAM-softmax et descripteurs de couches.

- ``ecapa-toy`` : 3 convolutions 1D (k5 ; k3 dilatée ; 1x1 d'agrégation C→4C),
  BN + ReLU, pooling statistique (moyenne ‖ écart-type), FC d'embedding.
  Les paramètres se concentrent sur la première et la dernière couche du bloc.
- ``resnet-toy`` : conv2d 3x3 stride 2, deux blocs résiduels (2 conv, raccourci
  identité), pooling statistique sur le temps, FC d'embedding.

Les descripteurs (``LayerDescriptor``) suffisent pour compter paramètres, MACs
et taille sur disque sans construire le modèle.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core import ops
from app.core.errors import ConfigurationError, DimensionError, NumericError
from app.core.packformat import file_nbytes
from app.core.quantizer import DEFAULT_ALPHA, QuantizedTensor, QuantizerConfig, QuantScheme, fake_quantize, quantize
from app.core.seeding import rng_for
from app.core.tensor import Tensor

ARCHITECTURES = ("ecapa-toy", "resnet-toy")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
POOL_EPS = 1e-5


# -------------------------
# Descripteurs
# -------------------------

@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    kind: str                  # conv1d | conv2d | fc | bn | pool
    k: int = 1
    c1: int = 0
    c2: int = 0
    stride: int = 1
    pad: int = 0
    dilation: int = 1
    bias: bool = False

    @property
    def quantizable(self) -> bool:
        return self.kind in ("conv1d", "conv2d", "fc")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv1d":
            return (self.k, self.c1, self.c2)
        if self.kind == "conv2d":
            return (self.k, self.k, self.c1, self.c2)
        if self.kind == "fc":
            return (self.c1, self.c2)
        if self.kind == "bn":
            return (self.c1,)
        return ()

    @property
    def weight_count(self) -> int:
        if self.kind == "conv2d":
            return self.k * self.k * self.c1 * self.c2
        if self.kind == "conv1d":
            return self.k * self.c1 * self.c2
        if self.kind == "fc":
            return self.c1 * self.c2
        return 0

    @property
    def param_count(self) -> int:
        if self.kind == "bn":
            return 2 * self.c1
        return self.weight_count + (self.c2 if self.bias else 0)

    def tensors(self) -> List[Tuple[str, Tuple[int, ...], bool]]:
        """(nom, forme, est_un_buffer) des tenseurs sérialisés pour cette couche."""
        if self.kind == "bn":
            c = (self.c1,)
            return [
                (f"{self.name}.gamma", c, False),
                (f"{self.name}.beta", c, False),
                (f"{self.name}.running_mean", c, True),
                (f"{self.name}.running_var", c, True),
            ]
        if not self.quantizable:
            return []
        out = [(f"{self.name}.weight", self.weight_shape, False)]
        if self.bias:
            out.append((f"{self.name}.bias", (self.c2,), False))
        return out


# -------------------------
# Configuration
# -------------------------

@dataclass
class ModelConfig:
    arch: str = "ecapa-toy"
    channels: int = 64
    embed_dim: int = 64
    num_speakers: int = 20
    feat_dim: int = 64
    seed: int = 0
    # nom de couche → quantifieur ; absent = pleine précision
    quant: Dict[str, QuantizerConfig] = field(default_factory=dict)

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"Architecture inconnue : {self.arch!r} (attendu {ARCHITECTURES}).")
        if self.embed_dim <= 0 or self.channels <= 0 or self.feat_dim <= 0:
            raise ConfigurationError("embed_dim, channels et feat_dim doivent être > 0.")
        if self.num_speakers < 2:
            raise ConfigurationError("Au moins 2 locuteurs sont nécessaires.")
        names = set(quantizable_layers(self))
        unknown = sorted(set(self.quant) - names)
        if unknown:
            raise ConfigurationError(f"Couches non quantifiables : {unknown}")
        for qc in self.quant.values():
            qc.validate()
        return self

    def assignment(self, layer: str) -> Optional[QuantizerConfig]:
        return self.quant.get(layer)

    def with_quantization(self, scheme: QuantScheme, bits: int, alpha: float = DEFAULT_ALPHA) -> "ModelConfig":
        qc = QuantizerConfig(scheme=QuantScheme.parse(scheme), bits=int(bits), alpha=float(alpha)).validate()
        return replace(self, quant={name: qc for name in quantizable_layers(self)})

    def full_precision(self) -> "ModelConfig":
        return replace(self, quant={})

    @property
    def model_id(self) -> str:
        return f"{self.arch}-{self.channels}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "arch": self.arch,
            "channels": int(self.channels),
            "embed_dim": int(self.embed_dim),
            "num_speakers": int(self.num_speakers),
            "feat_dim": int(self.feat_dim),
            "seed": int(self.seed),
            "quant": {k: {"scheme": v.scheme.value, "bits": v.bits, "alpha": v.alpha} for k, v in self.quant.items()},
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any] | None) -> "ModelConfig":
        d = d or {}
        try:
            cfg = cls(
                arch=str(d.get("arch", "ecapa-toy")),
                channels=int(d.get("channels", 64)),
                embed_dim=int(d.get("embed_dim", 64)),
                num_speakers=int(d.get("num_speakers", 20)),
                feat_dim=int(d.get("feat_dim", 64)),
                seed=int(d.get("seed", 0)),
                quant={str(k): QuantizerConfig.from_dict(v) for k, v in (d.get("quant") or {}).items()},
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f"Configuration modèle invalide : {e}")
        return cfg.validate()


def describe(cfg: ModelConfig) -> List[LayerDescriptor]:
    """Descripteurs ordonnés de l'extracteur d'embedding (tête AAM exclue)."""
    c, e, f = cfg.channels, cfg.embed_dim, cfg.feat_dim
    if cfg.arch == "ecapa-toy":
        return [
            LayerDescriptor("frame1", "conv1d", k=5, c1=f, c2=c, pad=2),
            LayerDescriptor("bn1", "bn", c1=c),
            LayerDescriptor("frame2", "conv1d", k=3, c1=c, c2=c, pad=2, dilation=2),
            LayerDescriptor("bn2", "bn", c1=c),
            LayerDescriptor("frame3", "conv1d", k=1, c1=c, c2=4 * c),
            LayerDescriptor("bn3", "bn", c1=4 * c),
            LayerDescriptor("pool", "pool", c1=4 * c, c2=8 * c),
            LayerDescriptor("embedding", "fc", c1=8 * c, c2=e, bias=True),
        ]
    if cfg.arch == "resnet-toy":
        f_out = ops.conv_output_length(f, 3, stride=2, pad=1)
        layers = [
            LayerDescriptor("stem", "conv2d", k=3, c1=1, c2=c, stride=2, pad=1),
            LayerDescriptor("stem_bn", "bn", c1=c),
        ]
        for b in (1, 2):
            layers += [
                LayerDescriptor(f"block{b}.conv1", "conv2d", k=3, c1=c, c2=c, pad=1),
                LayerDescriptor(f"block{b}.bn1", "bn", c1=c),
                LayerDescriptor(f"block{b}.conv2", "conv2d", k=3, c1=c, c2=c, pad=1),
                LayerDescriptor(f"block{b}.bn2", "bn", c1=c),
            ]
        layers += [
            LayerDescriptor("pool", "pool", c1=f_out * c, c2=2 * f_out * c),
            LayerDescriptor("embedding", "fc", c1=2 * f_out * c, c2=e, bias=True),
        ]
        return layers
    raise ConfigurationError(f"Architecture inconnue : {cfg.arch!r}")


def quantizable_layers(cfg: ModelConfig) -> List[str]:
    return [d.name for d in describe(cfg) if d.quantizable]


def tensor_specs(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...], Optional[int]]]:
    """(nom, forme, bits ou None) de chaque tenseur écrit dans un packfile."""
    out = []
    for d in describe(cfg):
        qc = cfg.assignment(d.name)
        for name, shape, _ in d.tensors():
            bits = qc.bits if (qc is not None and name.endswith(".weight")) else None
            out.append((name, shape, bits))
    return out


def count_params(cfg: ModelConfig) -> int:
    return sum(d.param_count for d in describe(cfg))


def params_in_millions(cfg: ModelConfig) -> float:
    return count_params(cfg) / 1e6


def layer_macs(cfg: ModelConfig, input_shape: Sequence[int]) -> Dict[str, int]:
    """MACs par couche pour une entrée (T, F) : conv = poids × positions de sortie, fc = c1·c2."""
    t, f = int(input_shape[0]), int(input_shape[1])
    out: Dict[str, int] = {}
    for d in describe(cfg):
        if d.kind == "conv1d":
            t = ops.conv_output_length(t, d.k, d.stride, d.pad, d.dilation)
            out[d.name] = d.weight_count * t
        elif d.kind == "conv2d":
            t = ops.conv_output_length(t, d.k, d.stride, d.pad)
            f = ops.conv_output_length(f, d.k, d.stride, d.pad)
            out[d.name] = d.weight_count * t * f
        elif d.kind == "fc":
            out[d.name] = d.weight_count
    return out


def count_macs(cfg: ModelConfig, input_shape: Sequence[int]) -> int:
    return sum(layer_macs(cfg, input_shape).values())


def model_size_bytes(cfg: ModelConfig) -> int:
    """Taille exacte du packfile : b bits par poids quantifié, 4 octets sinon, + métadonnées."""
    return file_nbytes(tensor_specs(cfg))


# -------------------------
# Couches
# -------------------------

@dataclass
class QuantState:
    scheme: QuantScheme
    bits: int
    alpha: Tensor

    @property
    def config(self) -> QuantizerConfig:
        return QuantizerConfig(scheme=self.scheme, bits=self.bits, alpha=self.alpha.item())


class WeightLayer:
    """conv1d / conv2d / fc avec poids maître et quantification factice optionnelle."""

    def __init__(self, desc: LayerDescriptor, seed: int):
        self.desc = desc
        rng = rng_for(seed, "init", desc.name)
        fan_in = desc.weight_count // desc.c2
        gain = 1.0 if desc.kind == "fc" else 2.0
        w = rng.standard_normal(desc.weight_shape) * np.sqrt(gain / fan_in)
        self.weight = Tensor(w, requires_grad=True, name=f"{desc.name}.weight")
        self.bias = Tensor(np.zeros(desc.c2), requires_grad=True, name=f"{desc.name}.bias") if desc.bias else None
        self.quant: Optional[QuantState] = None
        self.last_quantized: Optional[QuantizedTensor] = None

    def effective_weight(self) -> Tensor:
        if self.quant is None:
            return self.weight
        w, q = fake_quantize(self.weight, self.quant.alpha, self.quant.scheme, self.quant.bits)
        self.last_quantized = q
        return w

    def quantized(self) -> Optional[QuantizedTensor]:
        if self.quant is None:
            return None
        return quantize(self.weight, self.quant.config)

    def forward(self, x: Tensor) -> Tensor:
        d = self.desc
        w = self.effective_weight()
        if d.kind == "conv1d":
            out = ops.conv1d(x, w, stride=d.stride, pad=d.pad, dilation=d.dilation)
        elif d.kind == "conv2d":
            out = ops.conv2d(x, w, stride=d.stride, pad=d.pad)
        else:
            out = ops.matmul(x, w)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out

    def parameters(self) -> Dict[str, Tensor]:
        out = {f"{self.desc.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.desc.name}.bias"] = self.bias
        return out


class BatchNorm:
    def __init__(self, desc: LayerDescriptor):
        self.desc = desc
        c = desc.c1
        self.gamma = Tensor(np.ones(c), requires_grad=True, name=f"{desc.name}.gamma")
        self.beta = Tensor(np.zeros(c), requires_grad=True, name=f"{desc.name}.beta")
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if not train:
            return ops.batchnorm(x, self.gamma, self.beta, BN_EPS, running=(self.running_mean, self.running_var))
        axes = tuple(range(x.ndim - 1))
        x64 = x.data.astype(np.float64)
        m = BN_MOMENTUM
        self.running_mean = ((1 - m) * self.running_mean + m * x64.mean(axis=axes)).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * x64.var(axis=axes)).astype(np.float32)
        return ops.batchnorm(x, self.gamma, self.beta, BN_EPS)

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{self.desc.name}.gamma": self.gamma, f"{self.desc.name}.beta": self.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {
            f"{self.desc.name}.running_mean": self.running_mean,
            f"{self.desc.name}.running_var": self.running_var,
        }


def stats_pool(h: Tensor) -> Tensor:
    """(B, T, C) → (B, 2C) : moyenne ‖ écart-type sur le temps."""
    mu = ops.mean(h, axis=1)
    sd = ops.sqrt(ops.add(ops.var(h, axis=1), POOL_EPS))
    return ops.concat([mu, sd], axis=-1)


# -------------------------
# Modèle
# -------------------------

class SpeakerModel:
    def __init__(self, cfg: ModelConfig):
        self.config = cfg.validate()
        self.descriptors = describe(cfg)
        self.layers: Dict[str, Any] = {}
        for d in self.descriptors:
            if d.kind == "bn":
                self.layers[d.name] = BatchNorm(d)
            elif d.quantizable:
                self.layers[d.name] = WeightLayer(d, cfg.seed)
        self.apply_quantization(cfg.quant)

    # ---- quantification ----
    def apply_quantization(self, assignment: Dict[str, QuantizerConfig]) -> None:
        """Active la quantification factice ; α initialisé depuis la configuration."""
        for name, layer in self.weight_layers().items():
            qc = assignment.get(name)
            if qc is None:
                layer.quant = None
                continue
            qc.validate()
            alpha = Tensor(np.asarray(qc.alpha), requires_grad=True, name=f"{name}.alpha")
            layer.quant = QuantState(scheme=qc.scheme, bits=qc.bits, alpha=alpha)
        self.config = replace(self.config, quant=dict(assignment))

    def weight_layers(self) -> Dict[str, WeightLayer]:
        return {k: v for k, v in self.layers.items() if isinstance(v, WeightLayer)}

    def quant_layers(self) -> Dict[str, WeightLayer]:
        return {k: v for k, v in self.weight_layers().items() if v.quant is not None}

    def alphas(self) -> Dict[str, Tensor]:
        return {k: v.quant.alpha for k, v in self.quant_layers().items()}

    def quantized_weights(self) -> Dict[str, QuantizedTensor]:
        return {k: v.quantized() for k, v in self.quant_layers().items()}

    # ---- tenseurs ----
    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for layer in self.layers.values():
            out.update(layer.parameters())
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for layer in self.layers.values():
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers())
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        layer_name, _, attr = name.rpartition(".")
        layer = self.layers.get(layer_name)
        if layer is None:
            raise KeyError(f"Tenseur inconnu : {name}")
        if attr in ("running_mean", "running_var"):
            setattr(layer, attr, np.asarray(value, dtype=np.float32).copy())
            return
        target: Optional[Tensor] = getattr(layer, attr, None)
        if not isinstance(target, Tensor):
            raise KeyError(f"Tenseur inconnu : {name}")
        value = np.asarray(value)
        if tuple(value.shape) != target.shape:
            raise DimensionError(f"{name} : forme {value.shape} au lieu de {target.shape}.")
        target.data = value.astype(target.data.dtype).copy()

    # ---- passe avant ----
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.config.feat_dim:
            raise DimensionError(f"Entrée (B, T, {self.config.feat_dim}) attendue, reçu {x.shape}.")
        if self.config.arch == "ecapa-toy":
            h = x
            for conv, bn in (("frame1", "bn1"), ("frame2", "bn2"), ("frame3", "bn3")):
                h = ops.relu(self.layers[bn].forward(self.layers[conv].forward(h), train))
        else:
            b, t, f = x.shape
            h = ops.reshape(x, (b, t, f, 1))
            h = ops.relu(self.layers["stem_bn"].forward(self.layers["stem"].forward(h), train))
            for blk in ("block1", "block2"):
                r = h
                h = ops.relu(self.layers[f"{blk}.bn1"].forward(self.layers[f"{blk}.conv1"].forward(h), train))
                h = self.layers[f"{blk}.bn2"].forward(self.layers[f"{blk}.conv2"].forward(h), train)
                h = ops.relu(ops.add(h, r))
            b2, t2, f2, c2 = h.shape
            h = ops.reshape(h, (b2, t2, f2 * c2))
        return self.layers["embedding"].forward(stats_pool(h))

    def embed(self, frames: np.ndarray) -> np.ndarray:
        """Embedding(s) en mode inférence, hors bande."""
        frames = np.asarray(frames, dtype=np.float32)
        single = frames.ndim == 2
        out = self.forward(Tensor.wrap(frames[None] if single else frames), train=False).data
        return out[0] if single else out


def build_model(cfg: ModelConfig) -> SpeakerModel:
    return SpeakerModel(cfg)


# -------------------------
# Tête AAM-softmax
# -------------------------

@dataclass
class AamHead:
    weight: Tensor             # (classes, embed_dim), lignes normalisées à l'usage
    margin: float = 0.2
    scale: float = 30.0

    @classmethod
    def create(cls, num_classes: int, embed_dim: int, seed: int = 0, margin: float = 0.2, scale: float = 30.0) -> "AamHead":
        rng = rng_for(seed, "init", "head")
        w = rng.standard_normal((num_classes, embed_dim))
        return cls(weight=Tensor(w, requires_grad=True, name="head.weight"), margin=margin, scale=scale)

    def normalized_weight(self) -> np.ndarray:
        w = self.weight.data.astype(np.float64)
        n = np.linalg.norm(w, axis=1, keepdims=True)
        if np.any(n == 0):
            raise NumericError("Tête AAM : ligne de norme nulle.")
        return w / n


def aam_logits(emb: Tensor, head: AamHead, target) -> Tensor:
    """s·cos θ_j, et s·cos(θ_cible + m) pour la classe cible."""
    cos = ops.cos_angle(emb, head.weight)
    if target is not None and head.margin != 0:
        cos = ops.angular_margin(cos, target, head.margin)
    return ops.mul(cos, ops.scalar(head.scale))
