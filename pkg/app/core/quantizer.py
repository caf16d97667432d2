from __future__ import annotations

"""Quantification des poids : normalisation → écrêtage → projection.

- Niveaux uniformes : {0, ±k/(2^(b-1)-1)} × α
- Niveaux puissances de deux (PoT) : {0, ±2^(-2^(b-1)+2), ..., ±1/2, ±1} × α
- Les deux ensembles comptent 2^b - 1 valeurs (un code reste inutilisé).
- Projection au niveau le plus proche, égalité → le niveau le plus éloigné de 0.
- Gradients STE : dŴ/dW = 1 ; dŴ/dα = sign(W) si |W| > α, sinon Ŵ/α - W/α.

μ, σ et α sont arrondis en float32 avant usage : un rechargement depuis un
packfile reproduit donc les poids dé-quantifiés au bit près.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, CorruptionError, DimensionError
from app.core.tensor import Tensor, make_result

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
MIN_BITS = 2
MAX_BITS = 8
DEFAULT_ALPHA = 3.0

ArrayLike = Union[Tensor, np.ndarray, float, list]


def _f32(x: float) -> float:
    return float(np.float32(x))


def _as_array(w: ArrayLike) -> np.ndarray:
    if isinstance(w, Tensor):
        return w.data.astype(np.float64)
    return np.asarray(w, dtype=np.float64)


# -------------------------
# Types
# -------------------------

class QuantScheme(str, Enum):
    UNIFORM = "uniform"
    POT = "pot"

    @property
    def code(self) -> int:
        return 0 if self is QuantScheme.UNIFORM else 1

    @classmethod
    def parse(cls, value: Any) -> "QuantScheme":
        if isinstance(value, QuantScheme):
            return value
        s = str(value or "").strip().lower()
        if s in ("uniform", "uni", "0"):
            return cls.UNIFORM
        if s in ("pot", "powers-of-two", "1"):
            return cls.POT
        raise ConfigurationError(f"Schéma de quantification inconnu : {value!r}")


@dataclass(frozen=True)
class QuantizerConfig:
    scheme: QuantScheme = QuantScheme.UNIFORM
    bits: int = 8
    alpha: float = DEFAULT_ALPHA
    mu: Optional[float] = None      # statistiques figées (sinon recalculées depuis W)
    sigma: Optional[float] = None

    def validate(self) -> "QuantizerConfig":
        check_bits(self.bits)
        check_alpha(self.alpha)
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigurationError(f"sigma doit être > 0 (reçu {self.sigma}).")
        return self

    def with_stats(self, mu: float, sigma: float, alpha: Optional[float] = None) -> "QuantizerConfig":
        return replace(
            self,
            mu=_f32(mu),
            sigma=_f32(sigma),
            alpha=_f32(self.alpha if alpha is None else alpha),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme.value,
            "bits": int(self.bits),
            "alpha": float(self.alpha),
            "mu": self.mu,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "QuantizerConfig":
        return cls(
            scheme=QuantScheme.parse(d.get("scheme", "uniform")),
            bits=int(d.get("bits", 8)),
            alpha=float(d.get("alpha", DEFAULT_ALPHA)),
            mu=None if d.get("mu") is None else float(d["mu"]),
            sigma=None if d.get("sigma") is None else float(d["sigma"]),
        ).validate()


class QuantLevels:
    """Ensemble trié q(α, b), symétrique, contenant 0."""

    def __init__(self, unit: np.ndarray, alpha: float, bits: int, scheme: QuantScheme):
        self.unit = unit
        self.alpha = float(alpha)
        self.bits = int(bits)
        self.scheme = scheme
        self.values = unit * self.alpha
        # milieux pris sur les niveaux mis à l'échelle : un milieu exact reste une égalité
        self.midpoints = (self.values[:-1] + self.values[1:]) / 2.0

    def __len__(self) -> int:
        return int(self.values.size)

    def __repr__(self) -> str:
        return f"QuantLevels({self.scheme.value}, b={self.bits}, alpha={self.alpha}, n={len(self)})"


@dataclass
class QuantizedTensor:
    codes: np.ndarray            # uint8, indices dans levels.values
    config: QuantizerConfig      # μ, σ, α renseignés
    shape: Tuple[int, ...]

    @property
    def levels(self) -> QuantLevels:
        return levels_for(self.config.scheme, self.config.alpha, self.config.bits)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def values_normalized(self) -> np.ndarray:
        return self.levels.values[self.codes.reshape(-1)].reshape(self.shape)


@dataclass(frozen=True)
class QuantError:
    total: float
    average: float


# -------------------------
# Validation
# -------------------------

def check_bits(bits: int) -> int:
    if isinstance(bits, bool) or int(bits) != bits or not (MIN_BITS <= int(bits) <= MAX_BITS):
        raise ConfigurationError(f"bitwidth invalide : {bits!r} (attendu {MIN_BITS}..{MAX_BITS}).")
    return int(bits)


def check_alpha(alpha: float) -> float:
    if not np.isfinite(alpha) or not alpha > 0:
        raise ConfigurationError(f"alpha doit être > 0 (reçu {alpha}).")
    return float(alpha)


# -------------------------
# Niveaux
# -------------------------

def uniform_levels(alpha: float, bits: int) -> QuantLevels:
    bits = check_bits(bits)
    alpha = check_alpha(alpha)
    d = 2 ** (bits - 1) - 1
    unit = np.arange(-d, d + 1, dtype=np.float64) / d
    return QuantLevels(unit, alpha, bits, QuantScheme.UNIFORM)


def pot_levels(alpha: float, bits: int) -> QuantLevels:
    bits = check_bits(bits)
    alpha = check_alpha(alpha)
    exponents = np.arange(-(2 ** (bits - 1)) + 2, 1, dtype=np.float64)
    pos = np.exp2(exponents)
    unit = np.concatenate([-pos[::-1], [0.0], pos])
    return QuantLevels(unit, alpha, bits, QuantScheme.POT)


def levels_for(scheme: QuantScheme, alpha: float, bits: int) -> QuantLevels:
    scheme = QuantScheme.parse(scheme)
    if scheme is QuantScheme.UNIFORM:
        return uniform_levels(alpha, bits)
    return pot_levels(alpha, bits)


# -------------------------
# Pipeline
# -------------------------

def _stats(x: np.ndarray) -> Tuple[float, float]:
    if x.size == 0:
        raise DimensionError("normalize : tenseur vide.")
    mu = float(np.mean(x))
    sigma = float(np.std(x))
    if sigma < SIGMA_FLOOR:
        logger.warning("normalize : poids constants (sigma=%.3g), plancher %.0e appliqué.", sigma, SIGMA_FLOOR)
        sigma = SIGMA_FLOOR
    return _f32(mu), _f32(sigma)


def normalize(w: ArrayLike) -> Tuple[Tensor, float, float]:
    """Centre-réduit ``w`` (écart-type de population). Retourne (w_norm, μ, σ)."""
    x = _as_array(w)
    mu, sigma = _stats(x)
    return Tensor((x - mu) / sigma), mu, sigma


def clip(w_norm: ArrayLike, alpha: float) -> Tensor:
    alpha = check_alpha(alpha)
    return Tensor(np.clip(_as_array(w_norm), -alpha, alpha))


def _project_codes(x: np.ndarray, levels: QuantLevels) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    mids = levels.midpoints
    upper = np.searchsorted(mids, flat, side="right")
    lower = np.searchsorted(mids, flat, side="left")
    # égalité sur un milieu : on s'éloigne de zéro
    return np.where(flat >= 0, upper, lower).astype(np.uint8)


def project(w_clipped: ArrayLike, levels: QuantLevels) -> QuantizedTensor:
    """Associe chaque valeur (déjà dans [-α, α]) au niveau le plus proche."""
    x = _as_array(w_clipped)
    codes = _project_codes(x, levels).reshape(x.shape)
    cfg = QuantizerConfig(scheme=levels.scheme, bits=levels.bits, alpha=levels.alpha, mu=0.0, sigma=1.0)
    return QuantizedTensor(codes=codes, config=cfg, shape=tuple(x.shape))


def _normalized(x: np.ndarray, cfg: QuantizerConfig) -> Tuple[np.ndarray, QuantizerConfig]:
    if cfg.mu is None or cfg.sigma is None:
        mu, sigma = _stats(x)
    else:
        mu, sigma = cfg.mu, cfg.sigma
    cfg = cfg.with_stats(mu, sigma)
    return (x - cfg.mu) / cfg.sigma, cfg


def quantize(w: ArrayLike, cfg: QuantizerConfig) -> QuantizedTensor:
    """normalize → clip → project ; μ, σ, α sont conservés dans le résultat."""
    cfg.validate()
    x = _as_array(w)
    x_norm, cfg = _normalized(x, cfg)
    levels = levels_for(cfg.scheme, cfg.alpha, cfg.bits)
    codes = _project_codes(np.clip(x_norm, -cfg.alpha, cfg.alpha), levels).reshape(x.shape)
    return QuantizedTensor(codes=codes, config=cfg, shape=tuple(x.shape))


def dequantize_array(q: QuantizedTensor) -> np.ndarray:
    levels = q.levels
    codes = np.asarray(q.codes).reshape(-1)
    if codes.size != q.size:
        raise CorruptionError(f"{codes.size} codes pour une forme {q.shape}.")
    if codes.size and int(codes.max()) >= len(levels):
        raise CorruptionError(f"code {int(codes.max())} hors des {len(levels)} niveaux.")
    mu = 0.0 if q.config.mu is None else q.config.mu
    sigma = 1.0 if q.config.sigma is None else q.config.sigma
    out = sigma * levels.values[codes] + mu
    return out.reshape(q.shape).astype(np.float32)


def dequantize(q: QuantizedTensor) -> Tensor:
    """Poids effectif σ·q[code] + μ (domaine dé-normalisé)."""
    return Tensor(dequantize_array(q))


def quant_error(w: ArrayLike, q: QuantizedTensor) -> QuantError:
    """||W_norm - Ŵ_norm||² et sa moyenne par paramètre (domaine normalisé)."""
    x = _as_array(w)
    if tuple(x.shape) != tuple(q.shape):
        raise DimensionError(f"quant_error : formes {x.shape} et {q.shape}.")
    x_norm = (x - q.config.mu) / q.config.sigma
    diff = x_norm - q.values_normalized()
    total = float(np.sum(diff * diff))
    return QuantError(total=total, average=total / max(1, x.size))


# -------------------------
# Gradients STE
# -------------------------

def ste_backward_alpha(w_norm: ArrayLike, q: Union[QuantizedTensor, ArrayLike], alpha: float, upstream_grad: ArrayLike) -> float:
    """dL/dα = Σ upstream · dŴ/dα, calculé dans le domaine normalisé."""
    alpha = check_alpha(alpha)
    x = _as_array(w_norm)
    w_hat = q.values_normalized() if isinstance(q, QuantizedTensor) else _as_array(q)
    g = _as_array(upstream_grad)
    if x.shape != w_hat.shape or (g.shape != x.shape and g.size != 1):
        raise DimensionError("ste_backward_alpha : formes incompatibles.")
    dq_dalpha = np.where(np.abs(x) > alpha, np.sign(x), (w_hat - x) / alpha)
    return float(np.sum(g * dq_dalpha))


def ste_backward_w(upstream_grad: ArrayLike) -> np.ndarray:
    """dŴ/dW = 1 : le gradient passe tel quel vers le poids maître."""
    if isinstance(upstream_grad, Tensor):
        return upstream_grad.data.copy()
    return np.array(upstream_grad, copy=True)


def fake_quantize(w: Tensor, alpha: Tensor, scheme: QuantScheme, bits: int) -> Tuple[Tensor, QuantizedTensor]:
    """Passe avant QAT : W maître → Ŵ dé-normalisé, avec rétro-propagation STE vers W et α."""
    a = _f32(alpha.item())
    q = quantize(w, QuantizerConfig(scheme=QuantScheme.parse(scheme), bits=bits, alpha=a))
    sigma = q.config.sigma
    w_norm = (w.data.astype(np.float64) - q.config.mu) / sigma
    w_hat = q.values_normalized()

    def backward(g):
        g_alpha = ste_backward_alpha(w_norm, w_hat, q.config.alpha, sigma * np.asarray(g, dtype=np.float64))
        return ste_backward_w(g), np.full(alpha.shape, g_alpha)

    out = make_result("fake_quantize", dequantize_array(q), (w, alpha), backward)
    return out, q
