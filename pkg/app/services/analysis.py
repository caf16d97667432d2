from __future__ import annotations

"""Diagnostics par couche : histogrammes des poids, erreur de quantification
moyenne, paramètres, MACs, kurtosis et corrélation de Spearman."""

import csv
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import kurtosis, spearmanr

from app.core.errors import ConfigurationError, DimensionError, UsageError
from app.core.experiment import atomic_write_json, atomic_write_text
from app.core.models import SpeakerModel, layer_macs
from app.core.quantizer import QuantizerConfig, normalize, quant_error, quantize

logger = logging.getLogger(__name__)

DEFAULT_BINS = 101
HISTOGRAM_COLUMNS = ("layer", "bin_left", "bin_right", "pre_mass", "post_mass")


@dataclass
class LayerHistogram:
    edges: np.ndarray       # (bins + 1,) sur [-1, 1]
    pre_mass: np.ndarray    # poids normalisés, écrêtés, ramenés à [-1, 1]
    post_mass: np.ndarray   # masse par niveau après projection


@dataclass
class LayerRecord:
    name: str
    kind: str
    shape: Tuple[int, ...]
    params: int
    macs: int
    scheme: str = "fp32"
    bits: int = 32
    alpha: Optional[float] = None
    total_error: Optional[float] = None
    avg_error: Optional[float] = None
    kurtosis: Optional[float] = None
    clipped_fraction: Optional[float] = None

    @property
    def quantized(self) -> bool:
        return self.avg_error is not None

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    pvalue: float
    layers: int


def layer_histogram(weights: np.ndarray, qcfg: QuantizerConfig, bins: int = DEFAULT_BINS) -> LayerHistogram:
    """Histogrammes (densité de masse) avant / après projection, sur [-1, 1]."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise DimensionError("layer_histogram : couche vide.")
    if bins < 1:
        raise ConfigurationError("bins doit être >= 1.")
    w_norm, _, _ = normalize(w)
    alpha = qcfg.alpha
    scaled = np.clip(w_norm.data.astype(np.float64), -alpha, alpha) / alpha
    q = quantize(w, qcfg)
    post = q.values_normalized() / q.config.alpha
    edges = np.linspace(-1.0, 1.0, bins + 1)
    pre_counts, _ = np.histogram(scaled, bins=edges)
    post_counts, _ = np.histogram(post, bins=edges)
    return LayerHistogram(edges=edges, pre_mass=pre_counts / w.size, post_mass=post_counts / w.size)


def _layer_config(model: SpeakerModel, name: str, qcfg: Optional[QuantizerConfig]) -> Optional[QuantizerConfig]:
    if qcfg is not None:
        return qcfg
    layer = model.weight_layers()[name]
    return layer.quant.config if layer.quant is not None else None


def layer_report(
    model: SpeakerModel,
    qcfg: Optional[QuantizerConfig] = None,
    input_shape: Sequence[int] = (200, 64),
) -> List[LayerRecord]:
    """Un enregistrement par couche paramétrée (les BN restent en pleine précision).

    ``qcfg`` impose une configuration à toutes les couches quantifiables ;
    sinon on utilise l'assignation (et l'α appris) du modèle.
    """
    macs = layer_macs(model.config, input_shape)
    weight_layers = model.weight_layers()
    records: List[LayerRecord] = []
    any_quant = False
    for d in model.descriptors:
        if d.kind == "pool":
            continue
        rec = LayerRecord(name=d.name, kind=d.kind, shape=d.weight_shape, params=d.param_count, macs=macs.get(d.name, 0))
        if d.name in weight_layers:
            cfg = _layer_config(model, d.name, qcfg)
            if cfg is not None:
                any_quant = True
                w = weight_layers[d.name].weight.data.astype(np.float64)
                q = quantize(w, cfg)
                err = quant_error(w, q)
                w_norm = (w - q.config.mu) / q.config.sigma
                rec.scheme, rec.bits, rec.alpha = cfg.scheme.value, cfg.bits, q.config.alpha
                rec.total_error, rec.avg_error = err.total, err.average
                rec.kurtosis = float(kurtosis(w_norm.reshape(-1), fisher=True))
                rec.clipped_fraction = float(np.mean(np.abs(w_norm) > q.config.alpha))
        records.append(rec)
    if not any_quant:
        raise ConfigurationError("layer_report : aucune couche quantifiée (passer qcfg).")
    return records


def correlation_check(records: Sequence[LayerRecord]) -> CorrelationResult:
    """Corrélation de rang (Spearman) entre nombre de paramètres et erreur moyenne."""
    rows = [r for r in records if r.quantized]
    if len(rows) < 3:
        raise UsageError(f"correlation_check : au moins 3 couches quantifiées nécessaires ({len(rows)}).")
    res = spearmanr([r.params for r in rows], [r.avg_error for r in rows])
    rho = float(res[0])
    logger.info("Spearman(paramètres, erreur moyenne) = %.3f sur %d couches", rho, len(rows))
    return CorrelationResult(rho=rho, pvalue=float(res[1]), layers=len(rows))


def error_by_bits(weights: np.ndarray, base: QuantizerConfig, bits: Sequence[int]) -> Dict[int, float]:
    """Erreur moyenne de quantification pour chaque bitwidth (α et schéma fixés)."""
    w = np.asarray(weights, dtype=np.float64)
    out = {}
    for b in bits:
        cfg = QuantizerConfig(scheme=base.scheme, bits=int(b), alpha=base.alpha)
        out[int(b)] = quant_error(w, quantize(w, cfg)).average
    return out


# -------------------------
# Fichiers
# -------------------------

def model_histograms(model: SpeakerModel, qcfg: Optional[QuantizerConfig] = None, bins: int = DEFAULT_BINS) -> Dict[str, LayerHistogram]:
    out = {}
    for name, layer in model.weight_layers().items():
        cfg = _layer_config(model, name, qcfg)
        if cfg is not None:
            out[name] = layer_histogram(layer.weight.data, cfg, bins)
    return out


def write_layer_report(path: Path, records: Sequence[LayerRecord], extra: Optional[Dict[str, object]] = None) -> None:
    payload: Dict[str, object] = {"layers": [r.to_dict() for r in records]}
    try:
        corr = correlation_check(records)
        payload["correlation"] = {"rho": corr.rho, "pvalue": corr.pvalue, "layers": corr.layers}
    except UsageError:
        payload["correlation"] = None
    payload.update(extra or {})
    atomic_write_json(Path(path), payload)


def write_histogram_csv(path: Path, histograms: Dict[str, LayerHistogram]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(HISTOGRAM_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for layer, h in histograms.items():
        for i in range(h.pre_mass.size):
            writer.writerow({
                "layer": layer,
                "bin_left": f"{h.edges[i]:.6f}",
                "bin_right": f"{h.edges[i + 1]:.6f}",
                "pre_mass": f"{h.pre_mass[i]:.8f}",
                "post_mass": f"{h.post_mass[i]:.8f}",
            })
    atomic_write_text(Path(path), buf.getvalue())
