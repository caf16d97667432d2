from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from app.core.errors import ConfigurationError, UsageError
from app.core.models import count_params
from app.core.quantizer import QuantizerConfig, QuantScheme
from app.services.analysis import (
    HISTOGRAM_COLUMNS,
    LayerRecord,
    correlation_check,
    error_by_bits,
    layer_histogram,
    layer_report,
    model_histograms,
    write_histogram_csv,
    write_layer_report,
)

UNIFORM4 = QuantizerConfig(scheme=QuantScheme.UNIFORM, bits=4, alpha=3.0)
POT4 = QuantizerConfig(scheme=QuantScheme.POT, bits=4, alpha=3.0)


def _avg_error(w, cfg):
    return error_by_bits(w, cfg, [cfg.bits])[cfg.bits]


def _peaked(n: int = 10000) -> np.ndarray:
    rng = np.random.default_rng(8)
    bulk = rng.normal(0.0, 0.05, size=int(n * 0.9))
    tails = rng.choice([-1.0, 1.0], size=n - bulk.size)
    return np.concatenate([bulk, tails])


# -------------------------
# Histogrammes
# -------------------------

@pytest.mark.parametrize("cfg", [UNIFORM4, POT4])
def test_histogram_masses_sum_to_one(cfg):
    w = np.random.default_rng(0).standard_normal(2000)
    h = layer_histogram(w, cfg, bins=41)
    assert h.edges.shape == (42,)
    assert h.pre_mass.sum() == pytest.approx(1.0)
    assert h.post_mass.sum() == pytest.approx(1.0)
    assert np.count_nonzero(h.post_mass) <= 2 ** cfg.bits - 1


def test_constant_layer_is_a_single_spike():
    h = layer_histogram(np.full(50, 0.25), UNIFORM4, bins=11)
    assert h.pre_mass[5] == pytest.approx(1.0)
    assert h.post_mass[5] == pytest.approx(1.0)


def test_invalid_bins():
    with pytest.raises(ConfigurationError):
        layer_histogram(np.ones(4), UNIFORM4, bins=0)


def test_pot_concentrates_gaussian_mass_on_inner_levels():
    w = np.random.default_rng(1).standard_normal(20000)

    def inner(cfg):
        h = layer_histogram(w, cfg)
        centers = 0.5 * (h.edges[:-1] + h.edges[1:])
        return h.post_mass[np.abs(centers) <= 0.26].sum()

    assert inner(POT4) > inner(UNIFORM4) + 0.1


# -------------------------
# Erreur de quantification
# -------------------------

def test_error_decreases_with_bitwidth():
    w = np.random.default_rng(2).standard_normal(5000)
    errors = error_by_bits(w, UNIFORM4, [2, 4, 8])
    assert errors[8] < errors[4] < errors[2]


def test_pot_wins_on_peaked_weights():
    w = _peaked()
    assert _avg_error(w, POT4) <= _avg_error(w, UNIFORM4)


def test_uniform_wins_on_flat_weights():
    w = np.random.default_rng(3).uniform(-1.0, 1.0, size=10000)
    assert _avg_error(w, POT4) >= _avg_error(w, UNIFORM4)


# -------------------------
# Rapport par couche
# -------------------------

def test_layer_report_covers_parameterized_layers(small_model, small_model_config):
    records = layer_report(small_model, UNIFORM4, input_shape=(40, 16))
    names = [r.name for r in records]
    assert names == ["frame1", "bn1", "frame2", "bn2", "frame3", "bn3", "embedding"]
    assert sum(r.params for r in records) == count_params(small_model_config)
    by_name = {r.name: r for r in records}
    assert not by_name["bn1"].quantized and by_name["bn1"].bits == 32
    emb = by_name["embedding"]
    assert emb.quantized and emb.scheme == "uniform" and emb.bits == 4
    assert emb.macs == 64 * 8
    assert np.isfinite(emb.kurtosis)
    assert 0.0 <= emb.clipped_fraction <= 1.0
    assert emb.avg_error == pytest.approx(emb.total_error / (64 * 8))


def test_layer_report_uses_learned_assignment(small_model):
    small_model.apply_quantization(small_model.config.with_quantization("pot", 3, alpha=2.0).quant)
    records = {r.name: r for r in layer_report(small_model, input_shape=(40, 16))}
    assert records["frame2"].scheme == "pot"
    assert records["frame2"].alpha == pytest.approx(2.0)


def test_layer_report_needs_quantization(small_model):
    with pytest.raises(ConfigurationError):
        layer_report(small_model)


def _record(name, params, err):
    return LayerRecord(name=name, kind="fc", shape=(1,), params=params, macs=0, avg_error=err, total_error=err)


def test_spearman_extremes():
    up = [_record("a", 10, 0.1), _record("b", 20, 0.2), _record("c", 30, 0.4)]
    down = [_record("a", 10, 0.4), _record("b", 20, 0.2), _record("c", 30, 0.1)]
    assert correlation_check(up).rho == pytest.approx(1.0)
    assert correlation_check(down).rho == pytest.approx(-1.0)
    assert correlation_check(up).layers == 3


def test_spearman_needs_three_layers():
    with pytest.raises(UsageError):
        correlation_check([_record("a", 1, 0.1), _record("b", 2, 0.2)])


# -------------------------
# Fichiers
# -------------------------

def test_report_files(tmp_path, small_model):
    records = layer_report(small_model, POT4, input_shape=(40, 16))
    report = tmp_path / "layers.json"
    write_layer_report(report, records, extra={"model_id": "ecapa-toy-8"})
    payload = json.loads(report.read_text(encoding="utf-8"))
    assert len(payload["layers"]) == len(records)
    assert payload["correlation"]["layers"] == 4
    assert payload["model_id"] == "ecapa-toy-8"

    hist = model_histograms(small_model, POT4, bins=21)
    assert set(hist) == {"frame1", "frame2", "frame3", "embedding"}
    path = tmp_path / "hist.csv"
    write_histogram_csv(path, hist)
    with path.open(encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == HISTOGRAM_COLUMNS
    assert len(rows) == 4 * 21
