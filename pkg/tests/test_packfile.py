from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import CorruptionError
from app.core.models import ModelConfig, build_model, count_params, model_size_bytes
from app.core.packformat import HEADER_BYTES, META, U32, payload_nbytes, record_nbytes
from app.core.quantizer import QuantScheme
from app.services.packfile import (
    PackedModel,
    TensorRecord,
    decode,
    describe,
    encode,
    load_model,
    pack,
    pack_codes,
    pack_model,
    unpack,
    unpack_codes,
)


def _fp32_pack() -> PackedModel:
    return PackedModel(records=[
        TensorRecord.from_array("a.bias", np.arange(5, dtype=np.float32)),
        TensorRecord(name="b.weight", shape=(2, 3), scheme=QuantScheme.UNIFORM.code, bits=3,
                     alpha=2.0, mu=0.5, sigma=0.25, codes=np.array([0, 1, 2, 3, 4, 6], dtype=np.uint8)),
    ])


def _payload_offset(name: str, rank: int) -> int:
    return HEADER_BYTES + U32.size + len(name) + U32.size * (1 + rank) + META.size


# -------------------------
# Tailles et bits
# -------------------------

def test_payload_sizes():
    assert payload_nbytes(1000, 4) == 500
    assert payload_nbytes(1000, 3) == 375
    assert payload_nbytes(3, 3) == 2
    assert payload_nbytes(10, None) == 40


def test_code_packing_is_lsb_first():
    assert pack_codes(np.array([1, 2]), 4) == bytes([0x21])
    assert pack_codes(np.array([5, 6, 1]), 3) == bytes([0b01110101, 0])


@pytest.mark.parametrize("bits", [2, 3, 5, 8])
def test_code_unpacking(bits):
    codes = np.random.default_rng(bits).integers(0, 2 ** bits - 1, size=37).astype(np.uint8)
    assert np.array_equal(unpack_codes(pack_codes(codes, bits), codes.size, bits), codes)


# -------------------------
# Encodage
# -------------------------

def test_encoded_length_matches_record_arithmetic():
    data = encode(_fp32_pack())
    assert len(data) == HEADER_BYTES + record_nbytes("a.bias", (5,), None) + record_nbytes("b.weight", (2, 3), 3)
    assert data[:4] == b"QSVW"


def test_decode_then_encode_is_byte_identical():
    data = encode(_fp32_pack())
    assert encode(decode(data)) == data
    rec = decode(data).get("b.weight")
    assert rec.codes.tolist() == [0, 1, 2, 3, 4, 6]
    assert rec.alpha == 2.0 and rec.mu == 0.5 and rec.sigma == 0.25


def test_dequantized_record_values():
    rec = decode(encode(_fp32_pack())).get("b.weight")
    # niveaux uniformes 3 bits, α = 2 : {-2, -4/3, -2/3, 0, 2/3, 4/3, 2}
    expected = 0.25 * np.array([-2.0, -4 / 3, -2 / 3, 0.0, 2 / 3, 2.0]) + 0.5
    np.testing.assert_allclose(rec.dequantized().reshape(-1), expected, rtol=1e-6)


def test_crc_detects_a_flipped_bit():
    data = bytearray(encode(_fp32_pack()))
    at = _payload_offset("a.bias", 1) + 6
    data[at] ^= 0x10
    with pytest.raises(CorruptionError) as exc:
        decode(bytes(data))
    assert exc.value.offset == _payload_offset("a.bias", 1)
    assert "offset" in str(exc.value)
    decode(bytes(data), verify=False)


def test_bad_magic():
    data = encode(_fp32_pack())
    with pytest.raises(CorruptionError) as exc:
        decode(b"QSVX" + data[4:])
    assert exc.value.offset == 0


def test_unsupported_version():
    data = bytearray(encode(_fp32_pack()))
    data[4] = 9
    with pytest.raises(CorruptionError) as exc:
        decode(bytes(data))
    assert exc.value.offset == 4


def test_truncated_file_reports_offset():
    data = encode(_fp32_pack())
    with pytest.raises(CorruptionError) as exc:
        decode(data[:-2])
    assert exc.value.offset == len(data) - 4


def test_trailing_bytes():
    with pytest.raises(CorruptionError):
        decode(encode(_fp32_pack()) + b"\x00")


def test_reserved_code_is_rejected():
    bad = _fp32_pack()
    bad.records[1].codes = np.array([0, 1, 2, 3, 4, 7], dtype=np.uint8)
    with pytest.raises(CorruptionError):
        encode(bad)


# -------------------------
# Modèles
# -------------------------

@pytest.mark.parametrize("scheme, bits", [("uniform", 8), ("pot", 4), ("uniform", 3)])
def test_packfile_size_matches_model_size(tmp_path, small_model, scheme, bits):
    small_model.apply_quantization(small_model.config.with_quantization(scheme, bits).quant)
    n = pack(small_model, tmp_path / "m.qsvw")
    assert n == model_size_bytes(small_model.config)
    assert (tmp_path / "m.qsvw").stat().st_size == n


def test_fp32_pack_size(tmp_path, small_model):
    n = pack(small_model, tmp_path / "fp32.qsvw")
    assert n == model_size_bytes(small_model.config)


def test_pack_contains_every_parameter(small_model):
    packed = pack_model(build_model(small_model.config.with_quantization("uniform", 8)))
    params = sum(r.size for r in packed.records if not r.name.endswith(("running_mean", "running_var")))
    assert params == count_params(small_model.config)


def test_describe_reports_scheme_bytes(tmp_path, small_model):
    small_model.apply_quantization(small_model.config.with_quantization("uniform", 8).quant)
    path = tmp_path / "m.qsvw"
    pack(small_model, path)
    info = describe(path)
    assert info["magic"] == "QSVW" and info["version"] == 1
    records = {r["name"]: r for r in info["records"]}
    assert records["frame1.weight"]["scheme_byte"] == 0
    assert records["frame1.weight"]["bits"] == 8
    assert records["embedding.bias"]["scheme"] == "fp32"
    assert records["embedding.bias"]["scheme_byte"] == 255
    assert info["file_bytes"] == path.stat().st_size


def test_loaded_model_matches_quantized_inference(tmp_path, small_model):
    small_model.apply_quantization(small_model.config.with_quantization("pot", 4, alpha=2.5).quant)
    path = tmp_path / "m.qsvw"
    pack(small_model, path)
    loaded = load_model(unpack(path), small_model.config)
    assert not loaded.quant_layers()
    x = np.random.default_rng(6).standard_normal((2, 30, 16))
    np.testing.assert_allclose(loaded.embed(x), small_model.embed(x), rtol=1e-4, atol=1e-5)


def test_load_model_rejects_mismatched_config(tmp_path, small_model):
    path = tmp_path / "m.qsvw"
    pack(small_model, path)
    other = ModelConfig(arch="resnet-toy", channels=2, embed_dim=8, num_speakers=4, feat_dim=16)
    with pytest.raises(CorruptionError):
        load_model(unpack(path), other)


def test_missing_packfile(tmp_path):
    with pytest.raises(FileNotFoundError):
        unpack(tmp_path / "absent.qsvw")


# -------------------------
# Propriétés
# -------------------------

def _random_pack(rng: np.random.Generator) -> PackedModel:
    records = []
    for i in range(int(rng.integers(1, 6))):
        shape = tuple(int(d) for d in rng.integers(1, 7, size=int(rng.integers(0, 4))))
        n = int(np.prod(shape)) if shape else 1
        if rng.random() < 0.3:
            records.append(TensorRecord.from_array(f"t{i}.bias", rng.standard_normal(shape)))
            continue
        bits = int(rng.integers(2, 9))
        scheme = QuantScheme.UNIFORM if rng.random() < 0.5 else QuantScheme.POT
        records.append(TensorRecord(
            name=f"t{i}.weight", shape=shape, scheme=scheme.code, bits=bits,
            alpha=float(np.float32(rng.uniform(0.5, 4.0))),
            mu=float(np.float32(rng.normal())), sigma=float(np.float32(rng.uniform(0.1, 2.0))),
            codes=rng.integers(0, 2 ** bits - 1, size=n).astype(np.uint8),
        ))
    return PackedModel(records=records)


def test_randomized_round_trips_and_bit_flips():
    rng = np.random.default_rng(100)
    for _ in range(100):
        packed = _random_pack(rng)
        data = encode(packed)
        assert encode(decode(data)) == data
        first = packed.records[0]
        start = _payload_offset(first.name, len(first.shape))
        size = payload_nbytes(first.size, None if not first.quantized else first.bits)
        corrupted = bytearray(data)
        corrupted[start + int(rng.integers(size))] ^= 1 << int(rng.integers(8))
        with pytest.raises(CorruptionError):
            decode(bytes(corrupted))


def test_large_model_file_size_ratios(tmp_path):
    cfg = ModelConfig(channels=256, embed_dim=256, feat_dim=64)
    sizes = {}
    for bits in (32, 8, 4):
        model = build_model(cfg if bits == 32 else cfg.with_quantization("uniform", bits))
        sizes[bits] = pack(model, tmp_path / f"m{bits}.qsvw")
        assert sizes[bits] == model_size_bytes(model.config)
    assert 3.8 <= sizes[32] / sizes[8] <= 4.0
    assert 7.4 <= sizes[32] / sizes[4] <= 8.0
