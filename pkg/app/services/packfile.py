from __future__ import annotations

"""Lecture / écriture des packfiles (voir ``app.core.packformat`` pour la disposition).

Les niveaux ne sont pas stockés : ils sont recalculés depuis (schéma, b, α) au
chargement. Chaque charge utile est suivie de son CRC-32.
"""

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.errors import CorruptionError
from app.core.experiment import atomic_write_bytes
from app.core.models import ModelConfig, SpeakerModel, build_model, tensor_specs
from app.core.packformat import (
    FP32_BITS,
    HEADER,
    MAGIC,
    META,
    SCHEME_FP32,
    U32,
    VERSION,
    payload_nbytes,
)
from app.core.quantizer import QuantizedTensor, QuantizerConfig, QuantScheme, dequantize_array

logger = logging.getLogger(__name__)

_SCHEMES = {QuantScheme.UNIFORM.code: QuantScheme.UNIFORM, QuantScheme.POT.code: QuantScheme.POT}


# -------------------------
# Types
# -------------------------

@dataclass
class TensorRecord:
    name: str
    shape: Tuple[int, ...]
    scheme: int                        # 0 uniform, 1 pot, 255 fp32
    bits: int
    alpha: float = 0.0
    mu: float = 0.0
    sigma: float = 1.0
    codes: Optional[np.ndarray] = None   # uint8, enregistrements quantifiés
    values: Optional[np.ndarray] = None  # float32, enregistrements fp32

    @property
    def quantized(self) -> bool:
        return self.scheme != SCHEME_FP32

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def to_quantized(self) -> QuantizedTensor:
        if not self.quantized:
            raise ValueError(f"{self.name} : enregistrement pleine précision.")
        cfg = QuantizerConfig(
            scheme=_SCHEMES[self.scheme], bits=self.bits, alpha=self.alpha, mu=self.mu, sigma=self.sigma
        )
        return QuantizedTensor(codes=np.asarray(self.codes, dtype=np.uint8).reshape(self.shape), config=cfg, shape=self.shape)

    def dequantized(self) -> np.ndarray:
        if self.quantized:
            return dequantize_array(self.to_quantized())
        return np.asarray(self.values, dtype=np.float32).reshape(self.shape)

    @classmethod
    def from_quantized(cls, name: str, q: QuantizedTensor) -> "TensorRecord":
        return cls(
            name=name,
            shape=tuple(q.shape),
            scheme=q.config.scheme.code,
            bits=q.config.bits,
            alpha=q.config.alpha,
            mu=q.config.mu,
            sigma=q.config.sigma,
            codes=np.asarray(q.codes, dtype=np.uint8).reshape(-1),
        )

    @classmethod
    def from_array(cls, name: str, values: np.ndarray) -> "TensorRecord":
        values = np.asarray(values, dtype=np.float32)
        return cls(name=name, shape=tuple(values.shape), scheme=SCHEME_FP32, bits=FP32_BITS, values=values.reshape(-1))


@dataclass
class PackedModel:
    records: List[TensorRecord] = field(default_factory=list)
    version: int = VERSION

    def get(self, name: str) -> TensorRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(f"Tenseur absent du packfile : {name}")

    def names(self) -> List[str]:
        return [r.name for r in self.records]


# -------------------------
# Bits
# -------------------------

def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Codes sur ``bits`` bits, LSB d'abord, dernier octet complété par des zéros."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1, 1)
    planes = np.unpackbits(codes, axis=1, bitorder="little")[:, :bits]
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[: count * bits]
    return np.packbits(stream.reshape(count, bits), axis=1, bitorder="little").reshape(-1)


# -------------------------
# Encodage
# -------------------------

def _check_codes(rec: TensorRecord) -> None:
    codes = np.asarray(rec.codes)
    if codes.size != rec.size:
        raise CorruptionError(f"{rec.name} : {codes.size} codes pour la forme {rec.shape}.")
    limit = 2 ** rec.bits - 1
    if codes.size and int(codes.max()) >= limit:
        raise CorruptionError(f"{rec.name} : code {int(codes.max())} >= {limit} (valeur réservée).")


def encode(packed: PackedModel) -> bytes:
    out = bytearray(HEADER.pack(MAGIC, packed.version, len(packed.records)))
    for rec in packed.records:
        name = rec.name.encode("utf-8")
        out += U32.pack(len(name)) + name
        out += U32.pack(len(rec.shape))
        for d in rec.shape:
            out += U32.pack(int(d))
        out += META.pack(rec.scheme, rec.bits, rec.alpha, rec.mu, rec.sigma)
        if rec.quantized:
            _check_codes(rec)
            payload = pack_codes(rec.codes, rec.bits)
        else:
            payload = np.asarray(rec.values, dtype="<f4").reshape(-1).tobytes()
        out += payload
        out += U32.pack(zlib.crc32(payload))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"Fichier tronqué en lisant {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(U32.size, what))[0]


def decode(data: bytes, *, verify: bool = True) -> PackedModel:
    """``verify=False`` ignore les CRC (inspection d'un fichier endommagé)."""
    r = _Reader(data)
    magic, version, count = HEADER.unpack(r.take(HEADER.size, "l'en-tête"))
    if magic != MAGIC:
        raise CorruptionError(f"Magic invalide {magic!r}", offset=0)
    if version != VERSION:
        raise CorruptionError(f"Version {version} non supportée", offset=len(MAGIC))

    records: List[TensorRecord] = []
    for _ in range(count):
        start = r.pos
        try:
            name = r.take(r.u32("la longueur du nom"), "le nom").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError("Nom de tenseur non UTF-8", offset=start)
        rank = r.u32("le rang")
        shape = tuple(r.u32("une dimension") for _ in range(rank))
        meta_at = r.pos
        scheme, bits, alpha, mu, sigma = META.unpack(r.take(META.size, "les métadonnées"))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if scheme == SCHEME_FP32:
            if bits != FP32_BITS:
                raise CorruptionError(f"{name} : fp32 avec bits={bits}", offset=meta_at)
            nbytes = payload_nbytes(n, None)
        elif scheme in _SCHEMES:
            if not 2 <= bits <= 8:
                raise CorruptionError(f"{name} : bitwidth {bits} invalide", offset=meta_at)
            nbytes = payload_nbytes(n, bits)
        else:
            raise CorruptionError(f"{name} : schéma {scheme} inconnu", offset=meta_at)

        payload_at = r.pos
        payload = r.take(nbytes, f"la charge utile de {name}")
        crc = r.u32(f"le CRC de {name}")
        if verify and crc != zlib.crc32(payload):
            raise CorruptionError(f"{name} : CRC invalide", offset=payload_at)

        if scheme == SCHEME_FP32:
            rec = TensorRecord(
                name=name, shape=shape, scheme=scheme, bits=bits, alpha=alpha, mu=mu, sigma=sigma,
                values=np.frombuffer(payload, dtype="<f4").astype(np.float32),
            )
        else:
            codes = unpack_codes(payload, n, bits)
            bad = np.nonzero(codes >= 2 ** bits - 1)[0]
            if bad.size:
                raise CorruptionError(f"{name} : code réservé", offset=payload_at + int(bad[0]) * bits // 8)
            rec = TensorRecord(
                name=name, shape=shape, scheme=scheme, bits=bits, alpha=alpha, mu=mu, sigma=sigma, codes=codes,
            )
        records.append(rec)

    if r.pos != len(data):
        raise CorruptionError("Octets en trop après le dernier enregistrement", offset=r.pos)
    return PackedModel(records=records, version=version)


# -------------------------
# Modèle ↔ packfile
# -------------------------

def pack_model(model: SpeakerModel) -> PackedModel:
    """Enregistrements dans l'ordre de ``tensor_specs`` : codes pour les poids quantifiés."""
    params = model.parameters()
    buffers = model.buffers()
    quantized = model.quantized_weights()
    records: List[TensorRecord] = []
    for name, _, bits in tensor_specs(model.config):
        layer = name.rsplit(".", 1)[0]
        if bits is not None and layer in quantized:
            records.append(TensorRecord.from_quantized(name, quantized[layer]))
        elif name in params:
            records.append(TensorRecord.from_array(name, params[name].data))
        else:
            records.append(TensorRecord.from_array(name, buffers[name]))
    return PackedModel(records=records)


def pack(model: SpeakerModel, path: Path) -> int:
    """Écrit le packfile du modèle ; retourne le nombre d'octets."""
    data = encode(pack_model(model))
    atomic_write_bytes(Path(path), data)
    logger.info("Packfile écrit : %s (%d octets)", path, len(data))
    return len(data)


def unpack(path: Path, *, verify: bool = True) -> PackedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Packfile introuvable : {path}")
    return decode(path.read_bytes(), verify=verify)


def load_model(packed: PackedModel, cfg: ModelConfig) -> SpeakerModel:
    """Modèle d'inférence dont les poids sont les valeurs dé-quantifiées du packfile."""
    model = build_model(cfg.full_precision())
    expected = [name for name, _, _ in tensor_specs(cfg)]
    if packed.names() != expected:
        raise CorruptionError("Les tenseurs du packfile ne correspondent pas à la configuration du modèle.")
    for rec in packed.records:
        model.set_tensor(rec.name, rec.dequantized())
    return model


def scheme_name(code: int) -> str:
    return "fp32" if code == SCHEME_FP32 else _SCHEMES[code].value


def describe(path: Path) -> Dict[str, Any]:
    """En-tête et métadonnées de chaque enregistrement."""
    path = Path(path)
    data = path.read_bytes() if path.exists() else None
    if data is None:
        raise FileNotFoundError(f"Packfile introuvable : {path}")
    packed = decode(data)
    return {
        "magic": MAGIC.decode("ascii"),
        "version": packed.version,
        "tensor_count": len(packed.records),
        "file_bytes": len(data),
        "records": [
            {
                "name": rec.name,
                "shape": list(rec.shape),
                "scheme": scheme_name(rec.scheme),
                "scheme_byte": rec.scheme,
                "bits": rec.bits,
                "alpha": rec.alpha,
                "mu": rec.mu,
                "sigma": rec.sigma,
                "elements": rec.size,
                "payload_bytes": payload_nbytes(rec.size, None if not rec.quantized else rec.bits),
            }
            for rec in packed.records
        ],
    }
