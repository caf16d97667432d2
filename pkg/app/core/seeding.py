from __future__ import annotations

"""Dérivation des générateurs aléatoires à partir d'une graine unique.

Schéma : ``SeedSequence(seed, spawn_key=(crc32(part) ...))`` puis un générateur
Philox (à compteur). Chaque consommateur (corpus, init du modèle, ordre des
batchs, sonde) obtient son propre flux, indépendant de l'ordre des appels.
"""

import zlib
from typing import Union

import numpy as np

Part = Union[str, int]


def _key(part: Part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *consumer: Part) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in consumer))
    return np.random.Generator(np.random.Philox(ss))
