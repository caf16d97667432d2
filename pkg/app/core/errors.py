from __future__ import annotations

"""Exceptions partagées par le noyau et les services.

Chaque exception dérive d'un type natif (ValueError, RuntimeError, ...) pour
rester compatible avec les ``except ValueError`` existants.
"""

from typing import Optional


class DimensionError(ValueError):
    """Formes incompatibles entre tenseurs."""


class ConfigurationError(ValueError):
    """Paramètre de configuration invalide (bitwidth, alpha, stride, ...)."""


class UsageError(RuntimeError):
    """Appel dans un état non autorisé (backward sur une bande consommée, ...)."""


class NumericError(ArithmeticError):
    """Valeur non finie ou norme nulle."""


class TrainingError(RuntimeError):
    """Divergence ou effondrement d'alpha pendant l'entraînement."""


class CorruptionError(ValueError):
    """Fichier ou codes invalides. ``offset`` : position en octets si connue."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
