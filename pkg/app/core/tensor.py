from __future__ import annotations

"""Tenseur dense + bande (tape) de différentiation automatique inverse.

Principe :
- ``Tensor`` porte ``data`` (np.ndarray, float32 par défaut), ``grad`` (alloué à
  la demande) et ``requires_grad``.
- Les opérations (``app.core.ops``) ne sont enregistrées que dans une ``Tape``
  active et seulement si une entrée demande un gradient. Hors bande, le calcul
  est « sans gradient » (évaluation, extraction d'embeddings).
- ``Tape.backward(loss)`` parcourt les nœuds dans l'ordre inverse
  d'enregistrement (qui est un ordre topologique), puis la bande est consommée.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import NumericError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DTYPES: List[type] = [np.float32]
_TAPES: List["Tape"] = []


# -------------------------
# Précision
# -------------------------

def default_dtype() -> type:
    return _DTYPES[-1]


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Change la précision des nouveaux tenseurs (ex: float64 pour un gradcheck)."""
    _DTYPES.append(dtype)
    try:
        yield
    finally:
        _DTYPES.pop()


# -------------------------
# Tensor
# -------------------------

class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=default_dtype())
        if arr.size == 0:
            raise ValueError("Tensor vide.")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Construit sans copie (sauf conversion de type)."""
        t = cls.__new__(cls)
        t.data = np.asarray(arr).astype(default_dtype(), copy=False)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = ""
        t._tape = None
        return t

    # ---- accès ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # ---- opérateurs (délégués à app.core.ops) ----
    def __add__(self, other):
        from app.core import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from app.core import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from app.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.core import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.core import ops
        return ops.mul(other, self)

    def __matmul__(self, other):
        from app.core import ops
        return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -------------------------
# Tape
# -------------------------

@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Liste ordonnée des opérations d'une passe avant."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if _TAPES and _TAPES[-1] is self:
            _TAPES.pop()
        elif self in _TAPES:
            _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self.consumed:
            raise UsageError("Bande déjà consommée : relancer la passe avant.")
        output._tape = self
        self.nodes.append(_Node(op=op, output=output, inputs=inputs, backward=backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise UsageError("backward() déjà appelé sur cette bande.")
        if loss.size != 1:
            raise UsageError(f"La perte doit être scalaire (forme {loss.shape}).")
        if loss._tape is not self or not self.nodes:
            raise UsageError("La perte n'a pas été enregistrée sur cette bande.")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype)
                if t._tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    t.accumulate_grad(gi)

        self.consumed = True
        self.nodes = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor) -> None:
    """Rétro-propage depuis ``loss`` sur la bande qui l'a produite."""
    if loss._tape is None:
        raise UsageError("La perte n'a été produite sur aucune bande active.")
    loss._tape.backward(loss)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Enveloppe le résultat d'une opération et l'enregistre si nécessaire."""
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} : valeurs non finies.")
    out = Tensor.wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, tuple(inputs), backward_fn)
    return out
