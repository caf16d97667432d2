from __future__ import annotations

"""Primitives différentiables.

Chaque primitive calcule sa sortie avec numpy puis déclare sa règle inverse via
``make_result``. Les réductions accumulent en float64 puis reviennent à la
précision courante ; l'ordre de réduction est fixe (gauche → droite).
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, DimensionError, NumericError
from app.core.tensor import Tensor, as_tensor, default_dtype, make_result

Axis = Union[None, int, Tuple[int, ...]]


# -------------------------
# Helpers
# -------------------------

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Somme ``g`` sur les axes diffusés pour revenir à ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} : formes incompatibles {a.shape} et {b.shape}.")


def _check_int(name: str, value, minimum: int) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < minimum:
        raise ConfigurationError(f"{name} invalide : {value!r} (entier >= {minimum} attendu).")
    return int(value)


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _count(shape: Tuple[int, ...], axis: Axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


# -------------------------
# Elementwise
# -------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return make_result("relu", np.where(mask, a.data, 0), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt : argument négatif.")
    out = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out),)

    return make_result("sqrt", out, (a,), backward)


# -------------------------
# Réductions
# -------------------------

def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        return (_expand(g, a.shape, axis, keepdims),)

    return make_result("sum", out, (a,), backward)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    n = _count(a.shape, axis)
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        return (_expand(g, a.shape, axis, keepdims) / n,)

    return make_result("mean", out, (a,), backward)


def var(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Variance de population (ddof=0)."""
    n = _count(a.shape, axis)
    x64 = a.data.astype(np.float64)
    centered = x64 - np.mean(x64, axis=axis, keepdims=True)
    out = np.mean(centered * centered, axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand(g, a.shape, axis, keepdims) * (2.0 / n) * centered,)

    return make_result("var", out, (a,), backward)


# -------------------------
# Forme
# -------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape : {a.shape} -> {tuple(shape)} impossible.")

    def backward(g):
        return (g.reshape(a.shape),)

    return make_result("reshape", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat : formes incompatibles.")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result("concat", out, tuple(tensors), backward)


# -------------------------
# Algèbre linéaire / convolutions
# -------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Produit ``a (..., n) @ b (n, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul : dimensions internes incompatibles {a.shape} x {b.shape}.")
    n, m = b.shape

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, n).T @ g.reshape(-1, m)
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), backward)


def conv_output_length(length: int, k: int, stride: int = 1, pad: int = 0, dilation: int = 1) -> int:
    return (length + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """Convolution temporelle. ``x`` : (T, c1) ou (B, T, c1) ; ``w`` : (k, c1, c2)."""
    stride = _check_int("stride", stride, 1)
    pad = _check_int("pad", pad, 0)
    dilation = _check_int("dilation", dilation, 1)
    if x.ndim not in (2, 3) or w.ndim != 3:
        raise DimensionError(f"conv1d : formes {x.shape} / {w.shape} non supportées.")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    _, t_in, c1 = xd.shape
    k, wc1, c2 = w.shape
    if wc1 != c1:
        raise DimensionError(f"conv1d : canaux d'entrée {c1} != {wc1}.")
    span = dilation * (k - 1) + 1
    if span > t_in + 2 * pad:
        raise DimensionError(f"conv1d : noyau ({span}) plus long que l'entrée ({t_in} + 2*{pad}).")
    t_out = conv_output_length(t_in, k, stride, pad, dilation)
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))

    def tap(j: int) -> slice:
        start = j * dilation
        return slice(start, start + stride * (t_out - 1) + 1, stride)

    out = np.zeros((xd.shape[0], t_out, c2), dtype=np.result_type(xd, w.data))
    for j in range(k):
        out += xp[:, tap(j), :] @ w.data[j]

    def backward(g):
        g3 = g[None] if squeeze else g
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g3.reshape(-1, c2)
        for j in range(k):
            gw[j] = xp[:, tap(j), :].reshape(-1, c1).T @ g2
            gx[:, tap(j), :] += g3 @ w.data[j].T
        gx = gx[:, pad:pad + t_in, :]
        return (gx[0] if squeeze else gx), gw

    return make_result("conv1d", out[0] if squeeze else out, (x, w), backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolution 2D minimale. ``x`` : (H, W, c1) ou (B, H, W, c1) ; ``w`` : (k, k, c1, c2)."""
    stride = _check_int("stride", stride, 1)
    pad = _check_int("pad", pad, 0)
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d : formes {x.shape} / {w.shape} non supportées.")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    _, h_in, w_in, c1 = xd.shape
    k, k2, wc1, c2 = w.shape
    if k != k2 or wc1 != c1:
        raise DimensionError(f"conv2d : noyau {w.shape} incompatible avec {c1} canaux.")
    if k > h_in + 2 * pad or k > w_in + 2 * pad:
        raise DimensionError("conv2d : noyau plus grand que l'entrée.")
    h_out = conv_output_length(h_in, k, stride, pad)
    w_out = conv_output_length(w_in, k, stride, pad)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))

    def tap(i: int, n_out: int) -> slice:
        return slice(i, i + stride * (n_out - 1) + 1, stride)

    out = np.zeros((xd.shape[0], h_out, w_out, c2), dtype=np.result_type(xd, w.data))
    for i in range(k):
        for j in range(k):
            out += xp[:, tap(i, h_out), tap(j, w_out), :] @ w.data[i, j]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g4.reshape(-1, c2)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), tap(i, h_out), tap(j, w_out), slice(None))
                gw[i, j] = xp[sl].reshape(-1, c1).T @ g2
                gx[sl] += g4 @ w.data[i, j].T
        gx = gx[:, pad:pad + h_in, pad:pad + w_in, :]
        return (gx[0] if squeeze else gx), gw

    return make_result("conv2d", out[0] if squeeze else out, (x, w), backward)


# -------------------------
# Normalisation
# -------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    running: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tensor:
    """Normalisation par canal (dernier axe).

    ``running`` : statistiques (moyenne, variance) figées pour l'inférence ; sinon
    statistiques du batch (variance de population).
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm : gamma/beta {gamma.shape} pour {c} canaux.")
    axes = tuple(range(x.ndim - 1))
    x64 = x.data.astype(np.float64)
    if running is None:
        mu = x64.mean(axis=axes)
        v = x64.var(axis=axes)
    else:
        mu = np.asarray(running[0], dtype=np.float64)
        v = np.asarray(running[1], dtype=np.float64)
    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = (x64 - mu) * inv_std
    out = xhat * gamma.data + beta.data
    n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        gxhat = g * gamma.data
        ggamma = np.sum(g * xhat, axis=axes)
        gbeta = np.sum(g, axis=axes)
        if running is None:
            gx = (inv_std / n) * (
                n * gxhat - np.sum(gxhat, axis=axes) - xhat * np.sum(gxhat * xhat, axis=axes)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_result("batchnorm", out, (x, gamma, beta), backward)


# -------------------------
# Pertes / angles
# -------------------------

def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Entropie croisée moyenne. ``logits`` : (C,) ou (B, C) ; ``target`` : indice(s)."""
    z = logits.data.astype(np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if z.ndim != 2 or tgt.shape != (z.shape[0],):
        raise DimensionError(f"softmax_cross_entropy : logits {logits.shape}, cibles {tgt.shape}.")
    if np.any(tgt < 0) or np.any(tgt >= z.shape[1]):
        raise DimensionError("softmax_cross_entropy : indice de classe hors limites.")
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(logsumexp - z[rows, tgt]))

    def backward(g):
        probs = np.exp(z - logsumexp[:, None])
        probs[rows, tgt] -= 1.0
        probs *= float(np.asarray(g).reshape(-1)[0]) / z.shape[0]
        return (probs[0] if squeeze else probs,)

    return make_result("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


def cos_angle(a: Tensor, b: Tensor) -> Tensor:
    """Cosinus entre les lignes de ``a`` (B, D) ou (D,) et celles de ``b`` (C, D)."""
    if b.ndim != 2 or a.shape[-1] != b.shape[1]:
        raise DimensionError(f"cos_angle : formes {a.shape} / {b.shape}.")
    squeeze = a.ndim == 1
    ad = a.data[None] if squeeze else a.data
    na = np.linalg.norm(ad, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cos_angle : vecteur de norme nulle.")
    ua = ad / na
    ub = b.data / nb
    cos = ua @ ub.T

    def backward(g):
        g2 = g[None] if squeeze else g
        # d(u)/d(x) = (I - u u^T) / |x|
        dua = g2 @ ub
        ga = (dua - ua * np.sum(dua * ua, axis=1, keepdims=True)) / na
        dub = g2.T @ ua
        gb = (dub - ub * np.sum(dub * ub, axis=1, keepdims=True)) / nb
        return (ga[0] if squeeze else ga), gb

    return make_result("cos_angle", cos[0] if squeeze else cos, (a, b), backward)


def angular_margin(cosine: Tensor, target, margin: float) -> Tensor:
    """Remplace cos θ par cos(θ + m) sur la colonne cible de chaque ligne."""
    c = cosine.data
    squeeze = c.ndim == 1
    c2 = (c[None] if squeeze else c).astype(np.float64)
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if tgt.shape != (c2.shape[0],):
        raise DimensionError("angular_margin : une cible par ligne attendue.")
    if np.any(tgt < 0) or np.any(tgt >= c2.shape[1]):
        raise DimensionError("angular_margin : indice de classe hors limites.")
    rows = np.arange(c2.shape[0])
    ct = np.clip(c2[rows, tgt], -1.0, 1.0)
    cos_m, sin_m = np.cos(margin), np.sin(margin)
    out = c2.copy()
    # cos(θ + m) = cos θ cos m - sin θ sin m
    out[rows, tgt] = ct * cos_m - np.sqrt(np.maximum(1.0 - ct * ct, 0.0)) * sin_m
    dtarget = cos_m + ct * sin_m / np.sqrt(np.maximum(1.0 - ct * ct, 1e-7))

    def backward(g):
        g2 = (g[None] if squeeze else g).copy()
        g2[rows, tgt] *= dtarget
        return (g2[0] if squeeze else g2,)

    return make_result("angular_margin", out[0] if squeeze else out, (cosine,), backward)


def scalar(value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=default_dtype()))
