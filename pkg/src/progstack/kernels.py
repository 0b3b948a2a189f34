"""Forward and backward numerical kernels for the dilated-convolution recommender.

Every kernel is a pure function over numpy arrays. Backward passes are written
by hand; there is no graph-level autodiff. Arrays keep the dtype they come in
with, so the same code runs in fp32 for training and fp64 for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LN_EPS = 1e-6


def _check_ids(ids: np.ndarray, num_rows: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= num_rows):
        raise IndexError(
            f"ids out of range [0, {num_rows - 1}]: min={ids.min()} max={ids.max()}"
        )


# --- embedding ----------------------------------------------------------------

def embedding_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Gather rows of ``table``; id 0 is the padding row and is looked up like any other."""
    ids = np.asarray(ids)
    _check_ids(ids, table.shape[0])
    return table[ids]


def embedding_backward(table_shape: tuple[int, ...], ids: np.ndarray,
                       dout: np.ndarray) -> np.ndarray:
    """Scatter-add ``dout`` into a zero table gradient (row 0 included)."""
    ids = np.asarray(ids)
    _check_ids(ids, table_shape[0])
    dtable = np.zeros(table_shape, dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, table_shape[1]))
    return dtable


# --- causal dilated convolution -----------------------------------------------

def _im2col(x: np.ndarray, kernel_width: int, dilation: int) -> np.ndarray:
    # tap i reads position j - (kw-1-i)*dilation; the last tap is the current step
    batch, steps, channels = x.shape
    pad = (kernel_width - 1) * dilation
    xp = np.concatenate([np.zeros((batch, pad, channels), dtype=x.dtype), x], axis=1)
    cols = [xp[:, i * dilation:i * dilation + steps] for i in range(kernel_width)]
    return np.concatenate(cols, axis=2)


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int) -> None:
    if int(dilation) != dilation or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"expected x[B,t,k_in] and w[kw,k_in,k_out], got {x.shape}, {w.shape}")
    if w.shape[0] < 1 or x.shape[2] != w.shape[1] or b.shape != (w.shape[2],):
        raise ValueError(f"shape mismatch: x{x.shape} w{w.shape} b{b.shape}")


def causal_dilated_conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                          dilation: int) -> np.ndarray:
    """Causal 1-D convolution over the time axis of ``x[B, t, k_in]``.

    ``out[:, j]`` mixes ``x[:, j - (kw-1-i)*dilation] @ w[i]`` for taps ``i``;
    positions before the sequence start read zeros.
    """
    _check_conv(x, w, b, dilation)
    kw, k_in, k_out = w.shape
    cols = _im2col(x, kw, dilation)
    out = cols.reshape(-1, kw * k_in) @ w.reshape(kw * k_in, k_out)
    return out.reshape(x.shape[0], x.shape[1], k_out) + b


def causal_dilated_conv1d_backward(x: np.ndarray, w: np.ndarray, dilation: int,
                                   dout: np.ndarray):
    """Return ``(dx, dw, db)`` for :func:`causal_dilated_conv1d`."""
    kw, k_in, k_out = w.shape
    batch, steps, _ = x.shape
    cols = _im2col(x, kw, dilation).reshape(-1, kw * k_in)
    dflat = dout.reshape(-1, k_out)
    dw = (cols.T @ dflat).reshape(kw, k_in, k_out)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(kw * k_in, k_out).T).reshape(batch, steps, kw, k_in)
    pad = (kw - 1) * dilation
    dxp = np.zeros((batch, steps + pad, k_in), dtype=dout.dtype)
    for i in range(kw):
        dxp[:, i * dilation:i * dilation + steps] += dcols[:, :, i]
    return dxp[:, pad:], dw, db


# --- layer norm ---------------------------------------------------------------

@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = LN_EPS) -> tuple[np.ndarray, LayerNormCache]:
    """Normalize over the last (channel) axis; returns output and a backward cache."""
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ValueError(f"shape mismatch: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, LayerNormCache(xhat, inv_std, gamma)


def layer_norm_backward(cache: LayerNormCache, dout: np.ndarray):
    """Return ``(dx, dgamma, dbeta)``."""
    k = dout.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgamma = (dout * cache.xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    dxhat = dout * cache.gamma
    dx = (cache.inv_std / k) * (
        k * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - cache.xhat * (dxhat * cache.xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# --- relu / residual ----------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, dy, np.zeros_like(dy))


def scaled_residual_add(x: np.ndarray, f: np.ndarray, alpha) -> np.ndarray:
    """``alpha * f + x``. With ``alpha == 0`` the result equals ``x`` bit for bit."""
    if x.shape != f.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {f.shape}")
    return alpha * f + x


def scaled_residual_add_backward(f: np.ndarray, alpha, dy: np.ndarray):
    """Return ``(dx, df, dalpha)``; ``dalpha`` is a scalar of ``dy``'s dtype."""
    return dy, alpha * dy, np.asarray((f * dy).sum(), dtype=dy.dtype)


# --- output -------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                          mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    Returns ``(loss, grad_logits)``; the gradient is zero at unmasked positions.
    """
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask selects no positions; nothing to supervise")
    _check_ids(targets[mask], logits.shape[-1])

    sel = logits[mask]
    tgt = targets[mask]
    z = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(count), tgt]
    loss = float(nll.sum() / count)

    probs = np.exp(z - lse[:, None])
    probs[np.arange(count), tgt] -= 1
    grad = np.zeros_like(logits)
    grad[mask] = probs / count
    return loss, grad


# --- gradient check -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    num_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    worst: str = ""
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(params: dict[str, np.ndarray], loss_fn: Callable[[], float],
               analytic: dict[str, np.ndarray], step: float = 1e-5,
               tolerance: float = 1e-4, max_per_param: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``params`` are perturbed in place and restored; ``loss_fn`` must read them.
    With ``max_per_param`` set, that many entries are sampled from each tensor.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs fp64 parameters; {name} is {p.dtype}")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, 0.0, 0, tolerance=tolerance)
    for name, p in params.items():
        flat = p.reshape(-1)  # view: p is contiguous
        if not np.shares_memory(flat, p):
            raise ValueError(f"{name} must be contiguous to be perturbed in place")
        g = analytic[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn()
            flat[i] = orig - step
            minus = loss_fn()
            flat[i] = orig
            numeric = (plus - minus) / (2 * step)
            err = relative_error(float(g[i]), numeric)
            report.max_abs_error = max(report.max_abs_error, abs(float(g[i]) - numeric))
            worst = max(worst, err)
        report.per_param[name] = worst
        report.num_checked += len(idx)
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst = name
    return report
