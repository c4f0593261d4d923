"""Losses with analytic gradients w.r.t. descriptors (and class proxies).

Each ``*_rows`` function works on stacked descriptors, one pair/triple per
row, and returns per-row values plus per-row gradients. The single-sample
functions are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ZeroNormDenominator, _as_vec


@dataclass
class LossConfig:
    lam: float = 0.1
    cosface_scale: float = 16.0
    cosface_margin: float = 0.35
    triplet_margin: float = 0.3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be ≥ 0")
        if self.cosface_scale <= 0:
            raise ValueError("cosface_scale must be > 0")
        if not 0 <= self.cosface_margin < 1:
            raise ValueError("cosface_margin must lie in [0, 1)")
        if self.triplet_margin <= 0:
            raise ValueError("triplet_margin must be > 0")


def _row_norms(X: np.ndarray, what: str) -> np.ndarray:
    n = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(n == 0):
        raise ZeroNormDenominator(f"{what}: zero-norm descriptor")
    return n


def ratio_loss_rows(Xi: np.ndarray, Xj: np.ndarray):
    """``exp(1 - |x_i|/|x_j|)`` per row; returns ``(values, grad_i, grad_j)``."""
    ni, nj = _row_norms(Xi, "ratio_loss"), _row_norms(Xj, "ratio_loss")
    R = ni / nj
    v = np.exp(1.0 - R)
    gi = -(v / (ni * nj))[:, None] * Xi
    gj = (v * R / nj**2)[:, None] * Xj
    return v, gi, gj


def cosface_loss_rows(X: np.ndarray, targets, proxies: np.ndarray, s: float, m: float):
    """Large-margin cosine loss per row; returns ``(values, grad_X, grad_proxies)``.

    ``grad_proxies`` is summed over rows.
    """
    targets = np.asarray(targets, dtype=np.intp)
    nx = _row_norms(X, "cosface_loss")
    npr = _row_norms(proxies, "cosface_loss proxies")
    U = X / nx[:, None]
    P = proxies / npr[:, None]
    cos = U @ P.T  # (n, C)
    rows = np.arange(X.shape[0])
    logits = s * cos
    logits[rows, targets] -= s * m
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    values = log_z - logits[rows, targets]
    g = np.exp(logits - log_z[:, None])
    g[rows, targets] -= 1.0
    g *= s  # dL/dcos
    gX = (g @ P - np.sum(g * cos, axis=1)[:, None] * U) / nx[:, None]
    gP = (g.T @ U - np.sum(g * cos, axis=0)[:, None] * P) / npr[:, None]
    return values, gX, gP


def _cos_rows(A, B):
    na, nb = _row_norms(A, "cosine"), _row_norms(B, "cosine")
    Ua, Ub = A / na[:, None], B / nb[:, None]
    c = np.einsum("ij,ij->i", Ua, Ub)
    # d cos / dA and d cos / dB
    dA = (Ub - c[:, None] * Ua) / na[:, None]
    dB = (Ua - c[:, None] * Ub) / nb[:, None]
    return c, dA, dB


def triplet_loss_rows(A: np.ndarray, P: np.ndarray, N: np.ndarray, margin: float):
    """Hinge on cosine distance ``1 - cos``; returns ``(values, grad_a, grad_p, grad_n)``."""
    cp, dA_p, dP = _cos_rows(A, P)
    cn, dA_n, dN = _cos_rows(A, N)
    raw = (1 - cp) - (1 - cn) + margin
    active = (raw > 0).astype(np.float64)[:, None]
    values = np.maximum(raw, 0.0)
    return values, active * (dA_n - dA_p), -active * dP, active * dN


def ratio_loss(x_i, x_j):
    v, gi, gj = ratio_loss_rows(_as_vec(x_i)[None], _as_vec(x_j)[None])
    return float(v[0]), gi[0], gj[0]


def cosface_loss(x, target_class: int, proxies, s: float = 16.0, m: float = 0.35):
    v, gx, gp = cosface_loss_rows(_as_vec(x)[None], [target_class], np.asarray(proxies, dtype=np.float64), s, m)
    return float(v[0]), gx[0], gp


def triplet_loss(anchor, positive, negative, margin: float = 0.3):
    v, ga, gp, gn = triplet_loss_rows(_as_vec(anchor)[None], _as_vec(positive)[None],
                                      _as_vec(negative)[None], margin)
    return float(v[0]), ga[0], gp[0], gn[0]


def asl_loss(x_i, x_j, class_i: int, class_j: int, proxies, cfg: LossConfig):
    """Norm-ratio term plus ``lam`` times the mean CosFace loss of both members.

    ``x_i`` is the member expected to carry more content. Returns
    ``(value, grad_i, grad_j, grad_proxies)``.
    """
    r, gi, gj = ratio_loss(x_i, x_j)
    proxies = np.asarray(proxies, dtype=np.float64)
    gp = np.zeros_like(proxies)
    value = r
    if cfg.lam != 0:
        ci, gci, gpi = cosface_loss(x_i, class_i, proxies, cfg.cosface_scale, cfg.cosface_margin)
        cj, gcj, gpj = cosface_loss(x_j, class_j, proxies, cfg.cosface_scale, cfg.cosface_margin)
        half = 0.5 * cfg.lam
        value = r + half * (ci + cj)
        gi = gi + half * gci
        gj = gj + half * gcj
        gp = half * (gpi + gpj)
    return value, gi, gj, gp
