"""Randomized per-attribute feature transform and the training objectives.

For every sample ``i`` and attribute ``s`` a partner sample ``r(i, s)`` from
the same batch is drawn together with two mixing coefficients.  The
attribute-specific feature ``f_i^s`` is pulled towards the partner's
``f_r^s``:

* labels agree on ``s``: norms and unit directions are mixed separately
  (norm-direction separated interpolation, NDSI);
* labels differ: plain convex interpolation.

Objectives built on the transformed bundle:

``eq3``   posterior invariance.  For each ``s`` the classifier sees the
          transformed sum with slot ``s`` swapped back to the original
          ``f_i^s`` and must still predict ``a_i^s``.  C inferences/sample.
``eq4``   one inference on the fully transformed sum against per-attribute
          mixed soft targets ``alpha a_i + (1 - alpha) a_r``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import model as M
from . import numcore as nc
from .numcore import DimensionError, Tensor

NORM_EPS = 1e-8
MODES = ("baseline", "eq3", "eq4", "mixup_input")


class Batch(NamedTuple):
    x: np.ndarray       # (n, D)
    labels: np.ndarray  # (n, C) in {0, 1}


@dataclass
class TransformDraw:
    alpha: np.ndarray    # (n, C) in [0, 1]
    beta: np.ndarray     # (n, C) in [0, 1]
    partner: np.ndarray  # (n, C) int, partner[i, s] != i

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


@dataclass
class GResult:
    parts: Tensor        # transformed parts (n, C, K)
    sum: Tensor          # (n, K)
    ndsi_mask: np.ndarray  # (n, C) True where the NDSI branch produced the output
    same_label: np.ndarray  # (n, C) True where a_i^s == a_r^s


def draw_transforms(batch_size: int, C: int, seed) -> TransformDraw:
    """Uniform mixing coefficients and within-batch partners.

    For fixed ``i`` the partners across attributes are distinct whenever
    ``batch_size > C``; otherwise the available ``batch_size - 1`` partners
    are cycled through in a random order.
    """
    if batch_size < 2:
        raise ValueError("draw_transforms needs batch_size >= 2 so a partner exists")
    rng = np.random.default_rng(seed)
    alpha = rng.random((batch_size, C))
    beta = rng.random((batch_size, C))
    keys = rng.random((batch_size, batch_size))
    np.fill_diagonal(keys, np.inf)
    order = np.argsort(keys, axis=1)[:, :batch_size - 1]
    partner = order[:, np.arange(C) % (batch_size - 1)]
    return TransformDraw(alpha, beta, partner)


def degenerate_draws(batch_size: int, C: int) -> TransformDraw:
    """alpha = beta = 1 everywhere: G becomes the identity."""
    partner = np.repeat(((np.arange(batch_size) + 1) % batch_size)[:, None], C, axis=1)
    return TransformDraw(np.ones((batch_size, C)), np.ones((batch_size, C)), partner)


def _check_coef(c, name: str) -> np.ndarray:
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return c


def plain_interp(f_a, f_b, alpha) -> Tensor:
    """alpha * f_a + (1 - alpha) * f_b, broadcasting alpha over the last axis."""
    f_a, f_b = nc.as_tensor(f_a), nc.as_tensor(f_b)
    if f_a.shape != f_b.shape:
        raise DimensionError(f"plain_interp: {f_a.shape} vs {f_b.shape}")
    alpha = _check_coef(alpha, "alpha")
    return f_a * alpha + f_b * (1.0 - alpha)


def ndsi(f_a, f_b, alpha, beta) -> Tensor:
    """Mix norms with ``beta`` and unit directions with ``alpha``.

    Evaluated as ``c_a f_a + c_b f_b`` with
    ``c_a = alpha * n_mix / |f_a|`` and ``c_b = (1 - alpha) * n_mix / |f_b|``,
    which is the product form expanded; it makes the endpoints exact
    (``alpha = beta = 1`` gives ``f_a`` bit for bit).  The mixed direction is
    not renormalised.  Rows where either norm is below ``NORM_EPS`` fall back
    to plain interpolation.
    """
    f_a, f_b = nc.as_tensor(f_a), nc.as_tensor(f_b)
    if f_a.shape != f_b.shape:
        raise DimensionError(f"ndsi: {f_a.shape} vs {f_b.shape}")
    alpha = _check_coef(alpha, "alpha")
    beta = _check_coef(beta, "beta")
    n_a = nc.op_l2_norm(f_a, axis=-1, keepdims=True)
    n_b = nc.op_l2_norm(f_b, axis=-1, keepdims=True)
    degenerate = (n_a.data < NORM_EPS) | (n_b.data < NORM_EPS)
    # shift degenerate denominators away from zero; those rows are discarded below
    safe_a = n_a + degenerate.astype(np.float64) if degenerate.any() else n_a
    safe_b = n_b + degenerate.astype(np.float64) if degenerate.any() else n_b
    n_mix = n_a * beta + n_b * (1.0 - beta)
    c_a = (n_mix * alpha) / safe_a
    c_b = (n_mix * (1.0 - alpha)) / safe_b
    mixed = f_a * c_a + f_b * c_b
    if degenerate.any():
        mixed = nc.op_where(np.broadcast_to(degenerate, mixed.shape), plain_interp(f_a, f_b, alpha), mixed)
    return mixed


def apply_G(parts, labels: np.ndarray, draws: TransformDraw, use_ndsi: bool = True) -> GResult:
    """Transform every attribute-specific feature of a batch.

    ``parts`` is (n, C, K); returns the transformed parts, their sum and the
    branch masks.  With ``use_ndsi=False`` the NDSI operation is never run.
    """
    parts = nc.as_tensor(parts)
    n, C, K = parts.shape
    if draws.shape != (n, C):
        raise DimensionError(f"draws {draws.shape} do not match parts {(n, C)}")
    labels = np.asarray(labels)
    cols = np.broadcast_to(np.arange(C), (n, C))
    partner_parts = nc.op_index(parts, (draws.partner, cols))
    same = labels == labels[draws.partner, cols]
    alpha = draws.alpha[:, :, None]
    out = plain_interp(parts, partner_parts, alpha)
    mask = same if use_ndsi else np.zeros_like(same)
    if mask.any():
        mixed = ndsi(parts, partner_parts, alpha, draws.beta[:, :, None])
        out = nc.op_where(np.broadcast_to(mask[:, :, None], out.shape), mixed, out)
    return GResult(out, nc.op_sum_parts(out), mask, same)


def mixed_targets(labels: np.ndarray, draws: TransformDraw) -> np.ndarray:
    """alpha a_i + (1 - alpha) a_r, written so equal labels stay exact."""
    a = np.asarray(labels, dtype=np.float64)
    n, C = a.shape
    a_r = a[draws.partner, np.broadcast_to(np.arange(C), (n, C))]
    return a_r + draws.alpha * (a - a_r)


# -- objectives -------------------------------------------------------------------

def _bce_from_bundle(bundle: M.FeatureBundle, labels, p) -> Tensor:
    return nc.op_bce(M.classify(bundle.sum, p), np.asarray(labels, dtype=np.float64))


def _posterior_invariant_from(bundle: M.FeatureBundle, g: GResult, labels, p) -> Tensor:
    n, C, K = bundle.parts.shape
    # f~ - f~^s + f^s, grouped as f~ + (f^s - f~^s) so an untouched slot is exact
    swapped = nc.op_add(nc.op_reshape(g.sum, (n, 1, K)), bundle.parts - g.parts)
    post = M.classify(nc.op_reshape(swapped, (n * C, K)), p)
    post = nc.op_reshape(post, (n, C, C))
    diag = np.arange(C)
    own = nc.op_index(post, (slice(None), diag, diag))
    return nc.op_bce(own, np.asarray(labels, dtype=np.float64))


def _mixup_efficient_from(g: GResult, labels, draws, p) -> Tensor:
    return nc.op_bce(M.classify(g.sum, p), mixed_targets(labels, draws))


def loss_baseline_bce(batch: Batch, p) -> Tensor:
    return _bce_from_bundle(M.bundle(batch.x, p), batch.labels, p)


def loss_posterior_invariant(batch: Batch, p, draws: TransformDraw, use_ndsi: bool = True) -> Tensor:
    b = M.bundle(batch.x, p)
    g = apply_G(b.parts, batch.labels, draws, use_ndsi)
    return _posterior_invariant_from(b, g, batch.labels, p)


def loss_mixup_efficient(batch: Batch, p, draws: TransformDraw, use_ndsi: bool = True) -> Tensor:
    b = M.bundle(batch.x, p)
    g = apply_G(b.parts, batch.labels, draws, use_ndsi)
    return _mixup_efficient_from(g, batch.labels, draws, p)


def loss_mixup_input(batch: Batch, p, draws: TransformDraw) -> Tensor:
    """Classic input-space MixUp: one coefficient and one partner per sample.

    Uses column 0 of the draw; the whole label vector is mixed with the same
    coefficient.
    """
    lam = draws.alpha[:, :1]
    j = draws.partner[:, 0]
    x_mix = plain_interp(batch.x, batch.x[j], lam)
    a = np.asarray(batch.labels, dtype=np.float64)
    targets = a[j] + lam * (a - a[j])
    post = M.classify(M.bundle(x_mix, p).sum, p)
    return nc.op_bce(post, targets)


def total_loss(batch: Batch, p, draws: TransformDraw | None, mode: str, lam: float = 1.0,
               use_ndsi: bool = True, stats: dict | None = None) -> Tensor:
    """Training objective for one batch.

    baseline: BCE.  eq3: BCE + lam * posterior-invariance term.
    eq4: the mixed-target objective alone.  mixup_input: input MixUp BCE.
    ``stats`` (optional) receives branch counts from the transform.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if mode == "baseline":
        return loss_baseline_bce(batch, p)
    if draws is None:
        raise ValueError(f"mode {mode!r} needs a TransformDraw")
    if mode == "mixup_input":
        return loss_mixup_input(batch, p, draws)
    b = M.bundle(batch.x, p)
    if mode == "eq3" and lam == 0:
        return _bce_from_bundle(b, batch.labels, p)
    g = apply_G(b.parts, batch.labels, draws, use_ndsi)
    if stats is not None:
        stats["ndsi"] = stats.get("ndsi", 0) + int(g.ndsi_mask.sum())
        stats["same_label"] = stats.get("same_label", 0) + int(g.same_label.sum())
        stats["plain"] = stats.get("plain", 0) + int(g.ndsi_mask.size - g.ndsi_mask.sum())
    if mode == "eq4":
        return _mixup_efficient_from(g, batch.labels, draws, p)
    bce = _bce_from_bundle(b, batch.labels, p)
    return bce + _posterior_invariant_from(b, g, batch.labels, p) * lam
