"""Symmetric InfoNCE loss and hand-derived gradients w.r.t. both anchor sets.

Backward chain, per modality::

    dL/dh  ->  dp = (I - h h^T) dh / ||p||
           ->  dR[t,k] = dp[k] * alpha[t,k] * (1 + (R[t,k] - p[k]) / tau_p)
           ->  da_k = sum_t dR[t,k] * (zhat_t - R[t,k] * ahat_k) / ||a_k||

For uniform (mean / global) pooling the softmax term vanishes and
``dR = dp * alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError
from .relrep import AnchorSet, BatchForward, forward, forward_batch, ordered_sum, pad_batch

FAULTS = (None, "drop_softmax_term")


@dataclass
class GradientSet:
    d_anchors_v: np.ndarray
    d_anchors_l: np.ndarray
    loss_value: float


def _check(stage: str, *arrays) -> None:
    for x in arrays:
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite value at stage '{stage}'", stage=stage)


def _pairwise_logits(h_a: np.ndarray, h_b: np.ndarray, tau: float) -> np.ndarray:
    # elementwise products keep S(a, b) == S(b, a).T bit for bit
    return np.sum(h_a[:, None, :] * h_b[None, :, :], axis=-1) / tau


def _row_log_softmax(S: np.ndarray):
    shift = np.max(S, axis=1, keepdims=True)
    e = np.exp(S - shift)
    total = ordered_sum(e, axis=1)[:, None]
    return S - shift - np.log(total), e / total


def contrastive_loss(h_v: np.ndarray, h_l: np.ndarray, tau: float):
    """Return ``(loss, dL/dh_v, dL/dh_l)`` for the symmetric InfoNCE objective."""
    if not tau > 0:
        raise UsageError(f"tau must be > 0, got {tau}")
    if h_v.shape != h_l.shape:
        raise UsageError(f"batch shapes differ: {h_v.shape} vs {h_l.shape}")
    B = h_v.shape[0]
    # overflow surfaces as NumericError from _check below, not as a warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        S = _pairwise_logits(h_v, h_l, tau)
        logp_vl, soft_vl = _row_log_softmax(S)
        logp_lv, soft_lv = _row_log_softmax(S.T)
        idx = np.arange(B)
        loss = (ordered_sum(-logp_vl[idx, idx], axis=0) + ordered_sum(-logp_lv[idx, idx], axis=0)) / (2 * B)
        eye = np.eye(B)
        dS = ((soft_vl - eye) + (soft_lv - eye).T) / (2 * B)
        d_hv = dS @ h_l / tau
        d_hl = dS.T @ h_v / tau
    _check("contrastive", loss, d_hv, d_hl)
    return float(loss) + 0.0, d_hv, d_hl  # + 0.0 turns -0.0 into 0.0


def anchor_gradient(fw: BatchForward, d_h: np.ndarray, fault=None) -> np.ndarray:
    """Pull ``dL/dh`` (B, K) back to ``dL/dA`` (K, D) through one modality's forward."""
    h = fw.h
    d_p = (d_h - h * np.sum(h * d_h, axis=1, keepdims=True)) / fw.pnorm[:, None]
    _check("normalize", d_p)
    if fw.pooling == "cap" and fault != "drop_softmax_term":
        weight = fw.alpha * (1.0 + (fw.R - fw.p[:, None, :]) / fw.tau_p)
    else:
        weight = fw.alpha
    d_R = np.where(fw.mask[:, :, None], weight * d_p[:, None, :], 0.0)
    _check("pooling", d_R)
    direct = np.einsum("btk,btd->kd", d_R, fw.zhat)
    radial = np.einsum("btk,btk->k", d_R, fw.R)
    d_A = (direct - radial[:, None] * fw.ahat) / fw.anorm[:, None]
    _check("cosine", d_A)
    return d_A


def loss_and_grads(tokens_v, mask_v, tokens_l, mask_l, anchors_v: AnchorSet, anchors_l: AnchorSet,
                   tau_p: float, tau: float, pooling: str = "cap", fault=None) -> GradientSet:
    """Padded-tensor entry point used by the trainer."""
    if fault not in FAULTS:
        raise UsageError(f"unknown fault {fault!r}")
    if tokens_v.shape[0] != tokens_l.shape[0]:
        raise UsageError(f"batch lengths differ: {tokens_v.shape[0]} vs {tokens_l.shape[0]}")
    fw_v = forward_batch(tokens_v, mask_v, anchors_v, tau_p, pooling)
    fw_l = forward_batch(tokens_l, mask_l, anchors_l, tau_p, pooling)
    _check("forward", fw_v.h, fw_l.h)
    loss, d_hv, d_hl = contrastive_loss(fw_v.h, fw_l.h, tau)
    return GradientSet(anchor_gradient(fw_v, d_hv, fault), anchor_gradient(fw_l, d_hl, fault), loss)


def backward_batch(batch_v, batch_l, anchors_v: AnchorSet, anchors_l: AnchorSet, tau_p: float = 0.03,
                   tau: float = 0.07, pooling: str = "cap", fault=None) -> GradientSet:
    """Loss and exact analytic anchor gradients for a matched batch of sequences."""
    if len(batch_v) != len(batch_l):
        raise UsageError(f"batch lengths differ: {len(batch_v)} vs {len(batch_l)}")
    if len(batch_v) < 1:
        raise UsageError("empty batch")
    if not tau_p > 0 or not tau > 0:
        raise UsageError("temperatures must be > 0")
    tv, mv = pad_batch(batch_v)
    tl, ml = pad_batch(batch_l)
    return loss_and_grads(tv, mv, tl, ml, anchors_v, anchors_l, tau_p, tau, pooling, fault)


# ---------------------------------------------------------------------------
# finite-difference oracle (independent route: per-sample forward, scalar loss)
# ---------------------------------------------------------------------------

def _reference_h(seqs, anchors_matrix, modality, tau_p, pooling):
    anchors = AnchorSet(anchors_matrix, modality)
    return [forward(s, anchors, tau_p, pooling)[1].h for s in seqs]


def reference_loss(hs_v, hs_l, tau: float) -> float:
    """Symmetric InfoNCE evaluated term by term with scalar arithmetic."""
    B = len(hs_v)
    sim = [[float(np.dot(hs_v[i], hs_l[j])) / tau for j in range(B)] for i in range(B)]
    total = []
    for i in range(B):
        row = sim[i]
        col = [sim[j][i] for j in range(B)]
        for values in (row, col):
            m = max(values)
            lse = m + math.log(math.fsum(math.exp(v - m) for v in values))
            total.append(lse - sim[i][i])
    return math.fsum(total) / (2 * B)


def finite_difference_oracle(batch_v, batch_l, anchors_v: AnchorSet, anchors_l: AnchorSet, tau_p: float = 0.03,
                             tau: float = 0.07, step: float = 1e-5, pooling: str = "cap") -> GradientSet:
    """Central differences of the loss w.r.t. every anchor entry."""
    if not step > 0:
        raise UsageError(f"step must be > 0, got {step}")
    if len(batch_v) != len(batch_l):
        raise UsageError(f"batch lengths differ: {len(batch_v)} vs {len(batch_l)}")
    base_v = _reference_h(batch_v, anchors_v.anchors, anchors_v.modality, tau_p, pooling)
    base_l = _reference_h(batch_l, anchors_l.anchors, anchors_l.modality, tau_p, pooling)
    loss = reference_loss(base_v, base_l, tau)

    def partials(anchors: AnchorSet, seqs, as_vision: bool) -> np.ndarray:
        grad = np.zeros_like(anchors.anchors)
        for k, d in np.ndindex(*grad.shape):
            values = []
            for sign in (1.0, -1.0):
                a = anchors.anchors.copy()
                a[k, d] += sign * step
                hs = _reference_h(seqs, a, anchors.modality, tau_p, pooling)
                values.append(reference_loss(hs, base_l, tau) if as_vision else reference_loss(base_v, hs, tau))
            grad[k, d] = (values[0] - values[1]) / (2 * step)
        return grad

    return GradientSet(partials(anchors_v, batch_v, True), partials(anchors_l, batch_l, False), loss)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max over entries of ``|a - b| / max(1, |a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def gradient_discrepancy(analytic: GradientSet, oracle: GradientSet) -> float:
    return max(relative_error(analytic.d_anchors_v, oracle.d_anchors_v),
               relative_error(analytic.d_anchors_l, oracle.d_anchors_l))


def random_instance(rng: np.random.Generator, max_batch=4, max_anchors=8, max_tokens=6, max_dim=10):
    """A small random matched batch plus anchor sets, for gradient checking."""
    from .embedding_io import TokenSequence

    B = int(rng.integers(2, max_batch + 1))
    K = int(rng.integers(2, max_anchors + 1))
    D_v = int(rng.integers(2, max_dim + 1))
    D_l = int(rng.integers(2, max_dim + 1))
    batch_v = [TokenSequence(rng.standard_normal((int(rng.integers(1, max_tokens + 1)), D_v)), None, i) for i in range(B)]
    batch_l = [TokenSequence(rng.standard_normal((int(rng.integers(1, max_tokens + 1)), D_l)), None, i) for i in range(B)]
    anchors_v = AnchorSet(rng.standard_normal((K, D_v)), 0)
    anchors_l = AnchorSet(rng.standard_normal((K, D_l)), 1)
    return batch_v, batch_l, anchors_v, anchors_l
