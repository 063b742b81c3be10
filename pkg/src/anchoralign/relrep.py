"""Token-to-anchor relative representations and cross-attention pooling.

Per modality the forward map is::

    R[t, k]     = cos(z_t, a_k)
    alpha[:, k] = softmax_t(R[:, k] / tau_p)      (masked rows excluded)
    p[k]        = sum_t alpha[t, k] * R[t, k]
    h           = p / ||p||

All reductions over tokens and anchors go through :func:`ordered_sum`, which
sorts before accumulating. The result is therefore independent of token
order, anchor order and of zero padding, bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding_io import TokenSequence
from .errors import CorruptionError, DataError, FormatError, NumericError, UsageError

NORM_EPS = 1e-12
POOLINGS = ("cap", "mean", "global")

ANCHOR_MAGIC = b"PALA"
ANCHOR_VERSION = 1
_ANCHOR_HEADER = struct.Struct("<4sIBII")


def ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` in ascending value order, sequentially.

    Sequential accumulation over sorted values makes the sum invariant to any
    permutation of the inputs and to inserted zeros.
    """
    s = np.moveaxis(np.sort(x, axis=axis), axis, 0)
    acc = s[0].copy()
    for row in s[1:]:
        acc += row
    return acc


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=-1))


def unit_dot(zhat: np.ndarray, ahat: np.ndarray) -> np.ndarray:
    """``zhat[..., t, :] . ahat[k, :]`` for every token and anchor, shape ``(..., T, K)``.

    Accumulates over the embedding axis one coordinate at a time: every entry
    sees the same operation sequence whatever its position, batch layout or
    padding, and memory stays at ``O(T*K)``.
    """
    out = zhat[..., :, None, 0] * ahat[:, 0]
    for d in range(1, zhat.shape[-1]):
        out += zhat[..., :, None, d] * ahat[:, d]
    return out


@dataclass(frozen=True, eq=False)
class AnchorSet:
    anchors: np.ndarray
    modality: int = 0

    def __post_init__(self):
        a = np.array(self.anchors, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise UsageError(f"anchors must be a K x D matrix with K >= 1, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite anchor entry", stage="anchors")
        norms = _row_norms(a)
        bad = np.flatnonzero(norms < NORM_EPS)
        if bad.size:
            raise NumericError(f"anchor {int(bad[0])} has zero norm", stage="anchors")
        a.flags.writeable = False
        object.__setattr__(self, "anchors", a)

    @property
    def K(self) -> int:
        return self.anchors.shape[0]

    @property
    def D(self) -> int:
        return self.anchors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, AnchorSet):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.anchors, other.anchors)


@dataclass
class RelRepMatrix:
    R: np.ndarray
    mask: np.ndarray
    alpha: Optional[np.ndarray] = None
    tau_p: Optional[float] = None


@dataclass
class PooledRep:
    p: np.ndarray
    h: Optional[np.ndarray] = None
    norm: Optional[float] = None


# ---------------------------------------------------------------------------
# per-sample reference path
# ---------------------------------------------------------------------------

def relative_representation(seq: TokenSequence, anchors: AnchorSet) -> RelRepMatrix:
    z = seq.tokens
    if z.shape[1] != anchors.D:
        raise UsageError(f"token dim {z.shape[1]} != anchor dim {anchors.D}")
    znorm = _row_norms(z)
    bad = np.flatnonzero(znorm < NORM_EPS)
    if bad.size:
        raise DataError(f"sample {seq.sample_id}: token {int(bad[0])} has (near-)zero norm")
    a = anchors.anchors
    zhat = z / np.maximum(znorm, NORM_EPS)[:, None]
    ahat = a / np.maximum(_row_norms(a), NORM_EPS)[:, None]
    R = unit_dot(zhat, ahat)
    return RelRepMatrix(R=R, mask=np.ones(z.shape[0], dtype=bool))


def _masked_softmax_columns(R: np.ndarray, mask: np.ndarray, tau_p: float, axis: int) -> np.ndarray:
    # mask broadcasts against R with the token axis at `axis`
    scaled = np.where(mask, R / tau_p, -np.inf)
    shift = np.max(scaled, axis=axis, keepdims=True)
    e = np.where(mask, np.exp(scaled - shift), 0.0)
    denom = np.expand_dims(ordered_sum(e, axis=axis), axis)
    return e / denom


def cap_attention(rel: RelRepMatrix, tau_p: float, mask=None) -> RelRepMatrix:
    if not tau_p > 0:
        raise UsageError(f"tau_p must be > 0, got {tau_p}")
    mask = rel.mask if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (rel.R.shape[0],):
        raise UsageError(f"mask shape {mask.shape} does not match T={rel.R.shape[0]}")
    if not mask.any():
        raise UsageError("cap_attention needs at least one unmasked token")
    alpha = _masked_softmax_columns(rel.R, mask[:, None], float(tau_p), axis=0)
    return RelRepMatrix(R=rel.R, mask=mask, alpha=alpha, tau_p=float(tau_p))


def uniform_attention(rel: RelRepMatrix, mask=None) -> RelRepMatrix:
    """Mean-pooling weights: every unmasked token gets ``1/T``."""
    mask = rel.mask if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise UsageError("uniform_attention needs at least one unmasked token")
    alpha = np.where(mask[:, None], 1.0 / n, 0.0) * np.ones_like(rel.R)
    return RelRepMatrix(R=rel.R, mask=mask, alpha=alpha, tau_p=None)


def cap_aggregate(rel: RelRepMatrix) -> PooledRep:
    if rel.alpha is None:
        raise UsageError("attention weights not computed")
    terms = np.where(rel.mask[:, None], rel.alpha * rel.R, 0.0)
    return PooledRep(p=ordered_sum(terms, axis=0))


def normalize(pooled: PooledRep) -> PooledRep:
    norm = float(np.sqrt(ordered_sum(pooled.p * pooled.p, axis=-1)))
    if not norm >= NORM_EPS:
        raise NumericError(f"pooled representation has norm {norm:.3g}", stage="normalize")
    return PooledRep(p=pooled.p, h=pooled.p / norm, norm=norm)


def global_token(seq: TokenSequence) -> TokenSequence:
    """Collapse a sequence to its single mean token."""
    mean = ordered_sum(seq.tokens, axis=0) / seq.T
    return TokenSequence(mean[None, :], None, seq.sample_id)


def forward(seq: TokenSequence, anchors: AnchorSet, tau_p: float = 0.03, pooling: str = "cap"):
    """Reference single-sample pipeline; returns ``(RelRepMatrix, PooledRep)``."""
    if pooling not in POOLINGS:
        raise UsageError(f"unknown pooling {pooling!r}")
    if pooling == "global":
        seq = global_token(seq)
    rel = relative_representation(seq, anchors)
    rel = cap_attention(rel, tau_p) if pooling == "cap" else uniform_attention(rel)
    return rel, normalize(cap_aggregate(rel))


# ---------------------------------------------------------------------------
# batched path
# ---------------------------------------------------------------------------

def pad_batch(seqs, T_max: Optional[int] = None):
    """Stack sequences into ``(B, T_max, D)`` zero-padded tokens plus a boolean mask."""
    if not seqs:
        raise UsageError("empty batch")
    dims = {s.D for s in seqs}
    if len(dims) != 1:
        raise UsageError(f"batch mixes embedding dims {sorted(dims)}")
    T_max = max(s.T for s in seqs) if T_max is None else T_max
    if T_max < max(s.T for s in seqs):
        raise UsageError("T_max smaller than the longest sequence")
    tokens = np.zeros((len(seqs), T_max, dims.pop()))
    mask = np.zeros((len(seqs), T_max), dtype=bool)
    for b, s in enumerate(seqs):
        tokens[b, : s.T] = s.tokens
        mask[b, : s.T] = True
    return tokens, mask


@dataclass
class BatchForward:
    """Forward intermediates for a padded batch, kept for the backward pass."""

    zhat: np.ndarray  # (B, T, D)
    mask: np.ndarray  # (B, T)
    ahat: np.ndarray  # (K, D)
    anorm: np.ndarray  # (K,)
    R: np.ndarray  # (B, T, K)
    alpha: np.ndarray  # (B, T, K)
    p: np.ndarray  # (B, K)
    pnorm: np.ndarray  # (B,)
    h: np.ndarray  # (B, K)
    pooling: str = "cap"
    tau_p: Optional[float] = None
    extra: dict = field(default_factory=dict)


def forward_batch(tokens: np.ndarray, mask: np.ndarray, anchors: AnchorSet, tau_p: float = 0.03, pooling: str = "cap") -> BatchForward:
    if pooling not in POOLINGS:
        raise UsageError(f"unknown pooling {pooling!r}")
    if pooling == "cap" and not tau_p > 0:
        raise UsageError(f"tau_p must be > 0, got {tau_p}")
    tokens = np.asarray(tokens, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if tokens.ndim != 3 or mask.shape != tokens.shape[:2]:
        raise UsageError("expected tokens (B, T, D) with mask (B, T)")
    if tokens.shape[2] != anchors.D:
        raise UsageError(f"token dim {tokens.shape[2]} != anchor dim {anchors.D}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise UsageError(f"sample {int(np.flatnonzero(counts == 0)[0])} has no unmasked tokens")
    z = np.where(mask[:, :, None], tokens, 0.0)
    if pooling == "global":
        z = (ordered_sum(z, axis=1) / counts[:, None])[:, None, :]
        mask = np.ones((z.shape[0], 1), dtype=bool)
        counts = np.ones(z.shape[0], dtype=counts.dtype)
    znorm = _row_norms(z)
    bad = np.argwhere(mask & (znorm < NORM_EPS))
    if bad.size:
        raise DataError(f"batch item {int(bad[0, 0])}: token {int(bad[0, 1])} has (near-)zero norm")
    zhat = z / np.maximum(znorm, NORM_EPS)[:, :, None]

    a = anchors.anchors
    anorm = _row_norms(a)
    ahat = a / np.maximum(anorm, NORM_EPS)[:, None]
    R = unit_dot(zhat, ahat)

    if pooling == "cap":
        alpha = _masked_softmax_columns(R, mask[:, :, None], float(tau_p), axis=1)
    else:
        alpha = np.where(mask[:, :, None], 1.0 / counts[:, None, None], 0.0) * np.ones_like(R)
    p = ordered_sum(np.where(mask[:, :, None], alpha * R, 0.0), axis=1)
    pnorm = np.sqrt(ordered_sum(p * p, axis=-1))
    if not np.all(pnorm >= NORM_EPS):
        b = int(np.flatnonzero(~(pnorm >= NORM_EPS))[0])
        raise NumericError(f"batch item {b}: pooled representation has norm {pnorm[b]:.3g}", stage="normalize")
    h = p / pnorm[:, None]
    return BatchForward(zhat, mask, ahat, anorm, R, alpha, p, pnorm, h, pooling, tau_p if pooling == "cap" else None)


def encode(seqs, anchors: AnchorSet, tau_p: float = 0.03, pooling: str = "cap", batch_size: int = 256) -> np.ndarray:
    """Pooled, normalized representations ``h`` for many sequences, shape ``(N, K)``."""
    out = np.empty((len(seqs), anchors.K))
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        tokens, mask = pad_batch(chunk)
        out[start : start + len(chunk)] = forward_batch(tokens, mask, anchors, tau_p, pooling).h
    return out


def encode_pooled(seqs, anchors: AnchorSet, tau_p: float = 0.03, pooling: str = "cap", batch_size: int = 256) -> np.ndarray:
    """Pre-normalization pooled vectors ``p`` for many sequences, shape ``(N, K)``."""
    out = np.empty((len(seqs), anchors.K))
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        tokens, mask = pad_batch(chunk)
        out[start : start + len(chunk)] = forward_batch(tokens, mask, anchors, tau_p, pooling).p
    return out


# ---------------------------------------------------------------------------
# anchor files
# ---------------------------------------------------------------------------

def anchors_to_bytes(anchors: AnchorSet, tau_p: float, tau: float) -> bytes:
    return b"".join(
        [
            _ANCHOR_HEADER.pack(ANCHOR_MAGIC, ANCHOR_VERSION, anchors.modality, anchors.K, anchors.D),
            np.ascontiguousarray(anchors.anchors, dtype="<f8").tobytes(),
            struct.pack("<dd", tau_p, tau),
        ]
    )


def anchors_from_buffer(buf: bytes, offset: int = 0, source="<buffer>"):
    """Parse one anchor block; returns ``(AnchorSet, tau_p, tau, end_offset)``."""
    if offset + _ANCHOR_HEADER.size > len(buf):
        raise CorruptionError(f"{source}: truncated anchor header")
    magic, version, modality, K, D = _ANCHOR_HEADER.unpack_from(buf, offset)
    if magic != ANCHOR_MAGIC:
        raise FormatError(f"{source}: bad anchor magic {magic!r}")
    if version != ANCHOR_VERSION:
        raise FormatError(f"{source}: unsupported anchor format version {version}")
    offset += _ANCHOR_HEADER.size
    end = offset + 8 * K * D + 16
    if end > len(buf):
        raise CorruptionError(f"{source}: truncated anchor payload")
    a = np.frombuffer(buf, dtype="<f8", count=K * D, offset=offset).reshape(K, D).astype(np.float64)
    tau_p, tau = struct.unpack_from("<dd", buf, offset + 8 * K * D)
    return AnchorSet(a, modality), tau_p, tau, end


def save_anchors(anchors: AnchorSet, path, tau_p: float, tau: float) -> None:
    Path(path).write_bytes(anchors_to_bytes(anchors, tau_p, tau))


def load_anchors(path):
    buf = Path(path).read_bytes()
    anchors, tau_p, tau, end = anchors_from_buffer(buf, 0, path)
    if end != len(buf):
        raise CorruptionError(f"{path}: trailing bytes after anchor block")
    return anchors, tau_p, tau
