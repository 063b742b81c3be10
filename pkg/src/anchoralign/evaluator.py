"""Retrieval, classification, dense labeling, anchor-overlap analysis and
attention heatmap export. Every ranking breaks ties toward the lower index."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embedding_io import TokenSequence
from .errors import UsageError
from .relrep import AnchorSet, cap_attention, relative_representation

DIRECTIONS = ("a2b", "b2a")


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    row_ids: list
    col_ids: list

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        self.row_ids = list(self.row_ids)
        self.col_ids = list(self.col_ids)
        if self.S.shape != (len(self.row_ids), len(self.col_ids)):
            raise UsageError(f"similarity shape {self.S.shape} does not match id lists")


def similarity_matrix(h_a: np.ndarray, h_b: np.ndarray, row_ids=None, col_ids=None) -> SimilarityMatrix:
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    return SimilarityMatrix(h_a @ h_b.T,
                            range(len(h_a)) if row_ids is None else row_ids,
                            range(len(h_b)) if col_ids is None else col_ids)


def rank_of(scores: np.ndarray, target: int) -> int:
    """0-based rank of ``scores[target]``; equal scores at lower indices rank first."""
    s = scores[target]
    return int(np.sum(scores > s) + np.sum(scores[:target] == s))


def _best_ranks(S: np.ndarray, matches: dict) -> list:
    return [min(rank_of(S[q], c) for c in cols) for q, cols in matches.items()]


def retrieval_eval(sim: SimilarityMatrix, pairs, ks: Sequence[int] = (1, 5, 10)) -> dict:
    """Recall@k in both directions: ``{"a2b": {k: r}, "b2a": {k: r}}``.

    Each distinct row (column) id is one query; it counts as a hit when any of
    its paired columns (rows) ranks within the top ``k``.
    """
    row_pos = {rid: i for i, rid in enumerate(sim.row_ids)}
    col_pos = {cid: j for j, cid in enumerate(sim.col_ids)}
    a2b, b2a = {}, {}
    for ra, cb in pairs:
        if ra not in row_pos or cb not in col_pos:
            raise UsageError(f"pair ({ra}, {cb}) not present in similarity matrix")
        a2b.setdefault(row_pos[ra], []).append(col_pos[cb])
        b2a.setdefault(col_pos[cb], []).append(row_pos[ra])
    if not a2b:
        raise UsageError("no pairs to evaluate")
    if any(k < 1 for k in ks):
        raise UsageError("k must be >= 1")
    ranks = {"a2b": np.array(_best_ranks(sim.S, a2b)), "b2a": np.array(_best_ranks(sim.S.T, b2a))}
    return {d: {int(k): float(np.mean(ranks[d] < k)) for k in ks} for d in DIRECTIONS}


def classify_predict(image_h: np.ndarray, class_h: np.ndarray) -> np.ndarray:
    scores = np.asarray(image_h) @ np.asarray(class_h).T
    return np.argmax(scores, axis=1)


def classify_eval(image_h: np.ndarray, class_h: np.ndarray, labels) -> float:
    """Top-1 accuracy of ``argmax_c h_image . h_class``."""
    labels = np.asarray(labels)
    C = len(class_h)
    if labels.shape != (len(image_h),):
        raise UsageError("one label per image required")
    if np.any((labels < 0) | (labels >= C)):
        raise UsageError(f"label out of range [0, {C})")
    return float(np.mean(classify_predict(image_h, class_h) == labels))


# ---------------------------------------------------------------------------
# dense labeling
# ---------------------------------------------------------------------------

def dense_predict(seq: TokenSequence, anchors_v: AnchorSet, class_h: np.ndarray, fg_threshold: Optional[float] = None) -> np.ndarray:
    """Per-patch class ids from normalized token relative representations.

    Patches whose best score falls below ``fg_threshold`` are labeled ``-1``.
    """
    if seq.grid is None:
        raise UsageError(f"sample {seq.sample_id} has no patch grid")
    R = relative_representation(seq, anchors_v).R
    norms = np.linalg.norm(R, axis=1, keepdims=True)
    r_hat = R / np.maximum(norms, 1e-12)
    scores = r_hat @ np.asarray(class_h).T
    pred = np.argmax(scores, axis=1)
    if fg_threshold is not None:
        pred = np.where(scores[np.arange(len(pred)), pred] >= fg_threshold, pred, -1)
    return pred


def iou_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int):
    """Per-class intersection and union counts over foreground classes."""
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        p, t = pred == c, truth == c
        inter[c] = np.sum(p & t)
        union[c] = np.sum(p | t)
    return inter, union


def miou_fg(preds, truths, num_classes: int) -> float:
    """Mean IoU over the foreground classes present in the ground truth."""
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    present = np.zeros(num_classes, dtype=bool)
    for pred, truth in zip(preds, truths):
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise UsageError("prediction and ground truth shapes differ")
        i, u = iou_counts(pred, truth, num_classes)
        inter += i
        union += u
        present |= np.isin(np.arange(num_classes), truth)
    if not present.any():
        raise UsageError("no foreground class present in ground truth")
    return float(np.mean(inter[present] / union[present]))


def dense_eval(seqs, anchors_v: AnchorSet, class_h: np.ndarray, truths, fg_threshold: Optional[float] = None):
    """Predict every patch of every sequence and score mIoU-fg; returns ``(preds, miou)``."""
    if isinstance(seqs, TokenSequence):
        seqs, truths = [seqs], [truths]
    preds = [dense_predict(s, anchors_v, class_h, fg_threshold) for s in seqs]
    return preds, miou_fg(preds, truths, len(class_h))


# ---------------------------------------------------------------------------
# anchor overlap
# ---------------------------------------------------------------------------

@dataclass
class OverlapReport:
    mean_hard_overlap_matched: float
    mean_hard_overlap_mismatched: float
    mean_dice_matched: float
    mean_dice_mismatched: float
    k_top: int = 5

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())


def top_k(p: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(p), kind="stable")[:k]


def hard_overlap(p_a: np.ndarray, p_b: np.ndarray, k: int = 5) -> float:
    return len(set(top_k(p_a, k).tolist()) & set(top_k(p_b, k).tolist())) / k


def soft_dice(p_a: np.ndarray, p_b: np.ndarray, k: int = 5) -> float:
    """Dice on shifted activation mass ``p - min(p)`` kept only on each top-k set."""
    p_a, p_b = np.asarray(p_a, dtype=np.float64), np.asarray(p_b, dtype=np.float64)
    w_a = np.zeros_like(p_a)
    w_b = np.zeros_like(p_b)
    top_a, top_b = top_k(p_a, k), top_k(p_b, k)
    w_a[top_a] = p_a[top_a] - p_a.min()
    w_b[top_b] = p_b[top_b] - p_b.min()
    denom = w_a.sum() + w_b.sum()
    if denom == 0:
        return 1.0 if set(top_a.tolist()) == set(top_b.tolist()) else 0.0
    return float(2 * np.minimum(w_a, w_b).sum() / denom)


def mismatched_partners(n: int, seed: int) -> np.ndarray:
    """For each of ``n`` pairs, a uniformly drawn different pair index."""
    if n < 2:
        raise UsageError("need at least two pairs to sample mismatches")
    rng = np.random.default_rng(seed)
    draw = rng.integers(0, n - 1, size=n)
    return draw + (draw >= np.arange(n))


def anchor_overlap(p_v: np.ndarray, p_l: np.ndarray, pairs, seed: int = 0, k_top: int = 5) -> OverlapReport:
    """Top-k anchor agreement for matched pairs vs. one random mismatch per pair.

    ``p_v`` and ``p_l`` are pre-normalization pooled vectors indexed by the
    pair manifest.
    """
    p_v, p_l = np.asarray(p_v), np.asarray(p_l)
    K = p_v.shape[1]
    if not 1 <= k_top <= K:
        raise UsageError(f"k_top={k_top} must lie in [1, K={K}]")
    pairs = list(pairs)
    partners = mismatched_partners(len(pairs), seed)
    hard_m, hard_x, dice_m, dice_x = [], [], [], []
    for n, (i, j) in enumerate(pairs):
        j_x = pairs[partners[n]][1]
        hard_m.append(hard_overlap(p_v[i], p_l[j], k_top))
        dice_m.append(soft_dice(p_v[i], p_l[j], k_top))
        hard_x.append(hard_overlap(p_v[i], p_l[j_x], k_top))
        dice_x.append(soft_dice(p_v[i], p_l[j_x], k_top))
    return OverlapReport(float(np.mean(hard_m)), float(np.mean(hard_x)), float(np.mean(dice_m)),
                         float(np.mean(dice_x)), k_top)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary graymap, min-max scaled; a constant map is written as zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    scaled = np.zeros(values.shape) if hi == lo else (values - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise UsageError(f"{path}: not an 8-bit binary PGM")
    cols, rows = map(int, dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols)


def export_heatmaps(seq_v: TokenSequence, anchors_v: AnchorSet, seq_l: TokenSequence, anchors_l: AnchorSet,
                    anchor_ids, tau_p: float, out_dir, threshold: float = 0.5) -> list:
    """Write per-anchor vision attention grids (PGM + CSV) and text attention lists.

    Returns the written paths.
    """
    if seq_v.grid is None:
        raise UsageError(f"sample {seq_v.sample_id} has no patch grid")
    K = min(anchors_v.K, anchors_l.K)
    for k in anchor_ids:
        if not 0 <= k < K:
            raise UsageError(f"anchor id {k} out of range [0, {K})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alpha_v = cap_attention(relative_representation(seq_v, anchors_v), tau_p).alpha
    alpha_l = cap_attention(relative_representation(seq_l, anchors_l), tau_p).alpha
    rows, cols = seq_v.grid
    written = []
    for k in anchor_ids:
        stem = f"sample{seq_v.sample_id}_anchor{k}"
        grid = alpha_v[:, k].reshape(rows, cols)
        pgm = out / f"{stem}_vision.pgm"
        write_pgm(grid, pgm)
        vision_csv = out / f"{stem}_vision.csv"
        with open(vision_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "alpha"])
            for t in range(rows * cols):
                w.writerow([t // cols, t % cols, repr(float(alpha_v[t, k]))])
        text_csv = out / f"sample{seq_l.sample_id}_anchor{k}_text.csv"
        with open(text_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "alpha", "above_threshold"])
            for t in range(seq_l.T):
                a = float(alpha_l[t, k])
                w.writerow([t, repr(a), int(a > threshold)])
        written += [pgm, vision_csv, text_csv]
    return written


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["alpha"]) for r in rows])


def write_metrics_csv(rows, path) -> None:
    """``rows``: iterable of ``(metric, dataset, direction, k, value)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "dataset", "direction", "k", "value"])
        for metric, dataset, direction, k, value in rows:
            w.writerow([metric, dataset, direction, k, repr(float(value))])
