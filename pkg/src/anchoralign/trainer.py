"""Minibatch training of both anchor sets with Adam.

Per-epoch shuffles are drawn from ``default_rng([seed, SHUFFLE_STREAM, epoch])``,
so a run resumed at any step replays exactly the batches an uninterrupted run
would have seen.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding_io import LANGUAGE, VISION, PairedDataset
from .errors import CorruptionError, FormatError, NumericError, UsageError
from .grads import loss_and_grads
from .relrep import POOLINGS, AnchorSet, anchors_from_buffer, anchors_to_bytes, pad_batch

log = logging.getLogger(__name__)

INIT_POLICIES = ("data_tokens", "gaussian")
CHECKPOINT_MAGIC = b"PALC"
CHECKPOINT_VERSION = 1
SHUFFLE_STREAM = 7
INIT_STREAM = {VISION: 11, LANGUAGE: 12}


@dataclass(frozen=True)
class TrainConfig:
    K: int = 512
    tau_p: float = 0.03
    tau: float = 0.07
    batch_size: int = 64
    epochs: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_policy: str = "data_tokens"
    shuffle: bool = True
    pooling: str = "cap"

    def validate(self) -> None:
        if self.K < 1:
            raise UsageError(f"K must be >= 1, got {self.K}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size == 1:
            warnings.warn("batch_size=1 makes the contrastive loss identically zero", stacklevel=3)
        if not (self.tau_p > 0 and self.tau > 0):
            raise UsageError("temperatures must be > 0")
        if not self.learning_rate >= 0:
            raise UsageError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise UsageError("invalid Adam moment settings")
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.init_policy not in INIT_POLICIES:
            raise UsageError(f"init_policy must be one of {INIT_POLICIES}")
        if self.pooling not in POOLINGS:
            raise UsageError(f"pooling must be one of {POOLINGS}")

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in types:
                raise UsageError(f"unknown config key {key!r}")
            updates[key] = _parse_value(raw, types[key], key) if isinstance(raw, str) else raw
        return dataclasses.replace(base, **updates)


def _format_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class Adam:
    """Adam on a dict of float64 parameter arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def update(self, param, grad, m, v, t):
        """Return ``(new_param, new_m, new_v)`` for step number ``t >= 1``."""
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * (grad * grad)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps), m, v


@dataclass
class TrainState:
    config: TrainConfig
    anchors_v: AnchorSet
    anchors_l: AnchorSet
    m_v: np.ndarray
    s_v: np.ndarray
    m_l: np.ndarray
    s_l: np.ndarray
    step: int = 0
    epoch: int = 0
    epoch_losses: list = field(default_factory=list)
    running_sum: float = 0.0
    running_count: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig, anchors_v: AnchorSet, anchors_l: AnchorSet) -> "TrainState":
        return cls(config, anchors_v, anchors_l,
                   np.zeros_like(anchors_v.anchors), np.zeros_like(anchors_v.anchors),
                   np.zeros_like(anchors_l.anchors), np.zeros_like(anchors_l.anchors))

    def copy(self) -> "TrainState":
        return dataclasses.replace(self, m_v=self.m_v.copy(), s_v=self.s_v.copy(), m_l=self.m_l.copy(),
                                   s_l=self.s_l.copy(), epoch_losses=list(self.epoch_losses))


class TrainingAborted(NumericError):
    def __init__(self, message, state: TrainState, stage=None, checkpoint=None):
        super().__init__(message, stage)
        self.state = state
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _token_pool(seqs) -> np.ndarray:
    return np.concatenate([s.tokens for s in seqs], axis=0)


def init_anchor_set(seqs, K: int, dim: int, policy: str, seed: int, modality: int) -> AnchorSet:
    rng = np.random.default_rng([seed, INIT_STREAM[modality]])
    if policy == "gaussian":
        return AnchorSet(rng.standard_normal((K, dim)) / np.sqrt(dim), modality)
    if policy != "data_tokens":
        raise UsageError(f"unknown init policy {policy!r}")
    if not seqs:
        raise UsageError("data_tokens initialization needs a non-empty dataset")
    pool = _token_pool(seqs)
    idx = rng.choice(pool.shape[0], K, replace=pool.shape[0] < K)
    return AnchorSet(pool[idx], modality)


def init_anchors(dataset: PairedDataset, config: TrainConfig):
    """Initial ``(anchors_v, anchors_l)`` drawn according to ``config.init_policy``."""
    config.validate()
    if config.init_policy == "data_tokens" and len(dataset) == 0:
        raise UsageError("data_tokens initialization needs a non-empty dataset")
    seq_v, seq_l = dataset.matched()
    dim_v = dataset.modality_a[0].D if dataset.modality_a else 0
    dim_l = dataset.modality_b[0].D if dataset.modality_b else 0
    return (init_anchor_set(seq_v, config.K, dim_v, config.init_policy, config.seed, VISION),
            init_anchor_set(seq_l, config.K, dim_l, config.init_policy, config.seed, LANGUAGE))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class _PaddedPairs:
    """Whole-dataset padded tensors so that a batch is a fancy-index away."""

    def __init__(self, dataset: PairedDataset):
        seq_v, seq_l = dataset.matched()
        self.tokens_v, self.mask_v = pad_batch(seq_v)
        self.tokens_l, self.mask_l = pad_batch(seq_l)

    def batch(self, idx):
        return self.tokens_v[idx], self.mask_v[idx], self.tokens_l[idx], self.mask_l[idx]


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def epoch_order(n: int, config: TrainConfig, epoch: int) -> np.ndarray:
    if not config.shuffle:
        return np.arange(n)
    return np.random.default_rng([config.seed, SHUFFLE_STREAM, epoch]).permutation(n)


def dataset_loss(dataset: PairedDataset, anchors_v: AnchorSet, anchors_l: AnchorSet, config: TrainConfig) -> float:
    """Mean contrastive loss over unshuffled batches, without updating anything."""
    padded = _PaddedPairs(dataset)
    n = len(dataset)
    losses = []
    for b in range(steps_per_epoch(n, config.batch_size)):
        idx = np.arange(b * config.batch_size, min(n, (b + 1) * config.batch_size))
        grads = loss_and_grads(*padded.batch(idx), anchors_v, anchors_l, config.tau_p, config.tau, config.pooling)
        losses.append(grads.loss_value)
    return float(np.mean(losses))


def train(dataset: PairedDataset, config: TrainConfig, state: Optional[TrainState] = None, *,
          max_steps: Optional[int] = None, log_path=None, checkpoint_path=None) -> TrainState:
    """Run (or resume) training until ``config.epochs`` epochs or ``max_steps`` global steps.

    ``log_path`` receives one ``epoch,step,loss`` CSV row per step. On a
    numeric failure the pre-step state is written to ``checkpoint_path`` (when
    given) and :class:`TrainingAborted` carries it.
    """
    config.validate()
    n = len(dataset)
    if n < config.batch_size:
        raise UsageError(f"dataset has {n} pairs, fewer than batch_size={config.batch_size}")
    if state is None:
        state = TrainState.fresh(config, *init_anchors(dataset, config))
    else:
        state = state.copy()
        state.config = config
    padded = _PaddedPairs(dataset)
    per_epoch = steps_per_epoch(n, config.batch_size)
    total = config.epochs * per_epoch if max_steps is None else min(max_steps, config.epochs * per_epoch)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)

    log_file = None
    if log_path is not None:
        new = not Path(log_path).exists() or Path(log_path).stat().st_size == 0
        log_file = open(log_path, "a")
        if new:
            log_file.write("epoch,step,loss\n")
    try:
        order, order_epoch = None, None
        while state.step < total:
            epoch, pos = divmod(state.step, per_epoch)
            if order_epoch != epoch:
                order, order_epoch = epoch_order(n, config, epoch), epoch
            idx = order[pos * config.batch_size : (pos + 1) * config.batch_size]
            try:
                grads = loss_and_grads(*padded.batch(idx), state.anchors_v, state.anchors_l,
                                       config.tau_p, config.tau, config.pooling)
                t = state.step + 1
                a_v, m_v, s_v = optimizer.update(state.anchors_v.anchors, grads.d_anchors_v, state.m_v, state.s_v, t)
                a_l, m_l, s_l = optimizer.update(state.anchors_l.anchors, grads.d_anchors_l, state.m_l, state.s_l, t)
                new_v = AnchorSet(a_v, state.anchors_v.modality)
                new_l = AnchorSet(a_l, state.anchors_l.modality)
            except NumericError as exc:
                if checkpoint_path is not None:
                    save_checkpoint(state, checkpoint_path)
                raise TrainingAborted(f"step {state.step}: {exc}", state, exc.stage, checkpoint_path) from exc
            if not math.isfinite(grads.loss_value):
                raise TrainingAborted(f"step {state.step}: non-finite loss", state, "contrastive", checkpoint_path)
            state.anchors_v, state.anchors_l = new_v, new_l
            state.m_v, state.s_v, state.m_l, state.s_l = m_v, s_v, m_l, s_l
            state.step = t
            state.running_sum += grads.loss_value
            state.running_count += 1
            if log_file is not None:
                log_file.write(f"{epoch},{t},{grads.loss_value!r}\n")
            if pos == per_epoch - 1:
                mean = state.running_sum / state.running_count
                state.epoch_losses.append(mean)
                state.running_sum, state.running_count = 0.0, 0
                state.epoch = epoch + 1
                log.info("epoch %d mean loss %.6f", epoch, mean)
    finally:
        if log_file is not None:
            log_file.close()
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(state: TrainState) -> bytes:
    cfg = state.config.to_text().encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(cfg)),
        cfg,
        struct.pack("<QQ", state.step, state.epoch),
        anchors_to_bytes(state.anchors_v, state.config.tau_p, state.config.tau),
        anchors_to_bytes(state.anchors_l, state.config.tau_p, state.config.tau),
    ]
    for buf in (state.m_v, state.s_v, state.m_l, state.s_l):
        chunks.append(np.ascontiguousarray(buf, dtype="<f8").tobytes())
    chunks.append(struct.pack("<I", len(state.epoch_losses)))
    chunks.append(np.asarray(state.epoch_losses, dtype="<f8").tobytes())
    chunks.append(struct.pack("<dQ", state.running_sum, state.running_count))
    return b"".join(chunks)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path) -> TrainState:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    try:
        version, cfg_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        offset = 12
        config = TrainConfig.from_text(buf[offset : offset + cfg_len].decode("utf-8"))
        offset += cfg_len
        step, epoch = struct.unpack_from("<QQ", buf, offset)
        offset += 16
        anchors_v, _, _, offset = anchors_from_buffer(buf, offset, path)
        anchors_l, _, _, offset = anchors_from_buffer(buf, offset, path)
        moments = []
        for shape in (anchors_v.anchors.shape,) * 2 + (anchors_l.anchors.shape,) * 2:
            count = shape[0] * shape[1]
            if offset + 8 * count > len(buf):
                raise CorruptionError(f"{path}: truncated moment buffers")
            moments.append(np.frombuffer(buf, "<f8", count, offset).reshape(shape).astype(np.float64))
            offset += 8 * count
        (n_hist,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        history = np.frombuffer(buf, "<f8", n_hist, offset).astype(np.float64).tolist()
        offset += 8 * n_hist
        running_sum, running_count = struct.unpack_from("<dQ", buf, offset)
        offset += 16
    except (struct.error, ValueError) as exc:
        raise CorruptionError(f"{path}: truncated or malformed checkpoint ({exc})") from None
    if offset != len(buf):
        raise CorruptionError(f"{path}: trailing bytes in checkpoint")
    return TrainState(config, anchors_v, anchors_l, *moments, step=step, epoch=epoch, epoch_losses=history,
                      running_sum=running_sum, running_count=running_count)
