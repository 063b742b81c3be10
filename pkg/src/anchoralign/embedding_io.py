"""Binary token-embedding corpora, pair manifests, label sidecars and a
synthetic two-modality generator with known concept structure.

Corpus layout (all integers little-endian)::

    b"PALT" | u32 version=1 | u8 modality | u32 D | u32 count
    per sample: u32 sample_id | u32 T | u32 grid_rows | u32 grid_cols | T*D f32

Label sidecars use the same framing with magic ``b"PALL"`` and ``T`` int32
concept ids per sample (``-1`` marks a background token).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptionError, DataError, FormatError, UsageError

CORPUS_MAGIC = b"PALT"
LABEL_MAGIC = b"PALL"
FORMAT_VERSION = 1
VISION = 0
LANGUAGE = 1

_HEADER = struct.Struct("<4sIBII")
_SAMPLE = struct.Struct("<IIII")
_LABEL_SAMPLE = struct.Struct("<II")


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Frozen token embeddings of one sample, shape ``(T, D)``, float64."""

    tokens: np.ndarray
    grid: Optional[tuple[int, int]] = None
    sample_id: int = 0

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
            raise DataError(f"sample {self.sample_id}: tokens must be a non-empty T x D matrix, got shape {tokens.shape}")
        if not np.all(np.isfinite(tokens)):
            raise DataError(f"sample {self.sample_id}: non-finite token value")
        if self.grid is not None:
            rows, cols = (int(g) for g in self.grid)
            if rows * cols != tokens.shape[0]:
                raise DataError(f"sample {self.sample_id}: grid {rows}x{cols} does not cover T={tokens.shape[0]} tokens")
            object.__setattr__(self, "grid", (rows, cols))
        tokens.flags.writeable = False
        object.__setattr__(self, "tokens", tokens)

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def D(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.grid == other.grid
            and self.tokens.shape == other.tokens.shape
            and bool(np.array_equal(self.tokens, other.tokens))
        )


class Corpus(list):
    """List of TokenSequence that remembers the header's modality tag and D."""

    def __init__(self, seqs=(), modality: int = VISION, dim: Optional[int] = None):
        super().__init__(seqs)
        self.modality = modality
        self.dim = dim if dim is not None else (self[0].D if self else 0)


@dataclass
class PairedDataset:
    modality_a: list
    modality_b: list
    pairs: list
    labels_a: Optional[list] = None
    labels_b: Optional[list] = None

    def __post_init__(self):
        self.pairs = [(int(i), int(j)) for i, j in self.pairs]
        for name, seqs in (("modality_a", self.modality_a), ("modality_b", self.modality_b)):
            dims = {s.D for s in seqs}
            if len(dims) > 1:
                raise UsageError(f"{name} mixes embedding dims {sorted(dims)}")
        if len(set(self.pairs)) != len(self.pairs):
            raise UsageError("duplicate pair in manifest")
        for i, j in self.pairs:
            if not (0 <= i < len(self.modality_a) and 0 <= j < len(self.modality_b)):
                raise UsageError(f"pair ({i}, {j}) out of range")
        for name, labels, seqs in (("labels_a", self.labels_a, self.modality_a), ("labels_b", self.labels_b, self.modality_b)):
            if labels is None:
                continue
            if len(labels) != len(seqs) or any(len(l) != s.T for l, s in zip(labels, seqs)):
                raise UsageError(f"{name} do not match token counts")

    def __len__(self):
        return len(self.pairs)

    @property
    def dim_a(self) -> int:
        return self.modality_a[0].D

    @property
    def dim_b(self) -> int:
        return self.modality_b[0].D

    def matched(self, indices=None):
        """Return the (vision, language) sequence lists for the given pair indices."""
        idx = range(len(self.pairs)) if indices is None else indices
        seq_a = [self.modality_a[self.pairs[n][0]] for n in idx]
        seq_b = [self.modality_b[self.pairs[n][1]] for n in idx]
        return seq_a, seq_b


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def write_corpus(seqs: Sequence[TokenSequence], path, modality: Optional[int] = None, dim: Optional[int] = None) -> None:
    if modality is None:
        modality = getattr(seqs, "modality", VISION)
    if modality not in (VISION, LANGUAGE):
        raise UsageError(f"unknown modality tag {modality}")
    dims = {s.D for s in seqs}
    if len(dims) > 1:
        raise UsageError(f"all sequences must share one D, got {sorted(dims)}")
    if dims:
        D = dims.pop()
        if dim is not None and dim != D:
            raise UsageError(f"dim={dim} disagrees with sequences (D={D})")
    else:
        D = dim if dim is not None else getattr(seqs, "dim", 0)
    chunks = [_HEADER.pack(CORPUS_MAGIC, FORMAT_VERSION, modality, D, len(seqs))]
    for s in seqs:
        rows, cols = s.grid if s.grid is not None else (0, 0)
        chunks.append(_SAMPLE.pack(s.sample_id, s.T, rows, cols))
        chunks.append(np.ascontiguousarray(s.tokens, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _read_header(buf: bytes, magic: bytes, path) -> tuple:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    got_magic, version, modality, dim, count = _HEADER.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return modality, dim, count


def read_corpus(path) -> Corpus:
    buf = Path(path).read_bytes()
    modality, D, count = _read_header(buf, CORPUS_MAGIC, path)
    offset = _HEADER.size
    seqs = []
    for n in range(count):
        if offset + _SAMPLE.size > len(buf):
            raise CorruptionError(f"{path}: truncated at sample {n + 1} of {count}")
        sample_id, T, rows, cols = _SAMPLE.unpack_from(buf, offset)
        offset += _SAMPLE.size
        nbytes = 4 * T * D
        if offset + nbytes > len(buf):
            raise CorruptionError(f"{path}: truncated payload in sample {n + 1} of {count}")
        values = np.frombuffer(buf, dtype="<f4", count=T * D, offset=offset)
        offset += nbytes
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}: non-finite value in sample index {n} (id {sample_id})")
        if T == 0:
            raise CorruptionError(f"{path}: sample {n + 1} has T=0")
        grid = None if rows == 0 and cols == 0 else (rows, cols)
        try:
            seqs.append(TokenSequence(values.reshape(T, D).astype(np.float64), grid, sample_id))
        except DataError as exc:
            raise CorruptionError(f"{path}: sample {n + 1}: {exc}") from None
    if offset != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - offset} trailing bytes after {count} samples")
    return Corpus(seqs, modality=modality, dim=D)


# ---------------------------------------------------------------------------
# label sidecars and pair manifests
# ---------------------------------------------------------------------------

def write_labels(labels: Sequence[np.ndarray], path, sample_ids=None, modality: int = VISION) -> None:
    if sample_ids is None:
        sample_ids = range(len(labels))
    chunks = [_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, modality, 1, len(labels))]
    for sid, lab in zip(sample_ids, labels):
        lab = np.asarray(lab)
        chunks.append(_LABEL_SAMPLE.pack(sid, lab.shape[0]))
        chunks.append(np.ascontiguousarray(lab, dtype="<i4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_labels(path) -> list:
    buf = Path(path).read_bytes()
    _, _, count = _read_header(buf, LABEL_MAGIC, path)
    offset = _HEADER.size
    labels = []
    for n in range(count):
        if offset + _LABEL_SAMPLE.size > len(buf):
            raise CorruptionError(f"{path}: truncated at sample {n + 1} of {count}")
        _, T = _LABEL_SAMPLE.unpack_from(buf, offset)
        offset += _LABEL_SAMPLE.size
        if offset + 4 * T > len(buf):
            raise CorruptionError(f"{path}: truncated payload in sample {n + 1} of {count}")
        labels.append(np.frombuffer(buf, dtype="<i4", count=T, offset=offset).astype(np.int64))
        offset += 4 * T
    if offset != len(buf):
        raise CorruptionError(f"{path}: trailing bytes after {count} samples")
    return labels


def write_pairs(pairs, path) -> None:
    Path(path).write_text("".join(f"{i}\t{j}\n" for i, j in pairs))


def read_pairs(path) -> list:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'index_a<TAB>index_b'")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer pair index") from None
    return pairs


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic two-modality generator.

    ``instance_jitter`` perturbs each concept latent once per matched pair
    (shared by both modalities) so that pairs with the same concept subset
    remain distinguishable. With ``instance_jitter=0`` all tokens of one
    concept in one modality are colinear when ``noise_sigma=0``.
    ``token_scale_spread`` multiplies every token by ``exp(spread * N(0, 1))``,
    mimicking the uneven token norms of real encoders without changing any
    token's direction. ``vision_grid`` fixes the vision token count to
    ``rows*cols`` and attaches the grid to every vision sample.
    """

    num_concepts: int = 8
    latent_dim: int = 8
    dim_v: int = 32
    dim_l: int = 24
    tokens_per_sample: tuple = (4, 12)
    concepts_per_sample: tuple = (1, 3)
    noise_sigma: float = 0.05
    num_train: int = 2000
    num_test: int = 200
    seed: int = 0
    instance_jitter: float = 0.3
    token_scale_spread: float = 1.0
    vision_grid: Optional[tuple] = None

    def validate(self) -> None:
        if self.num_concepts < 2:
            raise UsageError(f"num_concepts must be >= 2, got {self.num_concepts}")
        if self.latent_dim < 1 or self.latent_dim > min(self.dim_v, self.dim_l):
            raise UsageError(f"latent_dim must lie in [1, min(dim_v, dim_l)], got {self.latent_dim}")
        t_min, t_max = self.tokens_per_sample
        if t_min < 1 or t_max < t_min:
            raise UsageError(f"bad tokens_per_sample range {self.tokens_per_sample}")
        c_min, c_max = self.concepts_per_sample
        if c_min < 1 or c_max < c_min or c_min > self.num_concepts:
            raise UsageError(f"bad concepts_per_sample range {self.concepts_per_sample}")
        if not (self.noise_sigma >= 0 and self.instance_jitter >= 0 and self.token_scale_spread >= 0):
            raise UsageError("noise_sigma, instance_jitter and token_scale_spread must be >= 0")
        if self.num_train < 0 or self.num_test < 0:
            raise UsageError("sample counts must be >= 0")
        if self.vision_grid is not None and min(self.vision_grid) < 1:
            raise UsageError(f"bad vision_grid {self.vision_grid}")


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    train: PairedDataset
    test: PairedDataset
    prompts: list  # one language-role sequence per concept (T=1)
    latents: np.ndarray = field(repr=False)
    map_v: np.ndarray = field(repr=False)
    map_l: np.ndarray = field(repr=False)


def _full_rank_map(rng, rows: int, cols: int) -> np.ndarray:
    while True:
        w = rng.standard_normal((rows, cols)) / np.sqrt(rows)
        if np.linalg.matrix_rank(w) == cols:
            return w


def _token_labels(rng, subset: np.ndarray, T: int) -> np.ndarray:
    if T >= len(subset):
        labels = np.concatenate([subset, rng.choice(subset, T - len(subset))])
        return rng.permutation(labels)
    return rng.choice(subset, T, replace=False)


def _split(rng, spec: SyntheticSpec, latents, map_v, map_l, n: int, id_offset: int) -> PairedDataset:
    C, d = latents.shape
    c_min, c_max = spec.concepts_per_sample
    c_max = min(c_max, C)
    t_min, t_max = spec.tokens_per_sample
    seq_v, seq_l, lab_v, lab_l = [], [], [], []
    for n_i in range(n):
        size = int(rng.integers(c_min, c_max + 1))
        subset = rng.choice(C, size, replace=False)
        inst = latents[subset] + spec.instance_jitter * rng.standard_normal((size, d)) / np.sqrt(d)
        inst /= np.linalg.norm(inst, axis=1, keepdims=True)
        where = {int(c): r for r, c in enumerate(subset)}
        grid = spec.vision_grid
        T_v = grid[0] * grid[1] if grid is not None else int(rng.integers(t_min, t_max + 1))
        T_l = int(rng.integers(t_min, t_max + 1))
        for T, wmap, seqs, labs, g in ((T_v, map_v, seq_v, lab_v, grid), (T_l, map_l, seq_l, lab_l, None)):
            labels = _token_labels(rng, subset, T)
            rows = np.array([where[int(c)] for c in labels])
            D = wmap.shape[0]
            tokens = inst[rows] @ wmap.T + spec.noise_sigma / np.sqrt(D) * rng.standard_normal((T, D))
            tokens *= np.exp(spec.token_scale_spread * rng.standard_normal(T))[:, None]
            seqs.append(TokenSequence(_storable(tokens), g, id_offset + n_i))
            labs.append(labels.astype(np.int64))
    return PairedDataset(seq_v, seq_l, [(i, i) for i in range(n)], lab_v, lab_l)


def _storable(x: np.ndarray) -> np.ndarray:
    # round to float32 so the in-memory corpus equals what write_corpus stores
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Draw a paired corpus whose tokens are noisy linear images of shared concept latents.

    Deterministic in ``spec`` (including ``spec.seed``).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    latents = rng.standard_normal((spec.num_concepts, spec.latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    map_v = _full_rank_map(rng, spec.dim_v, spec.latent_dim)
    map_l = _full_rank_map(rng, spec.dim_l, spec.latent_dim)
    train = _split(rng, spec, latents, map_v, map_l, spec.num_train, 0)
    test = _split(rng, spec, latents, map_v, map_l, spec.num_test, spec.num_train)
    prompts = [TokenSequence(_storable((latents[c] @ map_l.T)[None, :]), None, c) for c in range(spec.num_concepts)]
    return SyntheticCorpus(spec, train, test, prompts, latents, map_v, map_l)
