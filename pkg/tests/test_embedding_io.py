import struct

import numpy as np
import pytest

from anchoralign.embedding_io import (
    LANGUAGE,
    VISION,
    Corpus,
    PairedDataset,
    SyntheticSpec,
    TokenSequence,
    generate_synthetic,
    read_corpus,
    read_labels,
    read_pairs,
    write_corpus,
    write_labels,
    write_pairs,
)
from anchoralign.errors import CorruptionError, DataError, FormatError, UsageError

from conftest import random_sequence


def _random_corpus(rng, n, D, with_grid=False):
    seqs = []
    for i in range(n):
        if with_grid and i % 2 == 0:
            rows, cols = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            seqs.append(TokenSequence(rng.standard_normal((rows * cols, D)).astype(np.float32), (rows, cols), 100 + i))
        else:
            seqs.append(TokenSequence(rng.standard_normal((int(rng.integers(1, 6)), D)).astype(np.float32), None, 100 + i))
    return seqs


def test_two_sample_round_trip(tmp_path, rng):
    seqs = [TokenSequence(rng.standard_normal((3, 4)).astype(np.float32), None, 0),
            TokenSequence(rng.standard_normal((1, 4)).astype(np.float32), None, 1)]
    write_corpus(seqs, tmp_path / "c.palt")
    back = read_corpus(tmp_path / "c.palt")
    assert [s.tokens.shape for s in back] == [(3, 4), (1, 4)]
    assert back == seqs
    assert back.modality == VISION and back.dim == 4


def test_empty_corpus_is_header_only(tmp_path):
    write_corpus([], tmp_path / "e.palt", LANGUAGE, dim=7)
    data = (tmp_path / "e.palt").read_bytes()
    assert data == b"PALT" + struct.pack("<IBII", 1, LANGUAGE, 7, 0)
    back = read_corpus(tmp_path / "e.palt")
    assert len(back) == 0 and back.dim == 7 and back.modality == LANGUAGE


def test_single_value_payload(tmp_path):
    write_corpus([TokenSequence(np.array([[0.5]]), None, 3)], tmp_path / "one.palt")
    data = (tmp_path / "one.palt").read_bytes()
    header = 4 + 4 + 1 + 4 + 4
    assert len(data) == header + 16 + 4
    assert data[-4:] == struct.pack("<f", 0.5)
    assert struct.unpack_from("<IIII", data, header) == (3, 1, 0, 0)


@pytest.mark.parametrize("seed", range(5))
def test_random_corpus_round_trips_bit_exactly(tmp_path, seed):
    rng = np.random.default_rng(seed)
    seqs = _random_corpus(rng, int(rng.integers(1, 12)), int(rng.integers(1, 9)), with_grid=True)
    first = tmp_path / "a.palt"
    second = tmp_path / "b.palt"
    write_corpus(seqs, first, LANGUAGE)
    write_corpus(read_corpus(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_truncated_file_names_missing_sample(tmp_path, rng):
    seqs = _random_corpus(rng, 5, 3)
    path = tmp_path / "t.palt"
    write_corpus(seqs, path)
    data = path.read_bytes()
    last = 16 + 4 * seqs[-1].T * 3
    path.write_bytes(data[:-last])
    with pytest.raises(CorruptionError, match="sample 5"):
        read_corpus(path)


def test_bad_magic_and_version(tmp_path, rng):
    path = tmp_path / "m.palt"
    write_corpus(_random_corpus(rng, 2, 3), path)
    data = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(FormatError):
        read_corpus(path)
    data[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        read_corpus(path)


def test_non_finite_value_reports_sample_index(tmp_path):
    path = tmp_path / "nan.palt"
    write_corpus([TokenSequence(np.ones((2, 2)), None, 0), TokenSequence(np.ones((1, 2)), None, 1)], path)
    data = bytearray(path.read_bytes())
    data[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(data))
    with pytest.raises(DataError, match="sample index 1"):
        read_corpus(path)


def test_trailing_bytes_rejected(tmp_path, rng):
    path = tmp_path / "tail.palt"
    write_corpus(_random_corpus(rng, 2, 3), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CorruptionError):
        read_corpus(path)


def test_mixed_dims_rejected(tmp_path, rng):
    with pytest.raises(UsageError):
        write_corpus([random_sequence(rng, 2, 3), random_sequence(rng, 2, 4)], tmp_path / "x.palt")


def test_token_sequence_invariants():
    with pytest.raises(DataError):
        TokenSequence(np.zeros((0, 3)))
    with pytest.raises(DataError):
        TokenSequence(np.array([[1.0, np.inf]]))
    with pytest.raises(DataError):
        TokenSequence(np.ones((5, 2)), grid=(2, 2))
    assert TokenSequence(np.ones((6, 2)), grid=(2, 3)).grid == (2, 3)


def test_labels_and_pairs_round_trip(tmp_path):
    labels = [np.array([0, 3, -1]), np.array([7])]
    write_labels(labels, tmp_path / "l.labels", [10, 11])
    back = read_labels(tmp_path / "l.labels")
    assert all(np.array_equal(a, b) for a, b in zip(labels, back))
    write_pairs([(0, 1), (2, 0)], tmp_path / "p.tsv")
    assert (tmp_path / "p.tsv").read_text() == "0\t1\n2\t0\n"
    assert read_pairs(tmp_path / "p.tsv") == [(0, 1), (2, 0)]


def test_paired_dataset_validation(rng):
    a = [random_sequence(rng, 2, 3, i) for i in range(2)]
    b = [random_sequence(rng, 2, 5, i) for i in range(2)]
    PairedDataset(a, b, [(0, 0), (1, 1)])
    with pytest.raises(UsageError):
        PairedDataset(a, b, [(0, 0), (0, 0)])
    with pytest.raises(UsageError):
        PairedDataset(a, b, [(0, 2)])
    with pytest.raises(UsageError):
        PairedDataset(a + [random_sequence(rng, 1, 4)], b, [(0, 0)])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_train=20, num_test=5, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.train.modality_a == b.train.modality_a
    assert a.test.modality_b == b.test.modality_b
    assert all(np.array_equal(x, y) for x, y in zip(a.train.labels_a, b.train.labels_a))
    c = generate_synthetic(SyntheticSpec(num_train=20, num_test=5, seed=4))
    assert a.train.modality_a != c.train.modality_a


def test_zero_noise_single_token_pairs_are_images_of_one_latent():
    spec = SyntheticSpec(num_train=10, num_test=0, noise_sigma=0.0, tokens_per_sample=(1, 1),
                         concepts_per_sample=(1, 1), instance_jitter=0.0, token_scale_spread=0.0)
    corpus = generate_synthetic(spec)
    for (sv, sl), lv, ll in zip(zip(*corpus.train.matched()), corpus.train.labels_a, corpus.train.labels_b):
        assert lv[0] == ll[0]
        latent = corpus.latents[lv[0]]
        np.testing.assert_allclose(sv.tokens[0], corpus.map_v @ latent, atol=1e-12)
        np.testing.assert_allclose(sl.tokens[0], corpus.map_l @ latent, atol=1e-12)


def _cos(x, y):
    return x @ y / (np.linalg.norm(x) * np.linalg.norm(y))


def test_zero_noise_same_concept_tokens_are_colinear():
    corpus = generate_synthetic(SyntheticSpec(num_train=40, num_test=0, noise_sigma=0.0))
    # with per-pair jitter, colinearity holds within a sample
    for seqs, labels in ((corpus.train.modality_a, corpus.train.labels_a), (corpus.train.modality_b, corpus.train.labels_b)):
        for s, lab in zip(seqs, labels):
            for c in np.unique(lab):
                rows = s.tokens[lab == c]
                for r in rows[1:]:
                    assert abs(_cos(rows[0], r) - 1.0) < 1e-6
    flat = generate_synthetic(SyntheticSpec(num_train=40, num_test=0, noise_sigma=0.0, instance_jitter=0.0))
    by_concept = {}
    for s, lab in zip(flat.train.modality_a, flat.train.labels_a):
        for t, c in enumerate(lab):
            by_concept.setdefault(int(c), []).append(s.tokens[t])
    for toks in by_concept.values():
        for t in toks[1:]:
            assert abs(_cos(toks[0], t) - 1.0) < 1e-6


def test_same_concept_tokens_more_similar_than_different():
    spec = SyntheticSpec(num_concepts=8, latent_dim=8, dim_v=32, dim_l=24, noise_sigma=0.05, num_train=150, num_test=0, seed=9)
    corpus = generate_synthetic(spec)
    for seqs, labels in ((corpus.train.modality_a, corpus.train.labels_a), (corpus.train.modality_b, corpus.train.labels_b)):
        toks = np.concatenate([s.tokens for s in seqs])
        labs = np.concatenate(labels)
        unit = toks / np.linalg.norm(toks, axis=1, keepdims=True)
        sims = unit @ unit.T
        same = labs[:, None] == labs[None, :]
        off = ~np.eye(len(labs), dtype=bool)
        # brute-force statistics over every token pair
        assert sims[same & off].mean() > sims[~same].mean() + 0.3


def test_synthetic_spec_validation():
    with pytest.raises(UsageError):
        generate_synthetic(SyntheticSpec(num_concepts=1))
    with pytest.raises(UsageError):
        generate_synthetic(SyntheticSpec(latent_dim=30, dim_l=24))
    with pytest.raises(UsageError):
        generate_synthetic(SyntheticSpec(tokens_per_sample=(0, 3)))
    with pytest.raises(UsageError):
        generate_synthetic(SyntheticSpec(noise_sigma=-0.1))


def test_synthetic_structure():
    spec = SyntheticSpec(num_train=30, num_test=10, vision_grid=(3, 4), concepts_per_sample=(2, 3))
    corpus = generate_synthetic(spec)
    assert len(corpus.train) == 30 and len(corpus.test) == 10
    assert all(s.grid == (3, 4) and s.T == 12 for s in corpus.train.modality_a)
    for lv, ll in zip(corpus.train.labels_a, corpus.train.labels_b):
        assert 2 <= len(set(lv.tolist())) <= 3
        assert set(ll.tolist()) <= set(lv.tolist()) or set(lv.tolist()) <= set(ll.tolist())
    assert len(corpus.prompts) == spec.num_concepts and all(p.T == 1 and p.D == spec.dim_l for p in corpus.prompts)
    assert [s.sample_id for s in corpus.test.modality_a] == list(range(30, 40))


def test_synthetic_tokens_survive_storage(tmp_path):
    corpus = generate_synthetic(SyntheticSpec(num_train=20, num_test=4, seed=5))
    write_corpus(corpus.train.modality_a, tmp_path / "v.palt")
    back = read_corpus(tmp_path / "v.palt")
    assert all(a == b for a, b in zip(back, corpus.train.modality_a))
