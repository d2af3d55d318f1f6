import itertools

import numpy as np
import pytest

from secagg_uplink.codec_pq import (
    adapt_block_size,
    assign,
    codebook_downlink_bytes,
    decompress,
    encode_matrix,
    merge_blocks,
    pq_uplink_bits,
    split_blocks,
    train_codebook,
)
from secagg_uplink.errors import DimensionError, ShapeError
from secagg_uplink.models import Assignments, Codebook, MaskSeed, PQConfig


class TestBlocks:
    def test_column_major_layout(self):
        W = np.arange(8.0).reshape(4, 2)
        blocks = split_blocks(W, 2)
        assert blocks.tolist() == [[0.0, 2.0], [4.0, 6.0], [1.0, 3.0], [5.0, 7.0]]
        assert np.array_equal(merge_blocks(blocks, (4, 2)), W)

    def test_block_must_divide_rows(self):
        with pytest.raises(ShapeError):
            split_blocks(np.zeros((6, 2)), 4)

    def test_vectors_rejected(self):
        with pytest.raises(ShapeError):
            split_blocks(np.zeros(8), 2)

    @pytest.mark.parametrize("c_in,d,expected", [(10, 4, 2), (12, 8, 6), (7, 4, 1), (3, 8, 3), (16, 8, 8)])
    def test_adapt_block_size(self, c_in, d, expected):
        assert adapt_block_size(c_in, d) == expected


class TestKMeans:
    def test_two_clusters(self, rng):
        X = np.concatenate([rng.normal(-5, 0.1, size=(50, 2)), rng.normal(5, 0.1, size=(50, 2))])
        cb = train_codebook(X, 2, seed=MaskSeed.from_int(1))
        centers = sorted(cb.codewords[:, 0].tolist())
        assert centers[0] == pytest.approx(-5, abs=0.1)
        assert centers[1] == pytest.approx(5, abs=0.1)
        assert not cb.degenerate

    def test_history_non_increasing(self, rng):
        cb = train_codebook(rng.normal(size=(400, 4)), 16, seed=MaskSeed.from_int(2))
        history = np.array(cb.history)
        assert len(history) >= 1
        assert np.all(np.diff(history) <= 1e-9 * history[:-1])

    def test_deterministic_given_seed(self, rng):
        X = rng.normal(size=(200, 4))
        a = train_codebook(X, 8, seed=MaskSeed.from_int(7))
        b = train_codebook(X, 8, seed=MaskSeed.from_int(7))
        assert np.array_equal(a.codewords, b.codewords)

    def test_degenerate_when_fewer_distinct_blocks(self):
        X = np.tile([[1.0, 2.0]], (10, 1))
        cb = train_codebook(X, 4)
        assert cb.degenerate
        assert cb.k == 4
        assert cb.distortion == 0.0

    def test_distortion_matches_assignment(self, rng):
        X = rng.normal(size=(120, 3))
        cb = train_codebook(X, 6, seed=MaskSeed.from_int(3))
        recon = cb.codewords.astype(np.float64)[assign(X, cb).flat()]
        assert cb.distortion == pytest.approx(float(((X - recon) ** 2).sum()))


class TestAssignment:
    def test_nearest_codeword(self, rng):
        cb = Codebook(codewords=rng.normal(size=(8, 3)))
        X = rng.normal(size=(50, 3))
        got = assign(X, cb).flat()
        dist = ((X[:, None, :] - cb.codewords[None].astype(np.float64)) ** 2).sum(axis=2)
        assert np.array_equal(got, dist.argmin(axis=1))

    def test_ties_go_to_lowest_index(self):
        cb = Codebook(codewords=[[1.0], [-1.0]])
        assert assign(np.array([[0.0]]), cb).flat().tolist() == [0]

    def test_assignment_is_optimal_against_brute_force(self, rng):
        cb = Codebook(codewords=rng.normal(size=(4, 2)))
        X = rng.normal(size=(3, 2))
        got = assign(X, cb).flat()
        best = min(itertools.product(range(4), repeat=3),
                   key=lambda combo: sum(((X[i] - cb.codewords[c]) ** 2).sum()
                                         for i, c in enumerate(combo)))
        assert got.tolist() == list(best)

    def test_dimension_mismatch(self):
        cb = Codebook(codewords=np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            assign(np.zeros((4, 2)), cb)


class TestDecompress:
    def test_exact_when_blocks_are_codewords(self):
        cb = Codebook(codewords=[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
        a = Assignments(indices=[[2, 0], [1, 1]], k=3)
        W = decompress(cb, a)
        assert W.shape == (4, 2)
        assert W[:, 0].tolist() == [4.0, 5.0, 2.0, 3.0]
        assert W[:, 1].tolist() == [0.0, 1.0, 2.0, 3.0]
        assert np.array_equal(encode_matrix(W, cb).indices, a.indices)

    def test_index_out_of_range(self):
        cb = Codebook(codewords=np.zeros((4, 1)))
        with pytest.raises(DimensionError):
            decompress(cb, Assignments(indices=[[7]], k=8))


class TestAccounting:
    def test_bits_per_weight(self):
        config = PQConfig(k=32, d=8)
        assert pq_uplink_bits([(200, 64)], config) / (200 * 64) == pytest.approx(0.625)

    def test_vectors_are_not_compressed(self):
        assert pq_uplink_bits([(16, 4), (4,)], PQConfig(k=16, d=4)) == 4 * 4 * 4

    def test_adapted_block_size(self):
        # C_in = 6 con d = 4 → d' = 3
        assert pq_uplink_bits([(6, 2)], PQConfig(k=4, d=4)) == 2 * 2 * 2

    def test_codebook_downlink(self):
        config = PQConfig(k=16, d=4)
        assert codebook_downlink_bytes([(16, 4)], config) == 256
        assert codebook_downlink_bytes([(16, 4), (6, 3), (3,)], config) == 256 + 192


class TestReferenceExamples:
    def test_single_column_blocks(self):
        assert split_blocks(np.array([[1.0], [2.0], [3.0], [4.0]]), 2).tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_scalar_blocks(self):
        assert split_blocks(np.arange(6.0).reshape(3, 2), 1).shape == (6, 1)

    @pytest.mark.parametrize("c_in,d,expected", [(16, 9, 8), (18, 9, 9)])
    def test_adapt_examples(self, c_in, d, expected):
        assert adapt_block_size(c_in, d) == expected

    def test_block_equal_to_codeword(self, rng):
        cb = Codebook(codewords=rng.normal(size=(5, 3)))
        assert assign(cb.codewords[3:4].astype(np.float64), cb).flat().tolist() == [3]

    def test_single_codeword(self, rng):
        cb = Codebook(codewords=[[1.5, -2.0]])
        a = assign(rng.normal(size=(6, 2)), cb, (2, 3))
        assert a.flat().tolist() == [0] * 6
        W = decompress(cb, a)
        assert W.shape == (4, 3)
        assert np.all(W[0::2] == 1.5) and np.all(W[1::2] == -2.0)

    @pytest.mark.parametrize("k,d,bits_per_weight", [(2, 1, 1.0), (16, 4, 1.0), (32, 8, 0.625)])
    def test_bits_examples(self, k, d, bits_per_weight):
        shape = (8 * d, 3)
        assert pq_uplink_bits([shape], PQConfig(k=k, d=d)) / (shape[0] * shape[1]) == bits_per_weight

    def test_downlink_examples(self):
        assert codebook_downlink_bytes([(16, 2)], PQConfig(k=8, d=4)) == 128
        assert codebook_downlink_bytes([(36, 5)], PQConfig(k=64, d=18)) == 4608
