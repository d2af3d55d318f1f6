import numpy as np
import pytest

from secagg_uplink.models import (
    AssignmentHistogram,
    Assignments,
    Codebook,
    MaskedPayload,
    MaskSeed,
    PlainCodec,
    PQCodec,
    PQConfig,
    PruneSpec,
    QParams,
    RefreshPolicy,
    RoundPlan,
    SchemeTag,
    SQCodec,
)


class TestMaskSeed:
    def test_requires_sixteen_bytes(self):
        with pytest.raises(ValueError):
            MaskSeed(seed=b"\x00" * 15)

    def test_child_golden(self, golden_seed):
        assert golden_seed.child(3).hex() == "33b6504ac1f9341db7971fef1ed78748"

    def test_children_are_distinct(self, golden_seed):
        labels = {golden_seed.child(i).hex() for i in range(64)}
        assert len(labels) == 64

    def test_from_int_and_hex(self):
        seed = MaskSeed.from_int(1)
        assert seed.seed == b"\x01" + b"\x00" * 15
        assert MaskSeed.from_hex(seed.hex()) == seed

    def test_random_seeds_differ(self):
        assert MaskSeed.random() != MaskSeed.random()


class TestQParams:
    def test_serialization(self):
        qp = QParams(scale=0.125, zero_point=128, bits=8)
        data = qp.to_bytes()
        assert len(data) == 13
        assert QParams.from_bytes(data) == qp

    def test_zero_point_range(self):
        with pytest.raises(ValueError):
            QParams(scale=1.0, zero_point=256, bits=8)

    def test_scale_positive(self):
        with pytest.raises(ValueError):
            QParams(scale=0.0, zero_point=0, bits=8)


class TestPruneSpec:
    def test_kept_count(self):
        spec = PruneSpec(mask_seed=MaskSeed.from_int(0), sparsity=0.9, shape=(10, 10))
        assert spec.size == 100
        assert spec.kept_count == 10

    def test_kept_count_rounds_in_favour_of_keeping(self):
        spec = PruneSpec(mask_seed=MaskSeed.from_int(0), sparsity=0.5, shape=(7,))
        assert spec.kept_count == 4

    def test_sparsity_one_rejected(self):
        with pytest.raises(ValueError):
            PruneSpec(mask_seed=MaskSeed.from_int(0), sparsity=1.0, shape=(4,))

    def test_empty_shape_rejected(self):
        with pytest.raises(ValueError):
            PruneSpec(mask_seed=MaskSeed.from_int(0), sparsity=0.1, shape=(0, 3))


class TestCodebook:
    def test_serialization(self):
        cb = Codebook(codewords=np.arange(6, dtype=np.float32).reshape(3, 2))
        data = cb.to_bytes()
        assert len(data) == 8 + 3 * 2 * 4
        restored = Codebook.from_bytes(data)
        assert np.array_equal(restored.codewords, cb.codewords)
        assert (restored.k, restored.d) == (3, 2)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Codebook(codewords=[[0.0, np.nan]])

    def test_rejects_vector(self):
        with pytest.raises(ValueError):
            Codebook(codewords=[1.0, 2.0])

    def test_bits_per_index(self):
        assert PQConfig(k=32, d=8).bits_per_index == 5
        assert PQConfig(k=2, d=1).bits_per_index == 1
        assert PQConfig(k=10, d=1).bits_per_index == 4


class TestAssignments:
    def test_flat_order_is_column_major(self):
        a = Assignments(indices=[[0, 1], [2, 3]], k=4)
        assert a.flat().tolist() == [0, 2, 1, 3]
        restored = Assignments.from_flat(a.flat(), 4, (2, 2))
        assert np.array_equal(restored.indices, a.indices)

    def test_index_range(self):
        with pytest.raises(ValueError):
            Assignments(indices=[[4]], k=4)


class TestPayloadAndHistogram:
    def test_body_length_checked(self):
        with pytest.raises(ValueError):
            MaskedPayload(round_id=0, client_id=0, scheme_tag=SchemeTag.SQ, p=5,
                          body=b"\x00" * 4, element_count=8)

    def test_body_length_ok(self):
        payload = MaskedPayload(round_id=0, client_id=0, scheme_tag=SchemeTag.SQ, p=5,
                                body=b"\x00" * 5, element_count=8)
        assert payload.element_count == 8

    def test_histogram_rows_sum_to_clients(self):
        hist = AssignmentHistogram(counts=[[2, 1], [0, 3]], n_clients=3)
        assert (hist.n_blocks, hist.k) == (2, 2)
        with pytest.raises(ValueError):
            AssignmentHistogram(counts=[[2, 2]], n_clients=3)


class TestRefreshPolicy:
    def test_round_zero_always_refreshes(self):
        assert RefreshPolicy(period=None).is_refresh_round(0)
        assert not RefreshPolicy(period=None).is_refresh_round(5)

    def test_period(self):
        policy = RefreshPolicy(period=5)
        assert [r for r in range(12) if policy.is_refresh_round(r)] == [0, 5, 10]


class TestRoundPlan:
    def _plan(self, **overrides):
        base = dict(
            round_id=0,
            theta={"w": np.zeros((4, 2)), "b": np.zeros(2)},
            codecs={"w": SQCodec(qparams=QParams(scale=1.0, zero_point=128, bits=8)),
                    "b": PlainCodec()},
            p=9,
            clients=[0, 1],
            seeds={0: MaskSeed.from_int(0), 1: MaskSeed.from_int(1)},
        )
        base.update(overrides)
        return RoundPlan(**base)

    def test_valid(self):
        assert self._plan().p == 9

    def test_codec_per_tensor(self):
        with pytest.raises(ValueError):
            self._plan(codecs={"w": PlainCodec()})

    def test_seed_per_client(self):
        with pytest.raises(ValueError):
            self._plan(seeds={0: MaskSeed.from_int(0)})

    def test_sq_bits_fit(self):
        with pytest.raises(ValueError):
            self._plan(p=7)

    def test_pq_only_on_matrices(self):
        codec = PQCodec(config=PQConfig(k=2, d=2), block_size=2,
                        codebook=Codebook(codewords=np.zeros((2, 2))))
        with pytest.raises(ValueError):
            self._plan(codecs={"w": codec, "b": codec})

    def test_pq_block_divides_rows(self):
        codec = PQCodec(config=PQConfig(k=2, d=3), block_size=3,
                        codebook=Codebook(codewords=np.zeros((2, 3))))
        with pytest.raises(ValueError):
            self._plan(codecs={"w": codec, "b": PlainCodec()})
