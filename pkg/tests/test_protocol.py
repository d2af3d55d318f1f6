import numpy as np
import pytest

from secagg_uplink.codec_pq import decompress
from secagg_uplink.codec_scalar import encode_fixed
from secagg_uplink.errors import DimensionError, FramingError, ProtocolError
from secagg_uplink.finite_group import sub_mod, sum_mod, to_signed, unpack, zeros
from secagg_uplink.models import (
    Assignments,
    Codebook,
    GroupVector,
    MaskedPayload,
    MaskSeed,
    SchemeTag,
)
from secagg_uplink.protocol import (
    HEADER_SIZE,
    PlaintextOracle,
    TrustedExecutor,
    client_encrypt,
    client_encrypt_assignments,
    decode_frame,
    encode_frame,
    server_aggregate_secagg,
    server_reconstruct_secind,
    tee_histograms,
    tee_mask_sum,
    weighted_client_encrypt,
)

GOLDEN_SQ_FRAME = "07000000" "03000000" "00" "08" "0000" "04000000" "cd73f6dd"


def seeds_for(clients):
    return {c: MaskSeed.from_int(1000 + c) for c in clients}


class TestFrames:
    def test_golden_frame(self):
        payload = MaskedPayload(round_id=7, client_id=3, scheme_tag=SchemeTag.SQ, p=8,
                                body=bytes([1, 2, 3]), element_count=3)
        frame = encode_frame(payload)
        assert frame.hex() == "07000000030000000008000003000000010203"
        assert decode_frame(frame, 3) == payload

    def test_header_size(self):
        assert HEADER_SIZE == 16

    def test_short_buffer(self):
        with pytest.raises(FramingError):
            decode_frame(b"\x00" * 10, 0)

    def test_unknown_tag(self):
        frame = bytearray.fromhex("07000000030000000908000003000000010203")
        with pytest.raises(FramingError):
            decode_frame(bytes(frame), 3)

    def test_reserved_must_be_zero(self):
        frame = bytes.fromhex("07000000030000000008010003000000010203")
        with pytest.raises(FramingError):
            decode_frame(frame, 3)

    def test_truncated_body(self):
        frame = bytes.fromhex("070000000300000000080000030000000102")
        with pytest.raises(FramingError):
            decode_frame(frame, 3)

    def test_element_count_mismatch(self):
        frame = bytes.fromhex("07000000030000000008000003000000010203")
        with pytest.raises(FramingError):
            decode_frame(frame, 4)

    def test_nonzero_padding_bits(self):
        # p=3, tres valores: 9 bits, el bit alto del segundo byte es relleno
        good = bytes.fromhex("07000000" "03000000" "00" "03" "0000" "02000000" "ff01")
        assert decode_frame(good, 3).body == bytes.fromhex("ff01")
        with pytest.raises(FramingError):
            decode_frame(bytes.fromhex("07000000" "03000000" "00" "03" "0000" "02000000" "ff81"), 3)


class TestClientEncrypt:
    def test_golden_sq(self, golden_seed):
        payload = client_encrypt(zeros(4, 8), golden_seed, 7, 3)
        assert encode_frame(payload).hex() == GOLDEN_SQ_FRAME

    def test_golden_plain(self, golden_seed):
        payload = client_encrypt(encode_fixed([1.0, -1.0], 32, 16), golden_seed, 7, 3,
                                 scheme_tag=SchemeTag.PLAIN)
        assert encode_frame(payload).hex() == (
            "07000000" "03000000" "03" "20" "0000" "08000000" "cd73f7dd2a4b5352")

    def test_golden_prune(self, golden_seed):
        payload = client_encrypt(encode_fixed([0.5, -0.25], 32, 16), golden_seed, 7, 3,
                                 scheme_tag=SchemeTag.PRUNE)
        assert encode_frame(payload).hex() == (
            "07000000" "03000000" "01" "20" "0000" "08000000" "cdf3f6dd2a0b5452")

    def test_golden_weighted_prune(self, golden_seed):
        payload = weighted_client_encrypt(encode_fixed([0.5, -0.25], 32, 16), 3, golden_seed, 7, 3,
                                          scheme_tag=SchemeTag.PRUNE)
        assert encode_frame(payload).hex() == (
            "07000000" "03000000" "01" "20" "0000" "08000000" "cdf3f7dd2a8b5352")

    def test_golden_assignments(self, golden_seed):
        a = Assignments(indices=[[0], [0]], k=16)
        payload = client_encrypt_assignments(a, golden_seed, 7, 3)
        assert encode_frame(payload).hex() == (
            "07000000" "03000000" "02" "04" "0000" "01000000" "cd")

    def test_masked_body_differs_from_plaintext(self, random_vector):
        q = random_vector(64, 16)
        payload = client_encrypt(q, MaskSeed.from_int(9), 0, 0)
        assert unpack(payload.body, 64, 16) != q

    def test_weighted_scales_plain(self):
        seed = MaskSeed.from_int(4)
        q = encode_fixed([0.5, -0.25], 32, 16)
        payload = weighted_client_encrypt(q, 3, seed, 0, 0)
        mask_sum = tee_mask_sum([seed], 2, 32)
        total = server_aggregate_secagg([payload], mask_sum)
        assert to_signed(total).tolist() == [3 * 32768, -3 * 16384]

    def test_weighted_leaves_sq_unscaled(self, random_vector):
        seed = MaskSeed.from_int(4)
        q = random_vector(8, 8)
        assert weighted_client_encrypt(q, 5, seed, 0, 0, SchemeTag.SQ) == client_encrypt(q, seed, 0, 0)

    def test_weighted_rejects_assignments(self, random_vector):
        with pytest.raises(ProtocolError):
            weighted_client_encrypt(random_vector(4, 4), 2, MaskSeed.from_int(0), 0, 0,
                                    SchemeTag.PQ_ASSIGN)


class TestSecAgg:
    def _round(self, random_vector, clients=(0, 1, 2, 3, 4), p=12, length=50):
        seeds = seeds_for(clients)
        updates = {c: random_vector(length, p) for c in clients}
        payloads = [client_encrypt(updates[c], seeds[c].child(SchemeTag.SQ), 1, c) for c in clients]
        mask_sum = TrustedExecutor().secagg_mask_sum(1, seeds, SchemeTag.SQ, length, p)
        return updates, payloads, mask_sum

    def test_exact_sum(self, random_vector):
        updates, payloads, mask_sum = self._round(random_vector)
        assert server_aggregate_secagg(payloads, mask_sum) == sum_mod(list(updates.values()))

    def test_exact_for_every_width(self, rng):
        for p in (1, 3, 8, 17, 32):
            clients = [0, 1, 2]
            seeds = seeds_for(clients)
            updates = [GroupVector(values=rng.integers(0, 1 << p, 20, dtype=np.uint64), p=p)
                       for _ in clients]
            payloads = [client_encrypt(u, seeds[c].child(SchemeTag.PLAIN), 0, c)
                        for c, u in zip(clients, updates)]
            mask_sum = TrustedExecutor().secagg_mask_sum(0, seeds, SchemeTag.PLAIN, 20, p)
            assert server_aggregate_secagg(payloads, mask_sum) == sum_mod(updates)

    def test_tampered_body_breaks_equality(self, random_vector):
        updates, payloads, mask_sum = self._round(random_vector)
        first = payloads[0]
        body = bytes([first.body[0] ^ 1]) + first.body[1:]
        payloads[0] = first.model_copy(update={"body": body})
        assert server_aggregate_secagg(payloads, mask_sum) != sum_mod(list(updates.values()))

    def test_missing_client(self, random_vector):
        _, payloads, mask_sum = self._round(random_vector)
        with pytest.raises(ProtocolError):
            server_aggregate_secagg(payloads[1:], mask_sum, expected_clients=[0, 1, 2, 3, 4])

    def test_duplicate_client(self, random_vector):
        _, payloads, mask_sum = self._round(random_vector)
        with pytest.raises(ProtocolError):
            server_aggregate_secagg(payloads + [payloads[0]], mask_sum)

    def test_heterogeneous_payloads(self, random_vector):
        _, payloads, mask_sum = self._round(random_vector)
        odd = client_encrypt(random_vector(50, 8), MaskSeed.from_int(0), 1, 99)
        with pytest.raises(ProtocolError):
            server_aggregate_secagg(payloads + [odd], mask_sum)

    def test_mask_sum_shape_mismatch(self, random_vector):
        _, payloads, _ = self._round(random_vector)
        with pytest.raises(DimensionError):
            server_aggregate_secagg(payloads, zeros(49, 12))

    def test_empty(self):
        with pytest.raises(ProtocolError):
            server_aggregate_secagg([], zeros(1, 8))
        with pytest.raises(ProtocolError):
            tee_mask_sum([], 4, 8)

    def test_mask_sum_uses_per_tag_children(self):
        seeds = seeds_for([0, 1])
        sq = TrustedExecutor().secagg_mask_sum(0, seeds, SchemeTag.SQ, 16, 8)
        plain = TrustedExecutor().secagg_mask_sum(0, seeds, SchemeTag.PLAIN, 16, 8)
        assert sq != plain
        assert sq == tee_mask_sum([seeds[0].child(0), seeds[1].child(0)], 16, 8)


class TestSecInd:
    def _setup(self, rng, k=8, rows=4, cols=3, clients=(0, 1, 2, 3)):
        cb = Codebook(codewords=rng.normal(size=(k, 2)))
        seeds = seeds_for(clients)
        assignments = {c: Assignments(indices=rng.integers(0, k, size=(rows, cols)), k=k)
                       for c in clients}
        frames = [encode_frame(client_encrypt_assignments(
            assignments[c], seeds[c].child(SchemeTag.PQ_ASSIGN), 2, c)) for c in clients]
        return cb, seeds, assignments, frames

    def test_histograms_match_plaintext_counts(self, rng):
        cb, seeds, assignments, frames = self._setup(rng)
        hist = TrustedExecutor().secind_histograms(2, frames, seeds, 8, 12)
        expected = np.zeros((12, 8), dtype=np.int64)
        for a in assignments.values():
            expected[np.arange(12), a.flat()] += 1
        assert np.array_equal(hist.counts, expected)
        assert hist.n_clients == 4

    def test_reconstruction_equals_sum_of_decompressed(self, rng):
        cb, seeds, assignments, frames = self._setup(rng)
        hist = TrustedExecutor().secind_histograms(2, frames, seeds, 8, 12)
        secure = server_reconstruct_secind(hist, cb, (8, 3))
        plain = sum(decompress(cb, a) for a in assignments.values())
        assert secure == pytest.approx(plain)

    def test_non_power_of_two_k(self, rng):
        cb, seeds, assignments, frames = self._setup(rng, k=5)
        hist = TrustedExecutor().secind_histograms(2, frames, seeds, 5, 12)
        secure = server_reconstruct_secind(hist, cb, (8, 3))
        assert secure == pytest.approx(sum(decompress(cb, a) for a in assignments.values()))

    def test_wrong_round(self, rng):
        _, seeds, _, frames = self._setup(rng)
        with pytest.raises(ProtocolError):
            TrustedExecutor().secind_histograms(3, frames, seeds, 8, 12)

    def test_client_without_seed(self, rng):
        _, seeds, _, frames = self._setup(rng)
        seeds.pop(0)
        with pytest.raises(ProtocolError):
            TrustedExecutor().secind_histograms(2, frames, seeds, 8, 12)

    def test_masked_index_out_of_range(self, rng):
        payload = MaskedPayload(round_id=0, client_id=0, scheme_tag=SchemeTag.PQ_ASSIGN, p=3,
                                body=bytes([0b111]), element_count=1)
        with pytest.raises(ProtocolError):
            tee_histograms([payload], [MaskSeed.from_int(0)], 5, 1)

    def test_wrong_tag(self):
        payload = MaskedPayload(round_id=0, client_id=0, scheme_tag=SchemeTag.SQ, p=3,
                                body=bytes([0]), element_count=1)
        with pytest.raises(ProtocolError):
            tee_histograms([payload], [MaskSeed.from_int(0)], 8, 1)

    def test_codebook_mismatch(self, rng):
        cb, seeds, _, frames = self._setup(rng)
        hist = TrustedExecutor().secind_histograms(2, frames, seeds, 8, 12)
        with pytest.raises(DimensionError):
            server_reconstruct_secind(hist, Codebook(codewords=np.zeros((4, 2))), (8, 3))


class TestOracle:
    def test_plaintext_sum(self):
        updates = [GroupVector(values=[200, 3], p=8), GroupVector(values=[100, 4], p=8)]
        assert PlaintextOracle.plaintext_sum(updates, 9) == GroupVector(values=[300, 7], p=9)

    def test_detect_overflows_unsigned(self):
        updates = [GroupVector(values=[200, 3], p=8), GroupVector(values=[100, 4], p=8)]
        assert PlaintextOracle.detect_overflows(updates, 8) == 0.5
        assert PlaintextOracle.detect_overflows(updates, 9) == 0.0

    def test_detect_overflows_centered(self):
        updates = [GroupVector(values=[250, 128], p=8), GroupVector(values=[250, 128], p=8)]
        # Σ(q − 128) = 244 y 0; rango con signo de 8 bits = [−128, 128)
        assert PlaintextOracle.detect_overflows(updates, 8, center=128) == 0.5

    def test_centered_criterion_ignores_zero_point(self):
        # qparams afines: z = 0, valores en el extremo superior
        top = [GroupVector(values=[15, 0, 7], p=4)] * 4
        assert PlaintextOracle.detect_overflows(top, 6, center=8) == 0.0
        assert PlaintextOracle.detect_overflows(top, 5, center=8) > 0.0

    def test_detect_signed_overflows(self):
        assert PlaintextOracle.detect_signed_overflows(np.array([127, -128, 128, -129]), 8) == 0.5

    def test_secure_matches_oracle(self, random_vector):
        clients = [0, 1, 2]
        seeds = seeds_for(clients)
        updates = [random_vector(30, 10) for _ in clients]
        payloads = [client_encrypt(u, seeds[c].child(SchemeTag.SQ), 0, c)
                    for c, u in zip(clients, updates)]
        mask_sum = TrustedExecutor().secagg_mask_sum(0, seeds, SchemeTag.SQ, 30, 10)
        secure = server_aggregate_secagg(payloads, mask_sum)
        assert secure == PlaintextOracle.plaintext_sum(updates, 10)
        assert sub_mod(secure, secure) == zeros(30, 10)


class TestReferenceExamples:
    def test_identical_seeds_cancel_at_one_bit(self):
        s = MaskSeed.from_int(5)
        assert tee_mask_sum([s, s], 100, 1) == zeros(100, 1)

    def test_zero_mask_leaves_update_visible(self):
        q = GroupVector(values=[0, 0, 0], p=8)
        payload = client_encrypt(q, MaskSeed.from_int(1), 0, 0,
                                 mask_source=lambda seed, n, p: zeros(n, p))
        assert payload.body == bytes(3)

    def test_different_seeds_hide_the_same_update(self, random_vector):
        q = random_vector(10_000, 16)
        a = unpack(client_encrypt(q, MaskSeed.from_int(1), 0, 0).body, 10_000, 16)
        b = unpack(client_encrypt(q, MaskSeed.from_int(2), 0, 0).body, 10_000, 16)
        assert np.mean(a.values != b.values) >= 0.99

    def test_single_client_recovers_own_update(self, random_vector):
        q = random_vector(20, 10)
        seeds = seeds_for([4])
        payload = client_encrypt(q, seeds[4].child(SchemeTag.SQ), 2, 4)
        mask_sum = TrustedExecutor().secagg_mask_sum(2, seeds, SchemeTag.SQ, 20, 10)
        assert server_aggregate_secagg([payload], mask_sum) == q

    def test_zero_updates_sum_to_zero(self):
        clients = [0, 1, 2]
        seeds = seeds_for(clients)
        payloads = [client_encrypt(zeros(16, 9), seeds[c].child(SchemeTag.SQ), 0, c) for c in clients]
        mask_sum = TrustedExecutor().secagg_mask_sum(0, seeds, SchemeTag.SQ, 16, 9)
        assert server_aggregate_secagg(payloads, mask_sum) == zeros(16, 9)

    def test_prune_weight_scales_values(self):
        v = GroupVector(values=[1, 2, 5], p=8)
        seeds = seeds_for([0])
        payload = weighted_client_encrypt(v, 3, seeds[0].child(SchemeTag.PRUNE), 0, 0,
                                          scheme_tag=SchemeTag.PRUNE)
        mask_sum = TrustedExecutor().secagg_mask_sum(0, seeds, SchemeTag.PRUNE, 3, 8)
        assert server_aggregate_secagg([payload], mask_sum).values.tolist() == [3, 6, 15]

    def test_unanimous_codeword(self):
        clients = range(5)
        seeds = seeds_for(clients)
        a = Assignments(indices=[[2], [2], [2]], k=4)
        frames = [encode_frame(client_encrypt_assignments(a, seeds[c].child(SchemeTag.PQ_ASSIGN), 0, c))
                  for c in clients]
        hist = TrustedExecutor().secind_histograms(0, frames, seeds, 4, 3)
        assert hist.counts.tolist() == [[0, 0, 5, 0]] * 3

    def test_single_codeword_reconstruction(self):
        clients = range(3)
        seeds = seeds_for(clients)
        cb = Codebook(codewords=[[1.0, 2.0]])
        a = Assignments(indices=[[0, 0]], k=1)
        frames = [encode_frame(client_encrypt_assignments(a, seeds[c].child(SchemeTag.PQ_ASSIGN), 0, c))
                  for c in clients]
        hist = TrustedExecutor().secind_histograms(0, frames, seeds, 1, 2)
        assert server_reconstruct_secind(hist, cb, (2, 2)).tolist() == [[3.0, 3.0], [6.0, 6.0]]

    def test_one_bit_overflow(self):
        ones = [GroupVector(values=[1], p=1), GroupVector(values=[1], p=1)]
        assert PlaintextOracle.detect_overflows(ones, 1) == 1.0
