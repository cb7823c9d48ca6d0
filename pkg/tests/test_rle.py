import numpy as np
import pytest

from gutseg.errors import RleParseError
from gutseg.rle import decode_rle, decode_rle_lenient, encode_rle


def random_mask(rng, max_side=64):
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    density = rng.random()
    return rng.random((h, w)) < density


class TestDecode:
    def test_empty_string_is_empty_mask(self):
        mask = decode_rle("", 4, 4)
        assert mask.shape == (4, 4)
        assert not mask.any()

    def test_hand_enumerated_positions(self):
        # flat 1-indexed row-major: 1,2 -> (0,0),(0,1); 7 -> (1,2)
        mask = decode_rle("1 2 7 1", 2, 4)
        expected = np.zeros((2, 4), dtype=bool)
        expected[0, 0] = expected[0, 1] = expected[1, 2] = True
        assert np.array_equal(mask, expected)

    def test_popcount_equals_sum_of_lengths(self, rng):
        for _ in range(50):
            mask = random_mask(rng)
            s = encode_rle(mask)
            lengths = [int(tok) for tok in s.split()][1::2]
            assert decode_rle(s, *mask.shape).sum() == sum(lengths) == mask.sum()

    def test_run_touching_last_pixel(self):
        mask = decode_rle("15 2", 4, 4)
        assert mask[3, 2] and mask[3, 3]


class TestEncode:
    def test_all_zero_mask_is_empty_string(self):
        assert encode_rle(np.zeros((5, 7), dtype=bool)) == ""

    def test_inverse_of_decode_example(self):
        mask = np.zeros((2, 4), dtype=bool)
        mask[0, 0] = mask[0, 1] = mask[1, 2] = True
        assert encode_rle(mask) == "1 2 7 1"

    def test_no_adjacent_runs(self, rng):
        for _ in range(100):
            s = encode_rle(random_mask(rng))
            pairs = [int(t) for t in s.split()]
            runs = list(zip(pairs[::2], pairs[1::2]))
            for (s0, l0), (s1, _) in zip(runs, runs[1:]):
                assert s0 + l0 - 1 + 1 < s1  # end + 1 < next start


class TestRoundTrip:
    def test_decode_encode_identity_on_masks(self):
        rng = np.random.default_rng(99)
        for _ in range(500):
            mask = random_mask(rng)
            assert np.array_equal(decode_rle(encode_rle(mask), *mask.shape), mask)

    def test_encode_decode_identity_on_canonical_strings(self, rng):
        for _ in range(200):
            mask = random_mask(rng)
            s = encode_rle(mask)
            assert encode_rle(decode_rle(s, *mask.shape)) == s


class TestMalformed:
    @pytest.mark.parametrize("bad, fragment", [
        ("1 2 3", "odd token count"),
        ("1 x", "non-numeric"),
        ("0 2", "1-indexed"),
        ("3 0", "non-positive run length"),
        ("1 -2", "non-positive run length"),
        ("1 20", "beyond"),
        ("5 2 4 1", "overlaps or precedes"),
        ("1 3 3 2", "overlaps or precedes"),
    ])
    def test_rejected_with_named_offender(self, bad, fragment):
        with pytest.raises(RleParseError, match=fragment):
            decode_rle(bad, 4, 4)

    def test_adjacent_runs_accepted_and_canonicalized(self):
        # adjacency is tolerated on input; re-encoding merges the runs
        mask = decode_rle("1 2 3 2", 2, 4)
        assert encode_rle(mask) == "1 4"

    def test_lenient_clips_out_of_range(self, caplog):
        with caplog.at_level("WARNING"):
            mask = decode_rle_lenient("14 10", 4, 4)
        assert mask.reshape(-1)[13:].all() and mask.sum() == 3
        assert any("clipping" in r.message for r in caplog.records)

    def test_lenient_merges_overlap(self):
        mask = decode_rle_lenient("1 4 2 2", 3, 3)
        assert mask.sum() == 4
