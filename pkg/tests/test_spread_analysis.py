import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from susbp.attention_core import AttnInput, attn_forward
from susbp.numerics import RngStream
from susbp.spread_analysis import (
    DumpFormatError,
    SpreadConfig,
    SpreadReport,
    aggregate_phi,
    head_spread_stats,
    load_weight_dump,
    spread_profile,
    strided_means,
    top_p_count,
    write_weight_dump,
)


def top_p_oracle(row, p):
    """Independent scan: sort descending (index tiebreak), accumulate."""
    pairs = sorted(enumerate(row), key=lambda t: (-t[1], t[0]))
    acc = 0.0
    for k, (_, w) in enumerate(pairs):
        acc += w
        if acc >= p - 1e-9:
            return k + 1
    return len(row)


def random_causal_w(seed, n, d=3):
    gen = RngStream(seed, stream_id=5).generator()
    inp = AttnInput(
        q=gen.normal(size=(n, d)), k=gen.normal(size=(n, d)),
        v=gen.normal(size=(n, d)), causal=True,
    )
    return attn_forward(inp).w


class TestTopPCount:
    def test_one_hot(self):
        row = np.zeros(8)
        row[3] = 1.0
        assert top_p_count(row, 0.9) == 1

    @pytest.mark.parametrize("m", [1, 3, 9, 10, 11, 20, 100])
    def test_uniform_row_ceil(self, m):
        row = np.full(m, 1.0 / m)
        assert top_p_count(row, 0.9) == math.ceil(0.9 * m)

    def test_seeded_rows_match_oracle(self):
        gen = RngStream(1, stream_id=6).generator()
        for _ in range(50):
            row = gen.dirichlet(np.full(50, 0.5))
            for p in (0.5, 0.9, 1.0):
                assert top_p_count(row, p) == top_p_oracle(row, p)

    def test_p_one_counts_all_positive(self):
        row = np.full(7, 1.0 / 7)
        assert top_p_count(row, 1.0) == 7

    def test_empty_row_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            top_p_count(np.zeros(0), 0.9)

    def test_unnormalized_row_rejected(self):
        with pytest.raises(ValueError, match="mass"):
            top_p_count(np.full(4, 0.3), 0.9)


class TestSpreadProfile:
    def test_diagonal_attention(self):
        report = spread_profile(np.eye(6))
        np.testing.assert_array_equal(report.s, 1)

    def test_uniform_causal(self):
        n = 25
        w = np.tril(np.ones((n, n)))
        w /= w.sum(axis=1, keepdims=True)
        report = spread_profile(w, SpreadConfig(p=0.9))
        want = np.array([math.ceil(0.9 * (i + 1)) for i in range(n)])
        np.testing.assert_array_equal(report.s, want)

    def test_toy_model_matches_row_oracle(self):
        w = random_causal_w(2, n=40)
        report = spread_profile(w)
        for i in range(40):
            assert report.s[i] == top_p_oracle(w[i, : i + 1], 0.9)

    def test_spread_bounds(self):
        w = random_causal_w(3, n=30)
        report = spread_profile(w)
        for i in range(30):
            assert 1 <= report.s[i] <= i + 1

    def test_p_equal_one_saturates(self):
        w = random_causal_w(4, n=12)
        report = spread_profile(w, SpreadConfig(p=1.0))
        np.testing.assert_array_equal(report.s, np.arange(1, 13))

    def test_noncausal_mass_rejected(self):
        w = np.eye(4)
        w[0, 2] = 1e-6
        with pytest.raises(ValueError, match="non-causal"):
            spread_profile(w)

    def test_uniform_causal_phi_near_p_for_large_i(self):
        # phi_i = 0.9 + ~2.8/i for uniform causal rows: the ceil bias keeps
        # phi above 0.92 until i ~ 140, then it settles into [0.88, 0.92].
        n = 256
        w = np.tril(np.ones((n, n)))
        w /= w.sum(axis=1, keepdims=True)
        report = spread_profile(w)
        for i in range(100, n):
            assert 0.88 <= report.phi[i] <= 0.95
        for i in range(150, n):
            assert 0.88 <= report.phi[i] <= 0.92
        assert abs(report.phi[n - 1] - 0.9) < abs(report.phi[100] - 0.9)


class TestAggregatePhi:
    def test_all_ones(self):
        phi = aggregate_phi(np.ones(6, dtype=int))
        assert phi[4] == pytest.approx(0.5)
        for i in range(1, 6):
            assert phi[i] == pytest.approx(2.0 / i)

    def test_small_example(self):
        phi = aggregate_phi([1, 1, 2])
        assert phi[2] == pytest.approx(4.0 / 3.0)

    def test_position_zero_undefined(self):
        phi = aggregate_phi([1, 1])
        assert np.isnan(phi[0])
        report = SpreadReport(s=np.array([1, 1]), phi=phi, positions=2)
        with pytest.raises(ValueError, match="undefined"):
            report.phi_at(0)
        assert report.phi_at(1) == pytest.approx(2.0)

    def test_matches_prefix_sum_oracle(self):
        gen = RngStream(5, stream_id=7).generator()
        for _ in range(100):
            s = gen.integers(1, 30, size=int(gen.integers(2, 60)))
            phi = aggregate_phi(s)
            for i in range(1, s.size):
                num = float(sum(int(v) for v in s[: i + 1]))
                den = float(i * (i + 1) // 2)
                assert phi[i] == pytest.approx(num / den, rel=1e-12)

    def test_counts_below_one_rejected(self):
        with pytest.raises(ValueError, match="at least 1"):
            aggregate_phi([1, 0, 2])

    @given(st.lists(st.integers(min_value=1, max_value=50), min_size=4, max_size=40),
           st.integers(min_value=1, max_value=38))
    @settings(max_examples=50, deadline=None)
    def test_chunked_prefix_merge_invariance(self, s, split):
        split = min(split, len(s) - 1)
        whole = aggregate_phi(s)
        # merge: prefix sums of the first chunk carry into the second
        head = np.cumsum(s[:split])[-1]
        tail = np.cumsum(s[split:]) + head
        merged_num = np.concatenate([np.cumsum(s[:split]), tail]).astype(float)
        idx = np.arange(len(s), dtype=float)
        merged = merged_num[1:] / np.cumsum(idx)[1:]
        np.testing.assert_allclose(whole[1:], merged, rtol=1e-12)


class TestHeadSpreadStats:
    def test_identical_heads(self):
        stats = head_spread_stats(np.full(5, 0.4))
        assert stats.arithmetic_mean == pytest.approx(stats.geometric_mean)

    def test_two_head_example(self):
        stats = head_spread_stats(np.array([0.25, 1.0]))
        assert stats.arithmetic_mean == pytest.approx(0.625)
        assert stats.geometric_mean == pytest.approx(0.5)

    def test_am_gm_inequality_on_random_heads(self):
        gen = RngStream(6, stream_id=8).generator()
        phis = gen.uniform(0.01, 1.5, size=100)
        stats = head_spread_stats(phis)
        assert stats.geometric_mean <= stats.arithmetic_mean

    def test_histogram_counts_sum_to_head_count(self):
        gen = RngStream(7, stream_id=8).generator()
        phis = gen.uniform(0.01, 1.5, size=64)
        stats = head_spread_stats(phis)
        assert stats.hist_counts.sum() == 64

    def test_histogram_permutation_invariant(self):
        gen = RngStream(8, stream_id=8).generator()
        phis = gen.uniform(0.01, 1.5, size=32)
        a = head_spread_stats(phis)
        b = head_spread_stats(phis[gen.permutation(32)])
        np.testing.assert_array_equal(a.hist_bin_lefts, b.hist_bin_lefts)
        np.testing.assert_array_equal(a.hist_counts, b.hist_counts)

    def test_nonpositive_phi_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            head_spread_stats([0.5, 0.0])


class TestStridedMeans:
    def test_ten_token_windows(self):
        vals = np.arange(25, dtype=float)
        pos, means = strided_means(vals, stride=10)
        np.testing.assert_array_equal(pos, [9, 19])
        np.testing.assert_allclose(means, [4.5, 14.5])

    def test_short_input_single_window(self):
        pos, means = strided_means(np.array([2.0, 4.0]), stride=10)
        np.testing.assert_array_equal(pos, [1])
        np.testing.assert_allclose(means, [3.0])

    def test_nan_skipped(self):
        vals = np.array([np.nan] + [1.0] * 9)
        _, means = strided_means(vals, stride=10)
        assert means[0] == pytest.approx(1.0)


class TestDumpRoundTrip:
    @staticmethod
    def make_dump(tmp_path, layers=2, heads=2, n=16, seed=0):
        matrices = {
            (l, h): random_causal_w(seed + 10 * l + h, n)
            for l in range(layers)
            for h in range(heads)
        }
        manifest = write_weight_dump(matrices, "toy", tmp_path, sequences_averaged=4)
        return matrices, manifest

    def test_round_trip_within_f32(self, tmp_path):
        matrices, manifest = self.make_dump(tmp_path)
        dump = load_weight_dump(manifest)
        assert dump.meta.model == "toy"
        assert dump.meta.n == 16
        assert dump.meta.layers == 2 and dump.meta.heads == 2
        assert dump.meta.sequences_averaged == 4
        for key, w in matrices.items():
            np.testing.assert_allclose(dump.matrices[key], w, atol=1e-6)
            np.testing.assert_allclose(dump.matrices[key].sum(axis=1), 1.0, atol=1e-12)

    def test_raw_row_sums_within_f32_tolerance(self, tmp_path):
        _, manifest = self.make_dump(tmp_path)
        dump = load_weight_dump(manifest)
        for sums in dump.raw_row_sums.values():
            assert np.max(np.abs(sums - 1.0)) < 1e-3

    def test_corrupted_magic_names_file(self, tmp_path):
        _, manifest = self.make_dump(tmp_path)
        victim = tmp_path / "layer00_head01.atnw"
        data = bytearray(victim.read_bytes())
        data[:4] = b"XXXX"
        victim.write_bytes(bytes(data))
        with pytest.raises(DumpFormatError, match="layer00_head01"):
            load_weight_dump(manifest)

    def test_truncated_file_names_offset(self, tmp_path):
        _, manifest = self.make_dump(tmp_path)
        victim = tmp_path / "layer01_head00.atnw"
        victim.write_bytes(victim.read_bytes()[:-1])
        with pytest.raises(DumpFormatError, match="truncated"):
            load_weight_dump(manifest)

    def test_row_sum_deviation_rejected(self, tmp_path):
        _, manifest = self.make_dump(tmp_path, layers=1, heads=1)
        victim = tmp_path / "layer00_head00.atnw"
        data = bytearray(victim.read_bytes())
        # scale row 3 of the f32 payload by 1.5
        n = 16
        row = np.frombuffer(data[16 + 4 * 3 * n : 16 + 4 * 4 * n], dtype="<f4") * 1.5
        data[16 + 4 * 3 * n : 16 + 4 * 4 * n] = row.astype("<f4").tobytes()
        victim.write_bytes(bytes(data))
        with pytest.raises(DumpFormatError, match="row 3"):
            load_weight_dump(manifest)

    def test_hand_built_identity_dump(self, tmp_path):
        manifest = write_weight_dump({(0, 0): np.eye(2)}, "identity", tmp_path, 1)
        dump = load_weight_dump(manifest)
        np.testing.assert_array_equal(dump.matrices[(0, 0)], np.eye(2))
        np.testing.assert_array_equal(dump.raw_row_sums[(0, 0)], 1.0)

    def test_manifest_schema_fields(self, tmp_path):
        _, manifest = self.make_dump(tmp_path)
        doc = json.loads(manifest.read_text())
        assert doc["format-version"] == 1
        assert doc["dtype"] == "f32"
        assert doc["layout"] == "dense-causal-rowmajor"
        assert doc["sequences-averaged"] == 4
        assert len(doc["files"]) == 4

    def test_missing_file_reported(self, tmp_path):
        _, manifest = self.make_dump(tmp_path)
        (tmp_path / "layer00_head00.atnw").unlink()
        with pytest.raises(DumpFormatError, match="missing"):
            load_weight_dump(manifest)
