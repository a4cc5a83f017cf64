import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibimpute.data import (
    BLOCK,
    POINT,
    CsvFormatError,
    Dataset,
    MaskError,
    MaskSpec,
    SplitError,
    Window,
    apply_mask,
    chrono_split,
    fit_normalizer,
    load_csv,
    make_synthetic,
    make_windows,
    normalize_window,
    write_csv,
)


def _write(tmp_path, text):
    p = tmp_path / "data.csv"
    p.write_text(text)
    return str(p)


def _run_lengths(hidden_col: np.ndarray) -> list[int]:
    """Lengths of maximal runs of hidden (True) entries in one column."""
    runs, current = [], 0
    for h in hidden_col:
        if h:
            current += 1
        elif current:
            runs.append(current)
            current = 0
    if current:
        runs.append(current)
    return runs


class TestLoadCsv:
    def test_one_empty_cell(self, tmp_path):
        ds = load_csv(_write(tmp_path, "a,b\n1,2\n3,\n5,6\n"))
        assert ds.values.shape == (3, 2)
        assert ds.native_mask.sum() == 5
        assert ds.native_mask[1, 1] == 0.0
        assert ds.values[1, 1] == 0.0

    def test_header_only_rejected(self, tmp_path):
        with pytest.raises(CsvFormatError, match="no data rows"):
            load_csv(_write(tmp_path, "a,b\n"))

    def test_native_mask_example(self, tmp_path):
        ds = load_csv(_write(tmp_path, "a,b\n1.5,2.5\n3.5,\n"))
        assert np.array_equal(ds.native_mask, [[1.0, 1.0], [1.0, 0.0]])

    def test_ragged_row_reports_line(self, tmp_path):
        with pytest.raises(CsvFormatError, match="line 3"):
            load_csv(_write(tmp_path, "a,b\n1,2\n1,2,3\n"))

    def test_non_numeric_cell(self, tmp_path):
        with pytest.raises(CsvFormatError, match="line 2"):
            load_csv(_write(tmp_path, "a,b\n1,oops\n"))

    def test_round_trip(self, tmp_path):
        ds = load_csv(_write(tmp_path, "a,b\n1.5,2.5\n3.5,\n"))
        out = str(tmp_path / "out.csv")
        write_csv(out, ds)
        again = load_csv(out)
        assert np.array_equal(again.values, ds.values)
        assert np.array_equal(again.native_mask, ds.native_mask)
        assert again.variable_names == ds.variable_names


class TestChronoSplit:
    def test_60_20_20(self):
        ds = make_synthetic(2, 100, seed=1)
        train, val, test = chrono_split(ds, window_len=10)
        assert (train.length, val.length, test.length) == (60, 20, 20)

    def test_segments_are_contiguous_and_ordered(self):
        ds = make_synthetic(1, 50, seed=2)
        train, val, test = chrono_split(ds, window_len=5)
        joined = np.concatenate([train.values, val.values, test.values])
        assert np.array_equal(joined, ds.values)

    def test_empty_split_rejected(self):
        ds = make_synthetic(1, 100, seed=3)
        with pytest.raises(SplitError, match="empty split"):
            chrono_split(ds, window_len=10, fractions=(1.0, 0.0, 0.0))

    def test_short_segment_rejected(self):
        ds = make_synthetic(1, 96, seed=4)
        with pytest.raises(SplitError):
            chrono_split(ds, window_len=96)

    def test_bad_fractions_rejected(self):
        ds = make_synthetic(1, 100, seed=5)
        with pytest.raises(SplitError):
            chrono_split(ds, window_len=5, fractions=(0.5, 0.2, 0.2))


class TestMakeWindows:
    @pytest.mark.parametrize(
        "length,t,stride,expected",
        [(96, 96, 1, 1), (100, 96, 1, 5), (100, 96, 4, 2)],
    )
    def test_window_counts(self, length, t, stride, expected):
        ds = make_synthetic(2, length, seed=6)
        windows = make_windows(ds, t, stride)
        assert len(windows) == expected
        assert all(w.shape == (t, 2) for w in windows)
        assert [w.index for w in windows] == list(range(expected))

    def test_window_too_long_rejected(self):
        ds = make_synthetic(1, 10, seed=7)
        with pytest.raises(SplitError):
            make_windows(ds, 11, 1)

    def test_contents_match_source(self):
        ds = make_synthetic(2, 30, seed=8)
        windows = make_windows(ds, 10, 10)
        for k, w in enumerate(windows):
            assert np.array_equal(w.x, ds.values[10 * k : 10 * k + 10])


class TestPointMask:
    def test_rate_zero_hides_nothing(self):
        ds = make_synthetic(3, 50, seed=9)
        w = make_windows(ds, 20, 20)[0]
        tsw = apply_mask(w, MaskSpec(pattern=POINT, rate=0.0, seed=1))
        assert np.all(tsw.m_art == 1.0)
        assert np.array_equal(tsw.x_masked, w.x * w.m_obs)
        assert tsw.realized_rate == 0.0

    @pytest.mark.parametrize("rate", [0.1, 0.5, 0.9])
    def test_realized_rate_concentrates(self, rate):
        ds = make_synthetic(10, 1000, seed=10)
        w = make_windows(ds, 1000, 1000)[0]  # 10000 entries
        tsw = apply_mask(w, MaskSpec(pattern=POINT, rate=rate, seed=2))
        assert abs(tsw.realized_rate - rate) < 0.02

    def test_never_hides_natively_missing(self):
        values = np.arange(40.0).reshape(20, 2)
        m_obs = np.ones((20, 2))
        m_obs[::3, 0] = 0.0
        w = Window(x=values * m_obs, m_obs=m_obs, index=0)
        tsw = apply_mask(w, MaskSpec(pattern=POINT, rate=0.9, seed=3))
        assert np.all(tsw.m_art[m_obs == 0.0] == 1.0)

    def test_eval_positions_disjoint_from_visible(self):
        ds = make_synthetic(2, 50, seed=11)
        w = make_windows(ds, 25, 25)[0]
        tsw = apply_mask(w, MaskSpec(pattern=POINT, rate=0.4, seed=4))
        visible = tsw.m_obs * tsw.m_art
        assert np.all(visible * tsw.eval_mask == 0.0)

    def test_deterministic_per_window_index(self):
        ds = make_synthetic(2, 60, seed=12)
        w0, w1 = make_windows(ds, 20, 20)[:2]
        spec = MaskSpec(pattern=POINT, rate=0.5, seed=5)
        a = apply_mask(w0, spec)
        b = apply_mask(w0, spec)
        c = apply_mask(w1, spec)
        assert np.array_equal(a.m_art, b.m_art)
        assert not np.array_equal(a.m_art, c.m_art)

    def test_x_masked_identity(self):
        ds = make_synthetic(2, 40, seed=13)
        w = make_windows(ds, 20, 20)[0]
        tsw = apply_mask(w, MaskSpec(pattern=POINT, rate=0.3, seed=6))
        keep = tsw.m_obs * tsw.m_art
        assert np.array_equal(tsw.x_masked, tsw.x * keep)
        assert np.all(tsw.x_masked[keep == 0.0] == 0.0)


class TestBlockMask:
    def test_single_block_example(self):
        w = Window(x=np.arange(16.0).reshape(16, 1), m_obs=np.ones((16, 1)), index=0)
        tsw = apply_mask(w, MaskSpec(pattern=BLOCK, rate=0.25, block_len=4, seed=7))
        runs = _run_lengths(tsw.m_art[:, 0] == 0.0)
        assert runs == [4]

    @pytest.mark.parametrize("rate", [0.1, 0.25, 0.4])
    def test_runs_have_configured_length(self, rate):
        ds = make_synthetic(4, 960, seed=14)
        windows = make_windows(ds, 96, 96)
        spec = MaskSpec(pattern=BLOCK, rate=rate, block_len=4, seed=8)
        for w in windows:
            tsw = apply_mask(w, spec)
            for col in range(4):
                runs = _run_lengths(tsw.m_art[:, col] == 0.0)
                short = [r for r in runs if r != 4]
                assert all(r < 4 for r in short)
                assert len(short) <= 1  # at most the one truncated final run

    def test_quota_met_per_variable(self):
        ds = make_synthetic(3, 96, seed=15)
        w = make_windows(ds, 96, 96)[0]
        spec = MaskSpec(pattern=BLOCK, rate=0.3, block_len=5, seed=9)
        tsw = apply_mask(w, spec)
        for col in range(3):
            hidden = int((tsw.eval_mask[:, col]).sum())
            n_obs = int(w.m_obs[:, col].sum())
            assert hidden == int(np.ceil(0.3 * n_obs))

    def test_high_rate_still_meets_quota(self):
        # beyond the non-adjacent packing limit the placement relaxes, so
        # runs may merge, but the requested amount is still hidden
        w = Window(x=np.zeros((40, 1)), m_obs=np.ones((40, 1)), index=0)
        tsw = apply_mask(w, MaskSpec(pattern=BLOCK, rate=0.9, block_len=4, seed=10))
        assert int(tsw.eval_mask.sum()) == 36

    def test_block_respects_native_missing(self):
        m_obs = np.ones((30, 1))
        m_obs[10:20, 0] = 0.0
        w = Window(x=np.ones((30, 1)) * m_obs, m_obs=m_obs, index=0)
        tsw = apply_mask(w, MaskSpec(pattern=BLOCK, rate=0.5, block_len=3, seed=11))
        assert np.all(tsw.m_art[m_obs == 0.0] == 1.0)
        assert int(tsw.eval_mask.sum()) == 10  # ceil(0.5 * 20)

    def test_block_len_longer_than_window_rejected(self):
        w = Window(x=np.zeros((8, 1)), m_obs=np.ones((8, 1)), index=0)
        with pytest.raises(MaskError):
            apply_mask(w, MaskSpec(pattern=BLOCK, rate=0.2, block_len=9, seed=12))


class TestMaskSpecValidation:
    def test_rate_one_rejected(self):
        with pytest.raises(MaskError):
            MaskSpec(rate=1.0).validate()

    def test_negative_rate_rejected(self):
        with pytest.raises(MaskError):
            MaskSpec(rate=-0.1).validate()

    def test_unknown_pattern_rejected(self):
        with pytest.raises(MaskError):
            MaskSpec(pattern="diagonal").validate()

    def test_bad_block_len_rejected(self):
        with pytest.raises(MaskError):
            MaskSpec(pattern=BLOCK, block_len=0).validate()


class TestNormalizer:
    def test_constant_variable(self):
        w = Window(x=np.full((10, 1), 3.0), m_obs=np.ones((10, 1)), index=0)
        norm = fit_normalizer([w])
        assert norm.std[0] == 1.0
        assert np.all(norm.normalize(w.x) == 0.0)

    def test_population_std_example(self):
        x = np.array([[0.0], [2.0]])
        w = Window(x=x, m_obs=np.ones((2, 1)), index=0)
        norm = fit_normalizer([w])
        assert norm.mean[0] == 1.0
        assert norm.std[0] == 1.0
        assert np.array_equal(norm.normalize(x)[:, 0], [-1.0, 1.0])

    def test_round_trip(self):
        ds = make_synthetic(4, 200, seed=16)
        windows = make_windows(ds, 50, 50)
        norm = fit_normalizer(windows)
        x = np.random.default_rng(17).normal(size=(50, 4))
        assert np.max(np.abs(norm.denormalize(norm.normalize(x)) - x)) < 1e-10

    def test_fit_ignores_missing_entries(self):
        x = np.array([[1.0, 5.0], [3.0, 100.0]])
        m = np.array([[1.0, 1.0], [1.0, 0.0]])
        w = Window(x=x * m, m_obs=m, index=0)
        norm = fit_normalizer([w])
        assert norm.mean[1] == 5.0  # the masked 100 never contributes

    def test_normalize_window_zeroes_missing(self):
        x = np.array([[2.0, 0.0], [4.0, 7.0]])
        m = np.array([[1.0, 0.0], [1.0, 1.0]])
        w = Window(x=x * m, m_obs=m, index=0)
        norm = fit_normalizer([w])
        nw = normalize_window(w, norm)
        assert nw.x[0, 1] == 0.0


class TestSynthetic:
    def test_shape_and_full_observation(self):
        ds = make_synthetic(7, 2000, seed=18)
        assert ds.values.shape == (2000, 7)
        assert np.all(ds.native_mask == 1.0)
        assert ds.variable_names == [f"v{i}" for i in range(1, 8)]

    def test_same_seed_identical(self):
        a = make_synthetic(3, 100, seed=19)
        b = make_synthetic(3, 100, seed=19)
        assert np.array_equal(a.values, b.values)

    def test_different_seed_differs(self):
        a = make_synthetic(3, 100, seed=20)
        b = make_synthetic(3, 100, seed=21)
        assert not np.array_equal(a.values, b.values)

    def test_noiseless_is_band_limited(self):
        # two sinusoids with periods in [12, 48]: the power spectrum is
        # concentrated around two frequencies (leakage spreads each peak
        # over a few neighboring bins)
        ds = make_synthetic(1, 960, seed=22, noise_std=0.0)
        power = np.abs(np.fft.rfft(ds.values[:, 0])) ** 2
        top = np.sort(power)[-20:].sum()
        assert top / power.sum() > 0.95

    def test_amplitude_bounded(self):
        # each variable sums two sinusoids with amplitude at most 2.0
        ds = make_synthetic(5, 500, seed=24, noise_std=0.0)
        assert np.max(np.abs(ds.values)) <= 4.0
        assert np.std(ds.values) > 0.1

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            make_synthetic(0, 10, seed=1)
        with pytest.raises(ValueError):
            make_synthetic(1, 0, seed=1)


class TestDatasetInvariants:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.ones((2, 2)), ["a", "b"])

    def test_nonfinite_observed_rejected(self):
        vals = np.array([[1.0, np.nan]])
        with pytest.raises(ValueError):
            Dataset(vals, np.ones((1, 2)), ["a", "b"])

    def test_nonfinite_allowed_when_masked(self):
        vals = np.array([[1.0, np.nan]])
        ds = Dataset(vals, np.array([[1.0, 0.0]]), ["a", "b"])
        assert ds.n_vars == 2


@given(st.floats(min_value=0.05, max_value=0.9), st.integers(min_value=0, max_value=2**32))
@settings(max_examples=25, deadline=None)
def test_point_mask_disjointness_property(rate, seed):
    ds = make_synthetic(3, 60, seed=23)
    w = make_windows(ds, 30, 30)[0]
    tsw = apply_mask(w, MaskSpec(pattern=POINT, rate=rate, seed=seed))
    visible = tsw.m_obs * tsw.m_art
    assert np.all(visible * tsw.eval_mask == 0.0)
    assert np.all(tsw.eval_mask <= tsw.m_obs)
