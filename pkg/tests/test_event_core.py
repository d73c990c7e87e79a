import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventdistill import event_core as ec
from eventdistill.errors import DimensionError, FormatError, ParameterError


def stream_from_rows(rows, width=8, height=8):
    rows = list(rows)
    if not rows:
        return ec.EventStream.empty(width, height)
    x, y, p, t = zip(*rows)
    return ec.EventStream.from_arrays(width, height, x, y, p, t)


def random_stream(rng, n, width=16, height=12):
    t = np.sort(rng.integers(0, 100_000, size=n))
    return ec.EventStream.from_arrays(
        width, height,
        rng.integers(0, width, size=n),
        rng.integers(0, height, size=n),
        rng.choice([-1, 1], size=n),
        t,
    )


class TestEventStream:
    def test_rejects_unsorted_timestamps(self):
        with pytest.raises(ParameterError):
            stream_from_rows([(0, 0, 1, 10), (0, 0, 1, 5)])

    def test_rejects_zero_polarity(self):
        with pytest.raises(ParameterError):
            stream_from_rows([(0, 0, 0, 10)])

    def test_rejects_out_of_bounds(self):
        with pytest.raises(DimensionError):
            stream_from_rows([(8, 0, 1, 10)], width=8)

    def test_arrays_are_read_only(self):
        s = stream_from_rows([(1, 2, 1, 3)])
        with pytest.raises(ValueError):
            s.t[0] = 7


class TestSampleWindow:
    def test_empty_stream_any_window(self):
        s = ec.EventStream.empty(4, 4)
        assert len(ec.sample_window(s, 0, duration_us=100)) == 0
        assert len(ec.sample_window(s, 50, count=3)) == 0

    def test_duration_half_open(self):
        s = stream_from_rows([(0, 0, 1, 10), (1, 0, 1, 20), (2, 0, 1, 30)])
        w = ec.sample_window(s, 10, duration_us=15)
        assert w.t.tolist() == [10, 20]

    def test_count_takes_most_recent(self):
        s = stream_from_rows([(0, 0, 1, 10), (1, 0, 1, 20), (2, 0, 1, 30)])
        w = ec.sample_window(s, 30, count=2)
        assert w.t.tolist() == [20, 30]
        assert w.x.tolist() == [1, 2]

    def test_invalid_parameters(self):
        s = stream_from_rows([(0, 0, 1, 10)])
        with pytest.raises(ParameterError):
            ec.sample_window(s, 0, duration_us=0)
        with pytest.raises(ParameterError):
            ec.sample_window(s, 0, count=0)
        with pytest.raises(ParameterError):
            ec.sample_window(s, 0)
        with pytest.raises(ParameterError):
            ec.sample_window(s, 0, duration_us=5, count=5)


class TestVoxelize:
    def test_empty_stream_zero_volume(self):
        v = ec.voxelize(ec.EventStream.empty(4, 3), 3)
        assert v.data.shape == (3, 4, 3)
        assert not v.data.any()

    def test_single_event_degenerate_window(self):
        v = ec.voxelize(stream_from_rows([(2, 3, 1, 500)]), 3)
        assert v.data[3, 2, 0] == 1.0
        assert v.data.sum() == 1.0

    def test_two_events_endpoint_bins(self):
        s = stream_from_rows([(0, 0, 1, 0), (1, 1, 1, 100)])
        v = ec.voxelize(s, 3)
        assert v.data[0, 0, 0] == 1.0
        assert v.data[1, 1, 2] == 1.0
        assert v.data.sum() == 2.0

    def test_fractional_interpolation(self):
        # t* = 2 * 25/100 = 0.5: half in bin 0, half in bin 1
        s = stream_from_rows([(0, 0, 1, 0), (1, 0, 1, 25), (2, 0, 1, 100)])
        v = ec.voxelize(s, 3)
        assert v.data[0, 1, 0] == pytest.approx(0.5)
        assert v.data[0, 1, 1] == pytest.approx(0.5)

    def test_single_bin_collapses_time(self):
        s = stream_from_rows([(0, 0, 1, 0), (1, 0, -1, 77)])
        v = ec.voxelize(s, 1)
        assert v.data[0, 0, 0] == 1.0
        assert v.data[0, 1, 0] == -1.0

    def test_invalid_bins(self):
        with pytest.raises(ParameterError):
            ec.voxelize(ec.EventStream.empty(2, 2), 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 400), st.sampled_from([1, 2, 3, 5]), st.integers(0, 2**31))
    def test_conservation_property(self, n, bins, seed):
        rng = np.random.default_rng(seed)
        s = random_stream(rng, n)
        v = ec.voxelize(s, bins)
        assert v.data.sum() == pytest.approx(s.p.sum(), abs=1e-9)

    def test_equal_timestamp_permutation_invariance(self):
        rows = [(0, 0, 1, 50), (1, 1, -1, 50), (2, 2, 1, 50), (3, 3, 1, 60)]
        a = ec.voxelize(stream_from_rows(rows), 3)
        swapped = [rows[2], rows[1], rows[0], rows[3]]
        b = ec.voxelize(stream_from_rows(swapped), 3)
        np.testing.assert_array_equal(a.data, b.data)

    def test_locality_two_bins_weights_sum_one(self):
        rng = np.random.default_rng(3)
        s = random_stream(rng, 200)
        v = ec.voxelize(s, 5)
        # per-event mass sums to the polarity, so total |mass| <= n and
        # every event touches at most 2 adjacent bins
        t = s.t.astype(float)
        tstar = (5 - 1) * (t - t[0]) / (t[-1] - t[0])
        for ti in tstar:
            lo, hi = int(np.floor(ti)), int(np.ceil(ti))
            assert hi - lo <= 1


class TestDensityMask:
    def test_zero_volume_zero_density(self):
        v = ec.voxelize(ec.EventStream.empty(8, 8), 3)
        d = ec.density_map(v, 4)
        assert not d.data.any()
        assert (d.grid_h, d.grid_w) == (2, 2)

    def test_absolute_value_mixes_polarities(self):
        data = np.zeros((4, 4, 2))
        data[0, 0, 0] = 10.0
        data[1, 1, 1] = -5.0
        d = ec.density_map(ec.EventVolume(4, 4, 2, data), 4)
        assert d.data[0, 0] == 15.0

    def test_fractional_cell(self):
        data = np.zeros((2, 2, 1))
        data[0, 0, 0] = -0.5
        d = ec.density_map(ec.EventVolume(2, 2, 1, data), 2)
        assert d.data[0, 0] == 0.5

    def test_non_divisible_geometry_errors(self):
        v = ec.EventVolume(6, 6, 1, np.zeros((6, 6, 1)))
        with pytest.raises(DimensionError):
            ec.density_map(v, 4)

    def test_evenness_under_negation(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((8, 8, 3))
        a = ec.density_map(ec.EventVolume(8, 8, 3, data), 4)
        b = ec.density_map(ec.EventVolume(8, 8, 3, -data), 4)
        np.testing.assert_array_equal(a.data, b.data)

    def test_threshold_boundary_inclusive(self):
        d = ec.DensityMap(1, 2, 4, np.array([[64.0, 63.999]]))
        m = ec.activation_mask(d, 64.0)
        assert m.data.tolist() == [[True, False]]

    def test_tau_zero_all_active(self):
        d = ec.DensityMap(2, 2, 4, np.zeros((2, 2)))
        assert ec.activation_mask(d, 0.0).data.all()

    def test_negative_tau_rejected(self):
        d = ec.DensityMap(1, 1, 4, np.zeros((1, 1)))
        with pytest.raises(ParameterError):
            ec.activation_mask(d, -1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_mask_monotone_in_tau(self, seed):
        rng = np.random.default_rng(seed)
        d = ec.DensityMap(4, 4, 1, np.abs(rng.standard_normal((4, 4))) * 100)
        m32 = ec.activation_mask(d, 32.0).data
        m64 = ec.activation_mask(d, 64.0).data
        m128 = ec.activation_mask(d, 128.0).data
        assert (m64 <= m32).all() and (m128 <= m64).all()


class TestEvt1:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(7)
        s = random_stream(rng, 257)
        blob = ec.evt1_bytes(s)
        again = ec.parse_evt1(blob)
        assert ec.evt1_bytes(again) == blob
        np.testing.assert_array_equal(again.t, s.t)
        np.testing.assert_array_equal(again.p, s.p)

    def test_record_layout_14_bytes(self):
        s = stream_from_rows([(1, 2, -1, 3)])
        blob = ec.evt1_bytes(s)
        assert len(blob) == 24 + 14
        assert blob[:4] == b"EVT1"

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            ec.parse_evt1(b"NOPE" + bytes(20))

    def test_truncated_payload(self):
        s = stream_from_rows([(1, 2, -1, 3), (2, 2, 1, 4)])
        blob = ec.evt1_bytes(s)
        with pytest.raises(FormatError):
            ec.parse_evt1(blob[:-5])

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        s = random_stream(rng, 64)
        path = tmp_path / "events.evt1"
        ec.write_evt1(s, path)
        assert ec.evt1_bytes(ec.read_evt1(path)) == path.read_bytes()


class TestEventsCsv:
    def test_round_trip(self, tmp_path):
        s = stream_from_rows([(0, 1, 1, 5), (2, 3, -1, 9)])
        path = tmp_path / "events.csv"
        ec.write_events_csv(s, path)
        again = ec.read_events_csv(path, 8, 8)
        np.testing.assert_array_equal(again.x, s.x)
        np.testing.assert_array_equal(again.p, s.p)

    def test_header_required(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("1,2,1,5\n")
        with pytest.raises(FormatError):
            ec.read_events_csv(path, 8, 8)

    def test_zero_polarity_rejected(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("x,y,p,t\n1,2,0,5\n")
        with pytest.raises(FormatError):
            ec.read_events_csv(path, 8, 8)
