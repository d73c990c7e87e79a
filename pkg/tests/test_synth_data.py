import math

import numpy as np
import pytest

from eventdistill import synth_data as sd
from eventdistill.errors import DimensionError, FormatError, ParameterError


def solid_frame(color, w=8, h=8, t=0):
    pixels = np.broadcast_to(np.asarray(color, dtype=np.float64), (h, w, 3)).copy()
    return sd.Frame(w, h, pixels, t)


def two_frames(luma0, luma1, w=8, h=8, gap=1000):
    return (solid_frame([luma0] * 3, w, h, 0),
            solid_frame([luma1] * 3, w, h, gap))


class TestRendering:
    def test_no_objects_uniform_background(self):
        scene = sd.Scene(8, 6, (), (0.2, 0.3, 0.4), 1000, 0)
        f = sd.render_frame(scene, 0)
        assert f.pixels.shape == (6, 8, 3)
        assert (f.pixels == np.array([0.2, 0.3, 0.4])).all()

    def test_determinism(self):
        scene = sd.make_scene(64, 64, 5, 2)
        a = sd.render_frame(scene, 3000)
        b = sd.render_frame(scene, 3000)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_velocity_moves_object(self):
        obj = sd.SceneObject("rect", (1.0, 1.0, 1.0), (10.0, 10.0),
                             (1000.0, 0.0), (6.0, 6.0), 1)
        scene = sd.Scene(32, 32, (obj,), (0.0, 0.0, 0.0), 10_000, 0)
        f0 = sd.render_labels(scene, 0)
        f5 = sd.render_labels(scene, 5000)
        # 1000 px/s for 5000 us = 5 px shift
        assert f0.data[10, 10] == 1 and f0.data[10, 16] == 0
        assert f5.data[10, 15] == 1

    def test_out_of_range_time(self):
        scene = sd.make_scene(32, 32, 0, 0)
        with pytest.raises(ParameterError):
            sd.render_frame(scene, scene.duration_us + 1)

    def test_labels_empty_scene(self):
        scene = sd.Scene(4, 4, (), (0, 0, 0), 100, 0)
        assert not sd.render_labels(scene, 0).data.any()

    def test_topmost_id_wins_on_overlap(self):
        a = sd.SceneObject("rect", (1, 0, 0), (8.0, 8.0), (0, 0), (8.0, 8.0), 1)
        b = sd.SceneObject("rect", (0, 1, 0), (8.0, 8.0), (0, 0), (8.0, 8.0), 2)
        scene = sd.Scene(16, 16, (a, b), (0, 0, 0), 100, 0)
        lab = sd.render_labels(scene, 0)
        assert (lab.data[5:12, 5:12] == 2).all()

    def test_disjoint_objects_keep_own_ids(self):
        a = sd.SceneObject("rect", (1, 0, 0), (4.0, 4.0), (0, 0), (4.0, 4.0), 1)
        b = sd.SceneObject("circle", (0, 1, 0), (12.0, 12.0), (0, 0), (2.0, 2.0), 2)
        scene = sd.Scene(16, 16, (a, b), (0, 0, 0), 100, 0)
        lab = sd.render_labels(scene, 0)
        assert lab.data[4, 4] == 1
        assert lab.data[12, 12] == 2

    def test_duplicate_ids_rejected(self):
        a = sd.SceneObject("rect", (1, 0, 0), (4.0, 4.0), (0, 0), (4.0, 4.0), 1)
        with pytest.raises(ParameterError):
            sd.Scene(16, 16, (a, a), (0, 0, 0), 100, 0)


class TestEsim:
    def test_identical_frames_no_events(self):
        f0, f1 = two_frames(0.5, 0.5)
        assert len(sd.esim_events(f0, f1)) == 0

    def test_count_matches_floor_rule(self):
        c = 0.2
        # pick lumas so |dL| = 2.5 * C exactly
        l0 = 0.2
        l1 = math.exp(math.log(l0 + 1e-3) + 2.5 * c) - 1e-3
        f0, f1 = two_frames(l0, l1)
        ev = sd.esim_events(f0, f1, c)
        assert len(ev) == 2 * 64
        assert (ev.p == 1).all()
        # crossing fractions 0.4 and 0.8 of the 1000 us interval
        assert sorted(set(ev.t.tolist())) == [400, 800]

    def test_darkening_gives_negative_polarity(self):
        f0, f1 = two_frames(0.8, 0.1)
        ev = sd.esim_events(f0, f1)
        assert len(ev) > 0
        assert (ev.p == -1).all()

    def test_geometry_mismatch(self):
        f0 = solid_frame([0.5] * 3, w=8)
        f1 = solid_frame([0.9] * 3, w=4, t=1000)
        with pytest.raises(DimensionError):
            sd.esim_events(f0, f1)

    def test_bad_parameters(self):
        f0, f1 = two_frames(0.2, 0.8)
        with pytest.raises(ParameterError):
            sd.esim_events(f0, f1, contrast_c=0.0)
        with pytest.raises(ParameterError):
            sd.esim_events(f1, f0)

    def test_per_pixel_count_oracle(self):
        rng = np.random.default_rng(123)
        c = 0.17
        for _ in range(5):
            h, w = 6, 7
            p0 = rng.random((h, w, 3))
            p1 = rng.random((h, w, 3))
            f0 = sd.Frame(w, h, p0, 0)
            f1 = sd.Frame(w, h, p1, 2000)
            ev = sd.esim_events(f0, f1, c)
            counts = np.zeros((h, w), dtype=int)
            np.add.at(counts, (ev.y, ev.x), 1)
            for y in range(h):
                for x in range(w):
                    dl = math.log(p1[y, x].mean() + 1e-3) - math.log(p0[y, x].mean() + 1e-3)
                    assert counts[y, x] == math.floor(abs(dl) / c)

    def test_doubling_contrast_never_increases_counts(self):
        rng = np.random.default_rng(5)
        p0 = rng.random((5, 5, 3))
        p1 = rng.random((5, 5, 3))
        f0 = sd.Frame(5, 5, p0, 0)
        f1 = sd.Frame(5, 5, p1, 1000)
        assert len(sd.esim_events(f0, f1, 0.4)) <= len(sd.esim_events(f0, f1, 0.2))

    def test_timestamps_strictly_increase_per_pixel(self):
        scene = sd.make_scene(64, 64, 9, 1)
        f0 = sd.render_frame(scene, 0)
        f1 = sd.render_frame(scene, scene.duration_us)
        ev = sd.esim_events(f0, f1)
        t0, t1 = f0.timestamp_us, f1.timestamp_us
        per_pixel = {}
        for x, y, t in zip(ev.x, ev.y, ev.t):
            per_pixel.setdefault((x, y), []).append(t)
        for ts in per_pixel.values():
            assert all(b > a for a, b in zip(ts, ts[1:]))
            assert all(t0 < t <= t1 for t in ts)


class TestDataset:
    def test_zero_scenes_empty_manifest(self, tmp_path):
        manifest = sd.generate_dataset(0, 0, tmp_path / "d")
        assert sd.read_manifest(manifest) == []

    def test_deterministic_per_seed(self, tmp_path):
        sd.generate_dataset(3, 12, tmp_path / "a", resolution=(64, 64))
        sd.generate_dataset(3, 12, tmp_path / "b", resolution=(64, 64))
        files_a = sorted((tmp_path / "a").iterdir())
        files_b = sorted((tmp_path / "b").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_triplets_pass_invariants(self, tmp_path):
        from eventdistill import event_core as ec
        manifest = sd.generate_dataset(4, 3, tmp_path / "d", resolution=(64, 64))
        entries = sd.read_manifest(manifest)
        assert len(entries) == 4
        for e in entries:
            stream = ec.read_evt1(e.events)  # parse re-checks sort/geometry
            assert len(stream) > 0
            vol = ec.voxelize(stream, 3)
            assert vol.data.sum() == pytest.approx(stream.p.sum(), abs=1e-9)
            frame = sd.read_frame(e.frame0)
            assert (frame.width, frame.height) == (64, 64)
            labels = sd.read_labels(e.labels)
            assert set(np.unique(labels.data)) <= {0, 1, 2, 3}

    def test_events_reproducible_from_stored_frames(self, tmp_path):
        from eventdistill import event_core as ec
        manifest = sd.generate_dataset(2, 8, tmp_path / "d", resolution=(64, 64))
        for e in sd.read_manifest(manifest):
            f0 = sd.read_frame(e.frame0, 0)
            f1 = sd.read_frame(e.frame1, sd.DEFAULT_FRAME_GAP_US)
            regen = sd.esim_events(f0, f1)
            assert ec.evt1_bytes(regen) == e.events.read_bytes()


class TestNetpbm:
    def test_ppm_round_trip(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        blob = sd.ppm_bytes(img)
        np.testing.assert_array_equal(sd.parse_ppm(blob), img)
        assert sd.ppm_bytes(sd.parse_ppm(blob)) == blob

    def test_pgm_round_trip(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        blob = sd.pgm_bytes(img)
        np.testing.assert_array_equal(sd.parse_pgm(blob), img)

    def test_comment_in_header(self):
        img = np.zeros((2, 2), dtype=np.uint8)
        blob = sd.pgm_bytes(img)
        with_comment = blob.replace(b"P5\n", b"P5\n# hi\n", 1)
        np.testing.assert_array_equal(sd.parse_pgm(with_comment), img)

    def test_truncated_payload_rejected(self):
        img = np.zeros((4, 4), dtype=np.uint8)
        with pytest.raises(FormatError):
            sd.parse_pgm(sd.pgm_bytes(img)[:-3])

    def test_wrong_magic(self):
        with pytest.raises(FormatError):
            sd.parse_ppm(b"P5\n1 1\n255\n\x00")
