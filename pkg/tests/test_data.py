import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelgen import data
from pixelgen.errors import ConfigError, PixelGenError
from pixelgen.metrics import pooled_features
from pixelgen.perception import GlobalFeatureNet


@pytest.fixture(scope="module")
def centroid_accuracy():
    net = GlobalFeatureNet(seed=7)
    x_train, y_train = data.gen_batch(0, range(512))
    x_test, y_test = data.gen_batch(0, range(1 << 20, (1 << 20) + 256))
    f_train, f_test = pooled_features(net, x_train), pooled_features(net, x_test)
    centroids = np.stack([f_train[y_train == c].mean(0) for c in range(8)])
    pred = np.argmin(((f_test[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    return np.mean(pred == y_test), np.mean(pred % 2 == y_test % 2)


class TestGenSample:
    def test_deterministic(self):
        a, la = data.gen_sample(0, 17)
        b, lb = data.gen_sample(0, 17)
        assert a.tobytes() == b.tobytes() and la == lb

    def test_seed_changes_image(self):
        assert not np.array_equal(data.gen_sample(0, 3)[0], data.gen_sample(1, 3)[0])

    def test_modular_labels(self):
        a, la = data.gen_sample(0, 0)
        b, lb = data.gen_sample(0, 8)
        assert la == lb == 0
        assert not np.array_equal(a, b)

    def test_warm_circle_is_red(self):
        for index in range(0, 80, 8):  # class 0: warm circle
            img, label = data.gen_sample(0, index)
            assert data.class_spec(label) == ("circle", "warm")
            assert img[0].mean() > img[2].mean()

    def test_cool_classes_are_blue(self):
        img, label = data.gen_sample(0, 1)
        assert data.class_spec(label)[1] == "cool"
        assert img[2].mean() > img[0].mean()

    @given(st.integers(0, 3), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_range_and_shape(self, seed, index):
        img, label = data.gen_sample(seed, index)
        assert img.shape == (3, 16, 16) and img.dtype == np.float32
        assert img.min() >= -1 and img.max() <= 1
        assert label == index % 8

    def test_antialiased_edges(self):
        img, _ = data.gen_sample(0, 0)
        # partial coverage produces intermediate values beyond the two flat levels
        assert len(np.unique(np.round(img[0], 3))) > 10

    def test_cache_returns_copies(self):
        a, _ = data.gen_sample(0, 5)
        a[:] = 0
        assert not np.all(data.gen_sample(0, 5)[0] == 0)


class TestBatches:
    def test_deterministic_sequence(self):
        it1, it2 = data.batch_iter(0, 8, seed=3), data.batch_iter(0, 8, seed=3)
        for _ in range(3):
            s1, x1, y1 = next(it1)
            s2, x2, y2 = next(it2)
            assert s1 == s2 and x1.tobytes() == x2.tobytes() and np.array_equal(y1, y2)

    def test_start_step_resumes(self):
        it = data.batch_iter(0, 4, seed=1)
        next(it)
        _, x_next, _ = next(it)
        _, x_resumed, _ = next(data.batch_iter(0, 4, seed=1, start_step=1))
        assert x_next.tobytes() == x_resumed.tobytes()

    def test_covers_all_classes(self):
        labels = np.concatenate([data.batch_indices(0, s, 100, 4096) % 8 for s in range(100)])
        assert set(labels) == set(range(8))

    def test_range(self):
        _, x, _ = next(data.batch_iter(0, 64, seed=0))
        assert x.min() >= -1 and x.max() <= 1

    def test_indices_within_epoch(self):
        idx = data.batch_indices(0, 0, 1000, 50)
        assert idx.min() >= 0 and idx.max() < 50

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            next(data.batch_iter(0, 0, seed=0))

    def test_threads_do_not_change_batches(self):
        a = data.gen_batch(0, range(16), threads=1)
        b = data.gen_batch(0, range(16), threads=4)
        assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])

    def test_classes_well_above_chance(self, centroid_accuracy):
        acc, tone_acc = centroid_accuracy
        assert acc >= 2 * (1 / 8)
        assert tone_acc >= 0.95

    @pytest.mark.xfail(reason="random frozen features separate tone but not shape under radius jitter; "
                              "measured ~0.33-0.42", strict=False)
    def test_classes_separable_at_half(self, centroid_accuracy):
        assert centroid_accuracy[0] >= 0.5


class TestImages:
    def test_byte_endpoints(self):
        np.testing.assert_array_equal(data.to_bytes(np.array([-1.0, 1.0, 0.0])), [0, 255, 128])

    def test_round_half_even(self):
        # both inputs scale to an exact .5 and go to the even neighbour
        assert data.to_bytes(np.array([63.5 / 127.5 - 1]))[0] == 64
        assert data.to_bytes(np.array([64.5 / 127.5 - 1]))[0] == 64

    def test_clips_out_of_range(self):
        np.testing.assert_array_equal(data.to_bytes(np.array([-3.0, 7.0])), [0, 255])

    def test_grid_layout(self):
        imgs = np.ones((4, 3, 16, 16))
        canvas = data.make_grid(imgs, columns=2)
        assert canvas.shape == (2 + 2 * 18, 2 + 2 * 18, 3)
        assert np.all(canvas[:2] == 0) and np.all(canvas[:, 18:20] == 0)
        assert np.all(canvas[2:18, 2:18] == 255)
        assert (canvas == 255).sum() == 4 * 16 * 16 * 3

    def test_partial_last_row(self):
        canvas = data.make_grid(np.ones((3, 3, 4, 4)), columns=2)
        assert canvas.shape == (2 + 2 * 6, 2 + 2 * 6, 3)
        assert np.all(canvas[8:12, 8:12] == 0)

    def test_ppm_round_trip(self, tmp_path):
        imgs = np.stack([data.gen_sample(0, i)[0] for i in range(6)])
        path = data.write_image_grid(imgs, tmp_path / "g.ppm", columns=3)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n56 38\n255\n")
        np.testing.assert_array_equal(data.read_ppm(path), data.make_grid(imgs, 3))

    def test_png_is_valid(self, tmp_path):
        canvas = data.make_grid(np.zeros((2, 3, 4, 4)), 2)
        data.write_image_grid(np.zeros((2, 3, 4, 4)), tmp_path / "g.ppm", columns=2, png=True)
        raw = (tmp_path / "g.png").read_bytes()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        width, height, depth, color = struct.unpack(">IIBB", raw[16:26])
        assert (width, height, depth, color) == (canvas.shape[1], canvas.shape[0], 8, 2)
        # decode the single IDAT chunk and compare with the canvas
        length = struct.unpack(">I", raw[33:37])[0]
        assert raw[37:41] == b"IDAT"
        rows = zlib.decompress(raw[41 : 41 + length])
        stride = 1 + 3 * width
        pixels = b"".join(rows[r * stride + 1 : (r + 1) * stride] for r in range(height))
        assert pixels == canvas.tobytes()

    def test_unwritable_path_names_it(self, tmp_path):
        with pytest.raises(PixelGenError, match="nope"):
            data.write_image_grid(np.zeros((1, 3, 4, 4)), tmp_path / "nope" / "g.ppm")
