import numpy as np
import pytest

from fdnet.data import (
    BASE_COLORS,
    IGNORE_LABEL,
    NetpbmError,
    Sample,
    SyntheticSpec,
    channel_means,
    disk_mask,
    generate_sample,
    generate_shapes_dataset,
    hflip,
    pad_labels,
    pad_to_mean,
    random_crop_flip,
    read_dataset,
    read_netpbm,
    rect_mask,
    sample_seed,
    triangle_mask,
    write_dataset,
    write_netpbm,
)
from fdnet.network import ConfigError
from fdnet.train import compute_metrics


class TestNetpbm:
    def test_image_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 16, 16)) / 255.0
        path = tmp_path / "a.ppm"
        write_netpbm(img, str(path))
        back = read_netpbm(str(path))
        assert back.tobytes() == img.tobytes()

    def test_label_round_trip(self, tmp_path):
        lab = np.random.default_rng(1).integers(0, 4, (7, 9))
        lab[0, 0] = 255
        path = tmp_path / "a.pgm"
        write_netpbm(lab, str(path))
        assert np.array_equal(read_netpbm(str(path)), lab)

    def test_white_pixel(self, tmp_path):
        path = tmp_path / "w.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        assert np.array_equal(read_netpbm(str(path)), np.ones((3, 1, 1)))

    def test_header_comment(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        assert read_netpbm(str(path)).tolist() == [[1, 2]]

    def test_maxval(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(NetpbmError, match="unsupported maxval"):
            read_netpbm(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(NetpbmError, match="truncated"):
            read_netpbm(str(path))

    @pytest.mark.parametrize("raw", [b"P3\n1 1\n255\n0 0 0", b"P5\n1\n", b"P5\nx 1\n255\n\x00"])
    def test_malformed(self, tmp_path, raw):
        path = tmp_path / "bad.pgm"
        path.write_bytes(raw)
        with pytest.raises(NetpbmError, match="malformed"):
            read_netpbm(str(path))


class TestMasks:
    @pytest.mark.parametrize("cy,cx,r", [(10.0, 10.0, 5.0), (3.3, 17.8, 7.2), (0.0, 0.0, 4.0)])
    def test_disk_area_matches_lattice_count(self, cy, cx, r):
        # count integer points inside the circle one by one
        count = 0
        for y in range(24):
            for x in range(24):
                if (y - cy) ** 2 + (x - cx) ** 2 <= r * r:
                    count += 1
        assert disk_mask(24, 24, cy, cx, r).sum() == count

    def test_rect(self):
        assert rect_mask(10, 10, 2, 3, 5, 9).sum() == 3 * 6
        assert rect_mask(10, 10, -4, -4, 2, 2).sum() == 4

    def test_triangle_area(self):
        pts = np.array([[0.0, 0.0], [0.0, 20.0], [20.0, 0.0]])
        m = triangle_mask(32, 32, pts)
        # right triangle with legs 20: pixel centres with y, x >= 0 and y + x <= 20
        assert m.sum() == sum(21 - y for y in range(21))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(seed=7, count=6)
        a, b = generate_shapes_dataset(spec), generate_shapes_dataset(spec)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()

    def test_seed_changes_data(self):
        a = generate_sample(SyntheticSpec(seed=1), 0)
        b = generate_sample(SyntheticSpec(seed=2), 0)
        assert a.image.tobytes() != b.image.tobytes()

    def test_sample_seed_independent_of_count(self):
        small = generate_shapes_dataset(SyntheticSpec(seed=3, count=2))
        big = generate_shapes_dataset(SyntheticSpec(seed=3, count=5))
        assert small[1].labels.tobytes() == big[1].labels.tobytes()
        assert sample_seed(3, 1) != sample_seed(3, 2)

    def test_single_disk_label_mass(self):
        spec = SyntheticSpec(seed=5, count=1, shapes_per_image=(1, 1), noise=0.0)
        s = generate_sample(spec, 0)
        # replay the generator's draws and rasterize the disk directly
        rng = np.random.default_rng(sample_seed(5, 0))
        rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        rng.integers(1, 2)
        r = rng.uniform(*spec.size_range)
        cy, cx = rng.uniform(r * 0.5, spec.size - r * 0.5, size=2)
        yy, xx = np.mgrid[: spec.size, : spec.size]
        expected = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).sum()
        assert (s.labels == 1).sum() == expected
        assert set(np.unique(s.labels)) == {0, 1}

    def test_class_coverage(self):
        samples = generate_shapes_dataset(SyntheticSpec(seed=0, count=64))
        hist = np.bincount(np.concatenate([s.labels.ravel() for s in samples]), minlength=4)
        assert np.all(hist > 0)

    def test_every_class_with_few_samples(self):
        samples = generate_shapes_dataset(SyntheticSpec(seed=0, count=3))
        present = set().union(*(np.unique(s.labels) for s in samples))
        assert present == {0, 1, 2, 3}

    def test_labels_match_pixels_without_noise(self):
        spec = SyntheticSpec(seed=2, count=4, noise=0.0, color_jitter=0.0)
        for s in generate_shapes_dataset(spec):
            for cls in np.unique(s.labels):
                colors = s.image[:, s.labels == cls]
                expected = np.rint(BASE_COLORS[cls] * 255) / 255
                assert np.allclose(colors, expected[:, None])

    def test_image_range(self):
        s = generate_sample(SyntheticSpec(), 3)
        assert s.image.min() >= 0 and s.image.max() <= 1 and s.image.shape == (3, 64, 64)

    @pytest.mark.parametrize(
        "kwargs,field",
        [({"size": 16}, "data.size"), ({"num_classes": 9}, "data.num_classes"), ({"size_range": (1, 3)}, "data.size_range")],
    )
    def test_validation(self, kwargs, field):
        with pytest.raises(ConfigError) as err:
            SyntheticSpec(**kwargs).validate()
        assert err.value.field == field

    def test_write_read(self, tmp_path):
        samples = generate_shapes_dataset(SyntheticSpec(seed=4, count=3))
        manifest = write_dataset(samples, str(tmp_path), 4)
        assert (tmp_path / "images" / "0002.ppm").exists() and (tmp_path / "labels" / "0000.pgm").exists()
        back, meta = read_dataset(str(tmp_path))
        assert meta["channel_means"] == manifest["channel_means"] == channel_means(samples)
        for a, b in zip(samples, back):
            assert a.image.tobytes() == b.image.tobytes() and np.array_equal(a.labels, b.labels) and a.ident == b.ident


def coord_sample(h=8, w=10):
    """Image and labels both encode the pixel's source coordinates."""
    yy, xx = np.mgrid[:h, :w]
    image = np.stack([yy / 255.0, xx / 255.0, np.zeros((h, w))])
    return Sample(image, yy * w + xx, "c")


class TestAugment:
    def test_identity_crop(self):
        s = coord_sample(8, 8)
        out = random_crop_flip(s, 8, np.random.default_rng(0), flip=False)
        assert np.array_equal(out.image, s.image) and np.array_equal(out.labels, s.labels)

    def test_flip_involution(self):
        s = coord_sample()
        back = hflip(hflip(s))
        assert np.array_equal(back.image, s.image) and np.array_equal(back.labels, s.labels)

    def test_reproducible(self):
        s = coord_sample(20, 20)
        a = random_crop_flip(s, 8, np.random.default_rng(3))
        b = random_crop_flip(s, 8, np.random.default_rng(3))
        assert np.array_equal(a.labels, b.labels)

    def test_geometry_shared(self):
        s = coord_sample(20, 24)
        rng = np.random.default_rng(1)
        for _ in range(20):
            out = random_crop_flip(s, 8, rng)
            ys = np.rint(out.image[0] * 255).astype(int)
            xs = np.rint(out.image[1] * 255).astype(int)
            assert np.array_equal(out.labels, ys * 24 + xs)

    def test_flip_probability(self):
        s = coord_sample(4, 4)
        rng = np.random.default_rng(0)
        flips = sum(random_crop_flip(s, 4, rng).labels[0, 0] != 0 for _ in range(400))
        assert 150 < flips < 250

    def test_small_image_padded(self):
        s = coord_sample(4, 6)
        out = random_crop_flip(s, 8, np.random.default_rng(0), means=[0.5, 0.5, 0.5], flip=False)
        assert out.image.shape == (3, 8, 8)
        assert np.array_equal(out.labels[:4, :6], s.labels)
        assert np.all(out.labels[4:] == IGNORE_LABEL) and np.all(out.image[:, 4:] == 0.5)


class TestPad:
    def test_identity(self):
        img = np.random.default_rng(0).random((3, 4, 4))
        assert pad_to_mean(img, 4, 4, [0, 0, 0]) is img

    def test_counts(self):
        img = np.zeros((3, 2, 2))
        out = pad_to_mean(img, 4, 4, [0.5, 0.5, 0.5])
        assert (out[0] == 0.5).sum() == 12 and np.all(out[:, :2, :2] == 0)

    def test_shrink(self):
        with pytest.raises(ValueError, match="shrink"):
            pad_to_mean(np.zeros((3, 4, 4)), 2, 4, [0, 0, 0])

    def test_labels(self):
        out = pad_labels(np.zeros((2, 3), int), 3, 3)
        assert (out == IGNORE_LABEL).sum() == 3

    def test_metrics_after_unpad(self):
        rng = np.random.default_rng(2)
        gt = rng.integers(0, 3, (5, 7))
        pred = rng.integers(0, 3, (5, 7))
        padded_pred = np.zeros((8, 8), int)
        padded_pred[:5, :7] = pred
        padded_gt = pad_labels(gt, 8, 8)
        a = compute_metrics(pred[None], gt[None], 3)
        b = compute_metrics(padded_pred[None, :5, :7], padded_gt[None, :5, :7], 3)
        c = compute_metrics(padded_pred[None], padded_gt[None], 3)
        assert a == b and a.miou == c.miou
