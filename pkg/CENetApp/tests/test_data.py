import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from CENetApp.augment import (
    D4,
    IDENTITY,
    flip_expand_8x,
    hsv_rgb,
    iter_augmented,
    jitter_hsv,
    random_augment,
    rgb_hsv,
    sample_rng,
)
from CENetApp.config import AugmentConfig
from CENetApp.data import (
    brightest_point,
    crop_brightest,
    load_dataset,
    parse_netpbm,
    read_image,
    read_mask,
    write_pgm,
)
from CENetApp.exceptions import DataError, ParseError
from CENetApp.state import Sample
from CENetApp.synthetic import make_synthetic, synthetic_sample
from CENetApp.tta import tta_predict

STILL = AugmentConfig(scale_range=(1.0, 1.0), hue_delta=0.0, sat_delta=0.0, val_delta=0.0, shift_fraction=0.0)


def sample(h: int, w: int, seed: int = 0) -> Sample:
    rng = np.random.default_rng(seed)
    return Sample(id="s", image=rng.uniform(size=(3, h, w)).astype(np.float32),
                  mask=(rng.uniform(size=(h, w)) > 0.5).astype(np.uint8))


class NetpbmTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_three_pixel_ppm(self):
        path = self.dir / "a.ppm"
        path.write_bytes(b"P6\n3 1\n255\n" + bytes([0, 51, 102, 153, 204, 255, 1, 2, 3]))
        image = read_image(path)
        self.assertEqual(image.shape, (3, 1, 3))
        self.assertEqual(image.dtype, np.float32)
        expected = np.array([[0, 153, 1], [51, 204, 2], [102, 255, 3]], dtype=np.float32)[:, None, :] / np.float32(255)
        assert_array_equal(image, expected)

    def test_header_comments(self):
        raw = parse_netpbm(b"P5 # gray\n2 # width\n2\n255\n" + bytes([1, 2, 3, 4]))
        assert_array_equal(raw, [[1, 2], [3, 4]])

    def test_gray_image_is_replicated(self):
        path = self.dir / "g.pgm"
        write_pgm(path, np.array([[10, 20]], dtype=np.uint8))
        image = read_image(path)
        assert_array_equal(image[0], image[2])

    def test_parse_error_reports_offset(self):
        with self.assertRaises(ParseError) as cm:
            parse_netpbm(b"P6\n3 x\n255\n", "bad.ppm")
        self.assertEqual(cm.exception.offset, 5)
        self.assertIn("bad.ppm", str(cm.exception))

    def test_rejected_headers(self):
        for data in (b"P3\n1 1\n255\n0 0 0", b"P5\n1 1\n65535\n\x00\x00", b"P6\n2 2\n255\n\x00\x01"):
            with self.subTest(data=data[:2]):
                with self.assertRaises(ParseError):
                    parse_netpbm(data)

    def test_png_image_and_mask(self):
        Image.fromarray(np.full((4, 5, 3), 255, dtype=np.uint8)).save(self.dir / "i.png")
        Image.fromarray(np.eye(4, 5, dtype=np.uint8)).save(self.dir / "m.png")
        assert_array_equal(read_image(self.dir / "i.png"), np.ones((3, 4, 5)))
        assert_array_equal(read_mask(self.dir / "m.png"), np.eye(4, 5))


class DatasetTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_empty_directory_warns(self):
        (self.root / "images").mkdir()
        (self.root / "masks").mkdir()
        with self.assertLogs("CENetApp.data", level="WARNING"):
            self.assertEqual(load_dataset(self.root), [])

    def test_missing_directory(self):
        with self.assertRaises(DataError):
            load_dataset(self.root / "nowhere")

    def test_synthetic_round_trip_in_stem_order(self):
        written = make_synthetic(self.root, count=3, size=32, seed=4)
        loaded = load_dataset(self.root)
        self.assertEqual([s["id"] for s in loaded], ["sample_000", "sample_001", "sample_002"])
        for a, b in zip(written, loaded):
            assert_allclose(a["image"], b["image"], atol=1e-6)
            assert_array_equal(a["mask"], b["mask"])

    def test_unmatched_stem(self):
        make_synthetic(self.root, count=2, size=32)
        (self.root / "masks" / "sample_001.pgm").unlink()
        with self.assertRaises(DataError) as cm:
            load_dataset(self.root)
        self.assertIn("sample_001", str(cm.exception))

    def test_size_mismatch_names_the_stem(self):
        make_synthetic(self.root, count=1, size=32)
        write_pgm(self.root / "masks" / "sample_000.pgm", np.zeros((16, 32), dtype=np.uint8))
        with self.assertRaises(DataError) as cm:
            load_dataset(self.root)
        self.assertIn("sample_000", str(cm.exception))


class SyntheticTests(SimpleTestCase):
    def test_seeded_and_nonempty(self):
        a, b = synthetic_sample(2, 64, seed=1), synthetic_sample(2, 64, seed=1)
        assert_array_equal(a["image"], b["image"])
        assert_array_equal(a["mask"], b["mask"])
        self.assertEqual(set(np.unique(a["mask"]).tolist()), {0, 1})
        self.assertFalse(np.array_equal(a["mask"], synthetic_sample(2, 64, seed=2)["mask"]))

    def test_multiscale_discs(self):
        s = synthetic_sample(0, 64, seed=0, multiscale=True)
        area = int(s["mask"].sum())
        self.assertGreater(area, 0)
        self.assertLessEqual(area, 3 * np.pi * 20 ** 2 + 1)


class CropTests(SimpleTestCase):
    def _blob(self, h, w, cy, cx):
        yy, xx = np.mgrid[0:h, 0:w]
        glow = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 50.0)
        return Sample(id="b", image=np.repeat(glow[None], 3, axis=0), mask=(glow > 0.5).astype(np.uint8))

    def test_brightest_point(self):
        self.assertEqual(brightest_point(self._blob(100, 120, 30, 40)["image"], window=11), (30, 40))

    def test_crop_is_centred_and_clipped(self):
        cropped = crop_brightest(self._blob(100, 120, 30, 40), size=40, window=11)
        self.assertEqual(cropped["image"].shape, (3, 40, 40))
        self.assertEqual(brightest_point(cropped["image"], window=11), (20, 20))
        blob = self._blob(100, 120, 3, 4)
        edge = crop_brightest(blob, size=40, window=11)
        assert_array_equal(edge["image"], blob["image"][:, :40, :40])
        assert_array_equal(edge["mask"], blob["mask"][:40, :40])

    def test_small_images_keep_whole_axes(self):
        cropped = crop_brightest(self._blob(30, 200, 10, 100), size=50, window=11)
        self.assertEqual(cropped["image"].shape, (3, 30, 50))
        self.assertEqual(cropped["mask"].shape, (30, 50))


class DihedralTests(SimpleTestCase):
    def test_constant_image_has_eight_identical_flips(self):
        out = flip_expand_8x(Sample(id="c", image=np.full((3, 4, 4), 0.3), mask=np.ones((4, 4), dtype=np.uint8)))
        self.assertEqual(len(out), 8)
        for s in out:
            assert_array_equal(s["image"], out[0]["image"])

    def test_marker_has_eight_distinct_flips(self):
        marker = np.array([[1.0, 2.0], [3.0, 4.0]])
        images = {g.apply(marker).tobytes() for g in D4}
        self.assertEqual(len(images), 8)

    def test_group_structure(self):
        x = np.random.default_rng(0).normal(size=(5, 5))
        self.assertIs(D4[0], IDENTITY)
        for g in D4:
            assert_array_equal(g.inverse().apply(g.apply(x)), x)
            for h in D4:
                assert_array_equal(g.compose(h).apply(x), g.apply(h.apply(x)))
        for g in D4:
            if not g.transpose or (g.flip_v == g.flip_h):
                self.assertIs(g.compose(g), IDENTITY)

    def test_mask_follows_image(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, :3] = 1
        out = flip_expand_8x(Sample(id="m", image=np.repeat(mask[None].astype(np.float64), 3, 0), mask=mask))
        self.assertEqual([s["id"] for s in out][:2], ["m#d4-0", "m#d4-1"])
        for s in out:
            assert_array_equal(s["image"][0], s["mask"])

    def test_non_square_is_padded_first(self):
        out = flip_expand_8x(sample(3, 5))
        for s in out:
            self.assertEqual(s["image"].shape, (3, 5, 5))
        self.assertTrue((out[0]["mask"][3:] == 255).all())


class HsvTests(SimpleTestCase):
    def test_pure_red(self):
        assert_allclose(rgb_hsv(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)).ravel(), [0.0, 1.0, 1.0])

    def test_gray(self):
        h, s, v = rgb_hsv(np.full((3, 2, 2), 0.4))
        assert_array_equal(s, 0.0)
        assert_allclose(v, 0.4)

    def test_round_trip(self):
        image = np.random.default_rng(0).uniform(size=(3, 16, 16))
        assert_allclose(hsv_rgb(rgb_hsv(image)), image, atol=1e-5)

    def test_zero_jitter_is_a_no_op(self):
        image = np.random.default_rng(1).uniform(size=(3, 4, 4)).astype(np.float32)
        self.assertIs(jitter_hsv(image, 0.0, 0.0, 0.0), image)


def bilinear_oracle(image, size, crop):
    """Resample each axis to `size` by the half-pixel rule, then take the centred `crop`."""
    n = image.shape[-1]
    weights = np.zeros((size, n))
    for i in range(size):
        src = max((i + 0.5) * n / size - 0.5, 0.0)
        lo = min(int(np.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        weights[i, lo] += 1.0 - (src - lo)
        weights[i, hi] += src - lo
    start = (size - crop) // 2
    weights = weights[start:start + crop]
    return np.einsum("ij,cjk,lk->cil", weights, image.astype(np.float64), weights)


class RandomAugmentTests(SimpleTestCase):
    def test_zero_ranges_are_the_identity(self):
        s = sample(64, 64)
        out = random_augment(s, STILL, sample_rng(0, 0, 0))
        assert_array_equal(out["image"], s["image"])
        assert_array_equal(out["mask"], s["mask"])

    def test_output_is_padded_to_32(self):
        out = random_augment(sample(40, 70), AugmentConfig(), sample_rng(0, 0, 0))
        self.assertEqual(out["image"].shape, (3, 64, 96))
        self.assertTrue((out["mask"][40:] == 255).all())

    def test_same_stream_same_output(self):
        s = sample(64, 64)
        a = random_augment(s, AugmentConfig(), sample_rng(9, 2, 5))
        b = random_augment(s, AugmentConfig(), sample_rng(9, 2, 5))
        assert_array_equal(a["image"], b["image"])
        assert_array_equal(a["mask"], b["mask"])

    def test_scale_up_matches_resample_and_crop(self):
        s = sample(100, 100)
        cfg = STILL.model_copy(update={"scale_range": (1.10, 1.10)})
        out = random_augment(s, cfg, sample_rng(0, 0, 0))
        self.assertEqual(out["image"].shape, (3, 128, 128))
        assert_allclose(out["image"][:, :100, :100], bilinear_oracle(s["image"], 110, 100), atol=1e-5)
        assert_array_equal(out["image"][:, 100:], 0.0)

    def test_mask_keeps_its_label_set(self):
        s = sample(64, 64)
        for i in range(5):
            out = random_augment(s, AugmentConfig(), sample_rng(1, 0, i))
            self.assertTrue(set(np.unique(out["mask"]).tolist()) <= {0, 1, 255})

    def test_shift_moves_image_and_mask_together(self):
        mask = (np.random.default_rng(3).uniform(size=(64, 64)) > 0.5).astype(np.uint8)
        s = Sample(id="g", image=np.repeat(mask[None].astype(np.float32), 3, 0), mask=mask)
        cfg = STILL.model_copy(update={"shift_fraction": 0.2})
        for i in range(5):
            out = random_augment(s, cfg, sample_rng(0, 0, i))
            kept = out["mask"] != 255
            assert_array_equal(out["image"][0][kept], out["mask"][kept])
            assert_array_equal(out["image"][0][~kept], 0.0)

    def test_scale_and_shift_move_a_coordinate_grid_consistently(self):
        # row/column index + 1 in both image and mask, so content never reads as fill
        rows, cols = np.mgrid[1:65, 1:65]
        for scale in (0.9, 1.1):
            cfg = STILL.model_copy(update={"scale_range": (scale, scale), "shift_fraction": 0.2})
            for grid in (rows, cols):
                image = np.repeat(grid[None].astype(np.float32), 3, 0)
                s = Sample(id="grid", image=image, mask=grid.astype(np.uint8))
                for i in range(4):
                    with self.subTest(scale=scale, draw=i):
                        out = random_augment(s, cfg, sample_rng(0, 0, i))
                        kept = out["mask"] != 255
                        self.assertTrue(kept.any())
                        assert_array_equal(out["image"][:, ~kept], 0.0)
                        # bilinear and nearest sampling of the same point differ by at most half a pixel
                        assert_allclose(out["image"][0][kept], out["mask"][kept], atol=0.5 + 1e-4)

    def test_stream_does_not_depend_on_order(self):
        samples = [sample(32, 32, seed=i) for i in range(4)]
        full = list(iter_augmented(samples, AugmentConfig(), seed=5, epoch=1))
        alone = next(iter_augmented(samples, AugmentConfig(), seed=5, epoch=1, order=[3]))
        assert_array_equal(full[3]["image"], alone["image"])


class TtaTests(SimpleTestCase):
    def _predictor(self, image):
        h, w = image.shape[-2:]
        ramp = np.arange(h * w, dtype=np.float64).reshape(h, w) / (h * w)
        return (np.tanh(image[:1] * ramp) + 0.1 * np.roll(image[1:2], 1, axis=-1)) / 2.0

    def test_constant_model(self):
        out = tta_predict(lambda x: np.full((1,) + x.shape[1:], 0.25), np.zeros((3, 8, 8)))
        assert_allclose(out, 0.25)

    def test_equivariance(self):
        image = np.random.default_rng(0).uniform(size=(3, 8, 8))
        base = tta_predict(self._predictor, image)
        for g in D4:
            assert_allclose(tta_predict(self._predictor, g.apply(image)), g.apply(base), atol=1e-5)

    def test_averaging_reduces_variance(self):
        field = np.random.default_rng(1).normal(size=(1, 32, 32))
        averaged = tta_predict(lambda x: field, np.zeros((3, 32, 32)))
        self.assertLess(averaged.var(), field.var())

    def test_identity_only_group(self):
        image = np.random.default_rng(2).uniform(size=(3, 4, 4))
        assert_allclose(tta_predict(self._predictor, image, group=[IDENTITY]), self._predictor(image))
