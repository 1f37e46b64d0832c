import numpy as np
import pytest

from wdcodec import imgsig
from wdcodec.imgsig import (
    ImageIOError,
    PixelImage,
    Plane,
    Tensor,
    bilinear_resize,
    conv2d,
    downsample2x,
    gaussian_field,
    read_image,
    write_image,
)

from oracles import bilinear_grid, conv2d_loops, downsample2x_scipy


class TestPlaneTypes:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            Plane(np.zeros((0, 4)))
        with pytest.raises(ValueError):
            Plane(np.array([[np.nan, 1.0]]))
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 3)))

    def test_pixel_image_range(self):
        PixelImage(np.zeros((3, 2, 2)))
        with pytest.raises(ValueError):
            PixelImage(np.zeros((4, 2, 2)))
        with pytest.raises(ValueError):
            PixelImage(np.full((3, 2, 2), 1.5))

    def test_immutable(self):
        p = Plane(np.ones((2, 2)))
        with pytest.raises(ValueError):
            p.data[0, 0] = 2.0


class TestDownsample2x:
    def test_constant_preserved_exactly(self):
        for shape in [(4, 4), (5, 7), (1, 1), (2, 3)]:
            p = Plane(np.full(shape, 0.7125))
            out = downsample2x(p)
            assert out.shape == (-(-shape[0] // 2), -(-shape[1] // 2))
            assert np.all(out.data == 0.7125)

    def test_kernel_sums_to_one(self):
        assert abs(sum(imgsig.BINOMIAL_TAPS) - 1.0) < 1e-12

    def test_single_impulse_matches_dense_oracle(self):
        x = np.zeros((4, 4))
        x[1, 1] = 1.0
        out = downsample2x(Plane(x)).data
        ref = downsample2x_scipy(x)
        np.testing.assert_allclose(out, ref, atol=1e-15)
        # taps overlapping site (1,1); mirror boundary folds weight back at the edge
        np.testing.assert_allclose(out, [[0.25, 0.125], [0.125, 0.0625]], atol=1e-15)

    def test_odd_dims_ceil(self):
        out = downsample2x(Plane(np.random.default_rng(0).normal(size=(5, 7))))
        assert out.shape == (3, 4)

    def test_matches_scipy_oracle_random(self):
        rng = np.random.default_rng(7)
        for shape in [(8, 8), (5, 9), (2, 2), (3, 1), (1, 6), (16, 11)]:
            x = rng.normal(size=shape)
            np.testing.assert_allclose(
                downsample2x(Plane(x)).data, downsample2x_scipy(x), rtol=1e-12, atol=1e-12
            )


class TestBilinearResize:
    def test_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 5))
        out = bilinear_resize(Plane(x), 6, 5)
        assert np.array_equal(out.data, x)

    def test_constant_any_size(self):
        p = Plane(np.full((3, 4), 0.3713))
        for h2, w2 in [(1, 1), (7, 9), (3, 4), (12, 2)]:
            assert np.all(bilinear_resize(p, h2, w2).data == 0.3713)

    def test_2x2_to_2x4_against_scalar_oracle(self):
        x = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = bilinear_resize(Plane(x), 2, 4).data
        ref = bilinear_grid(x, 2, 4)
        np.testing.assert_allclose(out, ref, atol=1e-15)
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-15)

    def test_random_against_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for src, dst in [((4, 4), (9, 3)), ((5, 7), (2, 13)), ((1, 4), (3, 8)), ((6, 1), (2, 2))]:
            x = rng.normal(size=src)
            np.testing.assert_allclose(
                bilinear_resize(Plane(x), *dst).data, bilinear_grid(x, *dst), rtol=1e-12, atol=1e-12
            )

    def test_round_trip_constant_exact(self):
        p = Plane(np.full((8, 8), 1.0 / 3.0))
        up = bilinear_resize(p, 19, 13)
        back = bilinear_resize(up, 8, 8)
        assert np.array_equal(back.data, p.data)

    def test_round_trip_ramp_interior(self):
        # up/down round trip reproduces linear ramps away from the clamped border
        x = np.tile(np.linspace(0.0, 1.0, 16), (16, 1))
        back = bilinear_resize(bilinear_resize(Plane(x), 32, 32), 16, 16).data
        np.testing.assert_allclose(back[2:-2, 2:-2], x[2:-2, 2:-2], atol=1e-6)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(5)
        t = Tensor(rng.normal(size=(2, 5, 5)))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = 1.0
        k[1, 1, 0, 0] = 1.0
        out = conv2d(t, k)
        np.testing.assert_allclose(out.data, t.data, atol=1e-15)

    def test_zero_kernels_bias_only(self):
        t = Tensor(np.ones((3, 4, 4)))
        out = conv2d(t, np.zeros((2, 3, 3, 3)), bias=np.array([1.5, -0.5]))
        assert np.all(out.data[0] == 1.5) and np.all(out.data[1] == -0.5)

    @pytest.mark.parametrize("padding", ["valid", "same", "same_reflect"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_nested_loop_oracle(self, padding, stride):
        rng = np.random.default_rng(11)
        for shape, kshape in [((2, 5, 5), (3, 2, 3, 3)), ((1, 7, 6), (2, 1, 3, 3)), ((3, 9, 8), (1, 3, 5, 5))]:
            x = rng.normal(size=shape)
            k = rng.normal(size=kshape)
            b = rng.normal(size=kshape[0])
            got = conv2d(Tensor(x), k, bias=b, stride=stride, padding=padding).data
            ref = conv2d_loops(x, k, bias=b, stride=stride, padding=padding)
            np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        t = Tensor(np.zeros((2, 4, 4)))
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(t, np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="bias"):
            conv2d(t, np.zeros((1, 2, 3, 3)), bias=np.zeros(2))


class TestGaussianField:
    def test_deterministic(self):
        a = gaussian_field(1234, 7, 5, 3)
        b = gaussian_field(1234, 7, 5, 3)
        assert np.array_equal(a.data, b.data)

    def test_seed_sensitivity(self):
        a = gaussian_field(42, 4, 4, 1)
        b = gaussian_field(43, 4, 4, 1)
        assert not np.array_equal(a.data, b.data)

    def test_moments_one_million(self):
        z = gaussian_field(99, 1000, 1000, 1).data
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_uniform_field_bounds(self):
        u = imgsig.uniform_field(5, 50, 50, 2).data
        assert u.min() > -0.5 and u.max() < 0.5
        assert abs(u.mean()) < 0.01


class TestImageIO:
    def test_round_trip_png_and_ppm(self, tmp_path):
        rng = np.random.default_rng(8)
        raw = rng.integers(0, 256, size=(3, 9, 7)).astype(np.float64) / 255.0
        img = PixelImage(raw)
        for name in ["a.png", "a.ppm"]:
            path = tmp_path / name
            write_image(img, path)
            back = read_image(path)
            assert np.array_equal(back.data, img.data)

    def test_empty_file_errors(self, tmp_path):
        p = tmp_path / "zero.png"
        p.write_bytes(b"")
        with pytest.raises(ImageIOError):
            read_image(p)

    def test_16bit_rejected(self, tmp_path):
        from PIL import Image

        p = tmp_path / "deep.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(p)
        with pytest.raises(ImageIOError, match="bit depth"):
            read_image(p)

    def test_read_gray(self, tmp_path):
        from PIL import Image

        p = tmp_path / "g.png"
        Image.fromarray((np.arange(16, dtype=np.uint8).reshape(4, 4) * 17), mode="L").save(p)
        g = imgsig.read_gray(p)
        assert g.shape == (4, 4)
        assert g.data.max() <= 1.0
