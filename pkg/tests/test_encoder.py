import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmch import autodiff as ad
from dmch.autodiff import Tensor
from dmch.encoder import (
    GRID_MAGIC, ConvEncoder, ImageSample, global_pool, init_conv_params, load_grid, make_grid,
    save_grid,
)
from dmch.errors import DataError, FormatError


def make_encoder(channels=(3, 4, 5), seed=0):
    params = init_conv_params(np.random.default_rng(seed), channels)
    return ConvEncoder(params, len(channels) - 1)


def random_image(size=16, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (size, size, 3))


# ---------------------------------------------------------------- encode


def test_mid_grey_image_gives_bias_only_first_layer():
    # pixels are centred to [-1, 1], so 0.5 is the zero input
    enc = make_encoder(channels=(3, 4))
    grid = enc.encode(np.full((16, 16, 3), 0.5))
    want = np.tanh(enc.params["enc.conv0.b"].data)
    np.testing.assert_allclose(grid.regions.data[0], np.tile(want, (64, 1)), rtol=0, atol=0)


def test_zero_image_grid_is_finite_through_full_stack():
    grid = make_encoder(channels=(3, 8, 8, 8)).encode(np.zeros((64, 64, 3)))
    assert (grid.grid_h, grid.grid_w, grid.K, grid.D) == (8, 8, 64, 8)
    assert np.all(np.isfinite(grid.regions.data)) and np.all(np.isfinite(grid.pooled.data))


def test_identical_images_give_identical_grids():
    enc = make_encoder()
    img = random_image(seed=3)
    a = enc.encode(ImageSample(img, "user", "a"))
    b = enc.encode([img.copy(), img.copy()])
    assert a.regions.data[0].tobytes() == b.regions.data[0].tobytes() == b.regions.data[1].tobytes()


def test_pooled_is_mean_of_regions():
    grid = make_encoder().encode(random_image(seed=1))
    np.testing.assert_allclose(grid.pooled.data, grid.regions.data.mean(axis=1), atol=1e-15)


@pytest.mark.parametrize("name", ["enc.conv0.w", "enc.conv0.b", "enc.conv1.w", "enc.conv1.b"])
def test_gradient_through_encode(name):
    enc = make_encoder()
    img = random_image(seed=2)
    weights = Tensor(np.random.default_rng(4).normal(size=(1, 16, 5)))

    def f(_):
        g = enc.encode(img)
        return ad.sum_(ad.hadamard(g.regions, weights)) + ad.sum_(g.pooled)

    assert ad.grad_check(f, enc.params[name], max_coords=60) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(16, 40), st.integers(16, 40))
def test_output_shape_follows_input_size(h, w):
    enc = make_encoder()
    grid = enc.encode(np.full((h, w, 3), 0.5))
    gh, gw = enc.grid_shape(h, w)
    assert grid.regions.shape == (1, gh * gw, 5) and (grid.grid_h, grid.grid_w) == (gh, gw)


def test_small_image_rejected():
    with pytest.raises(DataError, match="16"):
        make_encoder().encode(np.zeros((15, 16, 3)))


def test_pixel_range_checked():
    with pytest.raises(DataError):
        make_encoder().encode(np.full((16, 16, 3), 1.5))
    with pytest.raises(DataError):
        make_encoder().encode(np.zeros((16, 16, 4)))


# ---------------------------------------------------------------- pooling


def test_pool_identical_vectors():
    v = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(global_pool(Tensor(np.tile(v, (1, 5, 1)))).data[0], v)


def test_pool_two_regions():
    np.testing.assert_array_equal(global_pool(Tensor([[[1.0, 0.0], [0.0, 1.0]]])).data, [[0.5, 0.5]])


def test_pool_gradient_is_one_over_k():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3)), requires_grad=True)
    ad.backward(ad.sum_(global_pool(x)))
    np.testing.assert_allclose(x.grad, np.full((2, 4, 3), 0.25), atol=1e-15)
    assert ad.grad_check(lambda t: ad.sum_(ad.tanh(global_pool(t))), x) < 1e-4


def test_make_grid_layout_mismatch():
    with pytest.raises(DataError):
        make_grid(np.zeros((6, 2)), 2, 2)


# ---------------------------------------------------------------- grid files


def test_grid_file_round_trip_100_grids(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        gh, gw, d = (int(v) for v in rng.integers(1, 6, 3))
        g = make_grid(rng.normal(size=(gh * gw, d)) * 10.0 ** rng.integers(-5, 5), gh, gw)
        save_grid(tmp_path / "g.bin", g)
        back = load_grid(tmp_path / "g.bin")
        assert back.regions.data.tobytes() == g.regions.data.tobytes()
        assert back.pooled.data.tobytes() == g.pooled.data.tobytes()
        assert (back.grid_h, back.grid_w) == (gh, gw)


def test_seven_by_seven_grid_loads_with_shape(tmp_path):
    g = make_grid(np.random.default_rng(1).normal(size=(49, 256)), 7, 7)
    save_grid(tmp_path / "g.bin", g)
    back = load_grid(tmp_path / "g.bin")
    assert (back.K, back.D, back.grid_h, back.grid_w) == (49, 256, 7, 7)
    assert (tmp_path / "g.bin").stat().st_size == 8 + 14 + 8 * (49 * 256 + 256)


def test_grid_file_errors(tmp_path):
    g = make_grid(np.ones((4, 3)), 2, 2)
    save_grid(tmp_path / "g.bin", g)
    raw = (tmp_path / "g.bin").read_bytes()
    cases = {
        "truncated": raw[:-5],
        "short header": raw[:10],
        "magic": b"NOTAGRID" + raw[8:],
        "version": GRID_MAGIC + b"\x09\x00" + raw[10:],
        "layout": raw[:18] + b"\x03\x00" + raw[20:],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            load_grid(tmp_path / name)
