import numpy as np
import pytest

from msranet import layers as L
from msranet.data import decode_image
from msranet.errors import ConfigError, DataError, ShapeError
from msranet.gradcam import (
    ANCHOR_RGB,
    ANCHORS,
    Heatmap,
    cam_from_gradients,
    colormap,
    colormap_overlay,
    heatmap,
    quantize,
    top_decile_fraction,
    triptych_names,
    write_png,
)
from msranet.layers import Mode
from msranet.model import ModelConfig, build, forward
from msranet.tensor import Tensor, precision

C = 8


def _image(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (32, 32, 3))


def test_linear_head_alpha_is_analytic(linear_head):
    """logit_0 = mean of channel 0: d logit / d A[h, w, 0] = 1 / (H W) everywhere."""
    w = np.zeros((C, 2))
    w[0, 0] = 1.0
    w[3, 1] = 1.0
    m = linear_head(w)
    hm = heatmap(m, _image(), class_id=0)
    _, cache = forward(m, _image()[None], Mode.EVAL)
    h, w_ = cache["F_merged"].shape[1:3]
    expected = np.zeros(C)
    expected[0] = 1 / (h * w_)
    np.testing.assert_allclose(hm.alpha, expected, rtol=1e-6, atol=1e-12)

    ch0 = np.maximum(cache["F_merged"].data[0, :, :, 0], 0)
    with precision("float64"):
        want = L.bilinear_resize(Tensor((ch0 / ch0.max())[:, :, None]), 32, 32).data[:, :, 0]
    np.testing.assert_allclose(hm.values, want, atol=1e-12)


def test_general_alpha_is_scaled_output_column(linear_head, rng):
    w = rng.normal(size=(C, 3))
    m = linear_head(w)
    hm = heatmap(m, _image(1), class_id=2)
    hw = np.prod(forward(m, _image(1)[None])[1]["F_merged"].shape[1:3])
    np.testing.assert_allclose(hm.alpha, w[:, 2] / hw, rtol=1e-6)


def test_permuting_classes_permutes_heatmaps(linear_head, rng):
    w = rng.normal(size=(C, 3))
    a = linear_head(w)
    b = linear_head(w[:, [1, 0, 2]])
    img = _image(2)
    np.testing.assert_array_equal(heatmap(a, img, 0).values, heatmap(b, img, 1).values)
    np.testing.assert_array_equal(heatmap(a, img, 1).values, heatmap(b, img, 0).values)


def test_negative_weighted_sum_gives_zero_map():
    acts = np.random.default_rng(0).uniform(0, 1, (4, 4, 3))
    alpha, cam = cam_from_gradients(acts, -np.ones_like(acts))
    assert (alpha < 0).all() and (cam == 0).all() and not np.isnan(cam).any()


def test_heatmap_range_shape_and_errors(rng):
    cfg = ModelConfig(input_size=32, c1=16, c2=32, r=4, n_classes=3, hidden=8)
    m = build(cfg, seed=0)
    img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    for layer in ("F1_att", "F2_att", "F_merged"):
        hm = heatmap(m, img, layer=layer)
        assert hm.values.shape == (32, 32)
        assert hm.values.min() >= 0 and hm.values.max() <= 1
    assert heatmap(m, img).class_id == int(forward(m, img[None])[0].data.argmax())
    with pytest.raises(ConfigError):
        heatmap(m, img, layer="F3")
    with pytest.raises(DataError):
        heatmap(m, img, class_id=3)
    f1 = build(ModelConfig(**{**cfg.__dict__, "variant": "f1_only"}), seed=0)
    assert heatmap(f1, img).values.shape == (32, 32)
    with pytest.raises(ConfigError):
        heatmap(f1, img, layer="F1_att")


def test_colormap_anchors_and_quantize():
    np.testing.assert_array_equal(colormap(ANCHORS), ANCHOR_RGB)
    np.testing.assert_allclose(colormap(np.array([0.175])), [[0, 0.5, 1]])
    assert quantize(np.array([0.5 / 255, 1.5 / 255 - 1e-9, 1.0])).tolist() == [1, 1, 255]


def test_overlay_alpha_endpoints():
    img = _image()
    hm = Heatmap(np.ones((32, 32)), "F_merged", 0)
    assert np.array_equal(colormap_overlay(img, hm, 0.0), quantize(img))
    red = colormap_overlay(img, hm, 1.0)
    assert (red == [255, 0, 0]).all()
    with pytest.raises(ConfigError):
        colormap_overlay(img, hm, 1.5)
    with pytest.raises(ShapeError):
        colormap_overlay(img[:16], hm)


def test_png_round_trip_and_overwrite(tmp_path):
    img = quantize(_image())
    path = tmp_path / "x.png"
    write_png(img, path)
    write_png(img[::-1].copy(), path)
    assert np.array_equal(decode_image(path), img[::-1])
    with pytest.raises(ShapeError):
        write_png(img.astype(np.float32), path)


def test_triptych_names():
    names = triptych_names("s3", "c1", "F_merged")
    assert names == {k: f"s3_c1_F_merged_{k}.png" for k in ("orig", "heat", "overlay")}


def test_top_decile_fraction():
    v = np.zeros((8, 8))
    v[:4, :4] = np.linspace(0.5, 1, 16).reshape(4, 4)
    assert top_decile_fraction(v, (slice(0, 4), slice(0, 4))) == pytest.approx(1.0)
    assert top_decile_fraction(v, (slice(4, 8), slice(4, 8))) == 0.0
    assert top_decile_fraction(np.zeros((4, 4)), (slice(0, 2), slice(0, 2))) == 0.0
