import math

import numpy as np
import pytest

from splatguard.editloop import EditConfig
from splatguard.metrics import build_embedders, psnr
from splatguard.renderer import orbit_views, render
from splatguard.robustness import (ADV_HEADER, AFTER_EDIT_HEADER, IDENTITY, KINDS, WM_HEADER,
                                   DistortionSpec, adv_robustness_harness, distort_image,
                                   distort_scene, jpeg_like, jpeg_like_u8, mean_bit_accuracy,
                                   quant_table, LUMA_TABLE, read_table_csv, table_specs,
                                   wm_after_edit_harness, wm_robustness_harness, write_table_csv)
from splatguard.scene import make_toy_scene
from splatguard.watermark import Message, WatermarkKey, bit_accuracy, decode_bits


@pytest.fixture(scope="module")
def toy_render():
    sc = make_toy_scene("object_on_plane", 2000, 0)
    return render(sc, orbit_views(8, 64, 64)[0]).image


def test_identity_parameters(toy_render):
    for kind, p in IDENTITY.items():
        out = distort_image(toy_render, DistortionSpec(kind, p, 3), "v")
        assert np.array_equal(out, toy_render), kind


def test_spec_validation():
    with pytest.raises(ValueError):
        DistortionSpec("sharpen", 1.0)
    with pytest.raises(ValueError):
        DistortionSpec("crop", 0.0)
    with pytest.raises(ValueError):
        DistortionSpec("jpeg_like", 50.5)
    assert [s.label for s in table_specs()] == WM_HEADER[5:]


def test_distortions_deterministic_per_view(toy_render):
    for spec in table_specs(4):
        a = distort_image(toy_render, spec, "v0")
        assert np.array_equal(a, distort_image(toy_render, spec, "v0"))
        assert a.shape == toy_render.shape and a.min() >= 0 and a.max() <= 1
    crop = DistortionSpec("crop", 0.4, 4)
    assert not np.array_equal(distort_image(toy_render, crop, "v0"), distort_image(toy_render, crop, "v1"))


def test_tiny_blur_and_rotation_are_near_identity(toy_render):
    # a 0.1 px Gaussian has a zero-radius kernel
    assert np.array_equal(distort_image(toy_render, DistortionSpec("blur", 0.1)), toy_render)
    out = distort_image(toy_render, DistortionSpec("rotation", 1e-12))
    assert np.max(np.abs(out - toy_render)) < 1e-6


def test_rotation_fills_corners_with_black():
    img = np.ones((32, 32, 3))
    out = distort_image(img, DistortionSpec("rotation", math.pi / 4, 1), "x")
    assert out[0, 0].max() < 1 or out[-1, -1].max() < 1
    assert np.allclose(out[16, 16], 1.0)


def test_quant_table_scaling():
    assert np.all(quant_table(LUMA_TABLE, 100) == 1)
    assert np.array_equal(quant_table(LUMA_TABLE, 50), LUMA_TABLE)
    assert quant_table(LUMA_TABLE, 10).min() >= 1 and quant_table(LUMA_TABLE, 10).max() == 255


def test_jpeg_q100_is_lossless_on_flat_blocks():
    rng = np.random.default_rng(0)
    data = np.repeat(np.repeat(rng.integers(0, 256, (4, 4, 3)), 16, 0), 16, 1).astype(np.uint8)
    assert np.max(np.abs(jpeg_like_u8(data, 100).astype(int) - data)) == 0


def test_jpeg_quality_monotone(toy_render):
    ps = [psnr(jpeg_like(toy_render, q), toy_render) for q in (10, 50, 90)]
    assert ps[0] < ps[1] < ps[2]
    assert ps[1] == pytest.approx(32.59, abs=0.01)


def test_model_distortions():
    sc = make_toy_scene("object_on_plane", 100, 0)
    assert len(distort_scene(sc, "prune", 0.1)) == 90
    assert len(distort_scene(sc, "clone", 0.1)) == 110
    assert distort_scene(sc, "noise", 0.05, 1).equals(distort_scene(sc, "noise", 0.05, 1))
    with pytest.raises(ValueError):
        distort_scene(sc, "shear", 0.1)


@pytest.fixture(scope="module")
def tiny():
    sc = make_toy_scene("object_on_plane", 150, 1)
    views = orbit_views(2, 32, 32, prefix="r")
    key = WatermarkKey(0, 16, 32, 32, gain=20.0, block=2, chroma=True, highpass=2.0)
    return sc, views, key, Message.random(16, 3)


def test_wm_harness_none_column_is_direct_decode(tiny, tmp_path):
    sc, views, key, msg = tiny
    alt = distort_scene(sc, "noise", 0.05, 9)
    rows = wm_robustness_harness({"a": sc, "b": alt}, key, msg, views, workers=2)
    for row, scene in zip(rows, (sc, alt)):
        direct = np.mean([bit_accuracy(decode_bits(render(scene, v).image, key), msg) for v in views])
        assert row["none"] == direct
        assert set(row) == set(WM_HEADER)
    serial = wm_robustness_harness({"a": sc, "b": alt}, key, msg, views, workers=1)
    assert serial == rows
    write_table_csv(rows, WM_HEADER, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(WM_HEADER)
    assert read_table_csv(tmp_path / "t.csv", WM_HEADER) == rows
    with pytest.raises(ValueError):
        wm_robustness_harness({"a": sc}, key, msg, views, specs=table_specs()[::-1])


def test_after_edit_and_adv_harness(tiny, tmp_path):
    sc, views, key, msg = tiny
    cfg = EditConfig(rounds=1, fit_steps=4)
    rows = wm_after_edit_harness({"a": sc}, key, msg, views, cfg)
    r = rows[0]
    assert r["before"] == pytest.approx(100 * mean_bit_accuracy(sc, key, msg, views))
    assert r["drop"] == pytest.approx(r["before"] - r["after"])
    write_table_csv(rows, AFTER_EDIT_HEADER, tmp_path / "a.csv")
    assert read_table_csv(tmp_path / "a.csv", AFTER_EDIT_HEADER) == rows
    adv = adv_robustness_harness(sc, {"same": sc}, views, cfg, "a toy", build_embedders(0))
    assert set(adv[0]) == set(ADV_HEADER)
    # editing the original itself reproduces the original edit exactly
    assert adv[0]["clip_none"] == pytest.approx(1.0)
    assert adv[0]["clipT_none"] == pytest.approx(adv[0]["clipT_orig"])


def test_unprotected_scene_decodes_near_chance(tiny):
    sc, views, _, msg = tiny
    accs = [mean_bit_accuracy(sc, WatermarkKey(s, 16, 32, 32, gain=20.0, block=2, chroma=True,
                                               highpass=2.0), msg, views[:1]) for s in range(40)]
    assert abs(np.mean(accs) - 0.5) < 0.1
