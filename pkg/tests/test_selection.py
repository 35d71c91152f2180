import numpy as np
import pytest

from splatguard.editor import build_editor
from splatguard.renderer import look_at, render
from splatguard.scene import make_toy_scene
from splatguard.selection import (SoftMask, build_mask, edit_update_gradient, gaussian_scores,
                                  hard_coefficients, procedural_mask, read_mask_csv, saliency,
                                  saliency_export, soft_coefficients, write_mask_csv)

from test_renderer import naive_render


def test_scores_match_bruteforce(cam24):
    scene = make_toy_scene("object_on_plane", 40, 5)
    rng = np.random.default_rng(0)
    masks = [rng.uniform(0, 1, (24, 24)), (rng.uniform(0, 1, (24, 24)) > 0.5).astype(float)]
    cams = [cam24, look_at([0.5, 2.2, 2.6], [0, 0, 0], 24, 24, view_id="b")]
    num = np.zeros(len(scene))
    den = np.zeros(len(scene))
    for c, m in zip(cams, masks):
        _, d, n = naive_render(scene, c, m)
        num += n
        den += d
    expect = np.clip(num / (den + 1e-8), 0, 1)
    assert np.allclose(gaussian_scores(scene, cams, masks), expect, atol=1e-9)


def test_full_and_empty_masks(small_scene, small_views):
    ones = [np.ones((v.height, v.width)) for v in small_views]
    s = gaussian_scores(small_scene, small_views, ones)
    den = sum(render(small_scene, v).contrib_den for v in small_views)
    seen = den > 1e-4
    assert seen.any()
    assert np.allclose(s[seen], 1.0, atol=1e-4)
    assert np.all(s[den == 0] == 0)
    zeros = [np.zeros_like(m) for m in ones]
    assert np.all(gaussian_scores(small_scene, small_views, zeros) == 0)
    with pytest.raises(ValueError):
        gaussian_scores(small_scene, small_views, ones[:-1])


def test_soft_coefficients():
    s = np.array([0.0, 0.3, 0.6, 0.9, 1.0])
    m = soft_coefficients(s, 0.6, 2.0)
    assert np.allclose(m, [0.0, 0.25, 1.0, 1.0, 1.0], atol=1e-6)
    assert np.all(np.diff(soft_coefficients(np.linspace(0, 1, 50))) >= 0)
    with pytest.raises(ValueError):
        soft_coefficients(s, 0.0)


def test_steep_soft_matches_hard():
    s = np.random.default_rng(1).uniform(0, 1, 500)
    s = s[np.abs(s - 0.6) > 0.05]
    assert np.array_equal(np.round(soft_coefficients(s, 0.6, 64.0)), hard_coefficients(s, 0.6))


def test_object_mask_selects_object(small_views):
    scene = make_toy_scene("object_on_plane", 300, 2)
    masks = [procedural_mask(scene, v, "object") for v in small_views]
    mask = build_mask(scene, small_views, masks)
    obj = scene.labels["object"]
    plane = scene.labels["plane"]
    # plane Gaussians seen only behind the object also score high, so compare the groups
    assert mask.m[obj].mean() > 0.8
    assert mask.m[obj].mean() > mask.m[plane].mean() + 0.3
    assert np.median(mask.s[plane]) < 0.3
    assert mask.views_used == tuple(v.view_id for v in small_views)
    hard = build_mask(scene, small_views, masks, mode="hard", threshold=0.5)
    assert set(np.unique(hard.m)) <= {0.0, 1.0}
    with pytest.raises(KeyError):
        procedural_mask(scene, small_views[0], "sky")


def test_mask_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        SoftMask(np.array([1.2]), np.array([1.0]))
    with pytest.raises(ValueError):
        SoftMask(np.array([0.5]), np.array([0.5]), mode="hard")
    m = SoftMask(np.array([0.0, 0.25, 1.0]), np.array([0.0, 0.3, 0.8]))
    write_mask_csv(m, tmp_path / "m.csv")
    back = read_mask_csv(tmp_path / "m.csv")
    assert np.array_equal(back.m, m.m) and np.array_equal(back.s, m.s)


def test_edit_saliency_concentrates_where_edits_land(small_views, tmp_path):
    scene = make_toy_scene("object_on_plane", 200, 4)
    ed = build_editor(0)
    g = edit_update_gradient(scene, small_views, ed, "make the toy bright red", seed=1)
    sal = saliency(g, scene)
    assert sal.shape == (len(scene),) and np.all(sal >= 0) and sal.max() > 0
    out = saliency_export(g, scene, tmp_path / "sal.csv")
    lines = (tmp_path / "sal.csv").read_text().splitlines()
    assert lines[0] == "index,x,y,z,saliency" and len(lines) == len(scene) + 1
    assert np.array_equal(out, sal)
