import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatguard.scene import (
    EmptySceneError, GaussianScene, InvalidRotationError, MalformedHeaderError, ParamGroup,
    TruncatedPayloadError, VersionMismatchError, distort_clone, distort_noise, distort_prune,
    make_toy_scene, scene_load, scene_save, scene_with, sigmoid,
)


def test_toy_scene_is_deterministic():
    a = make_toy_scene("object_on_plane", 200, 5)
    b = make_toy_scene("object_on_plane", 200, 5)
    c = make_toy_scene("object_on_plane", 200, 6)
    assert a.equals(b)
    assert not a.equals(c)
    assert len(a.labels["object"]) == 60 and len(a.labels["plane"]) == 140


def test_toy_kinds_and_bad_kind():
    for kind in ("plane", "object_on_plane", "random"):
        s = make_toy_scene(kind, 50, 0)
        assert len(s) == 50
        assert np.allclose(np.linalg.norm(s.rotations, axis=1), 1.0)
    with pytest.raises(ValueError):
        make_toy_scene("teapot", 10)


def test_save_load_roundtrip(tmp_path, small_scene):
    p = tmp_path / "a.gsplat"
    scene_save(small_scene, p)
    back = scene_load(p)
    assert back.equals(small_scene)
    footer_len = struct.unpack_from("<Q", p.read_bytes(), 13 + 23 * 8 * len(small_scene))[0]
    assert os.path.getsize(p) == 13 + 23 * 8 * len(small_scene) + 8 + footer_len


def test_save_is_byte_identical(tmp_path, small_scene):
    scene_save(small_scene, tmp_path / "a")
    scene_save(scene_load(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_load_errors(tmp_path, small_scene):
    p = tmp_path / "s"
    scene_save(small_scene, p)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MalformedHeaderError):
        scene_load(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(VersionMismatchError):
        scene_load(tmp_path / "ver")
    (tmp_path / "short").write_bytes(raw[:200])
    with pytest.raises(TruncatedPayloadError):
        scene_load(tmp_path / "short")
    (tmp_path / "empty").write_bytes(raw[:4] + struct.pack("<BQ", 1, 0))
    with pytest.raises(EmptySceneError):
        scene_load(tmp_path / "empty")


def test_zero_quaternion_rejected(small_scene):
    rot = small_scene.rotations.copy()
    rot[3] = 0
    with pytest.raises(InvalidRotationError):
        small_scene.replace(rotations=rot)


def test_scene_arrays_are_read_only(small_scene):
    with pytest.raises(ValueError):
        small_scene.positions[0, 0] = 1.0


def test_scene_with_group(small_scene):
    dc = small_scene.color_dc + 1
    s2 = scene_with(small_scene, {ParamGroup.COLOR_DC: dc})
    assert np.array_equal(s2.group(ParamGroup.COLOR_DC), dc)
    assert np.array_equal(s2.positions, small_scene.positions)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2**16))
def test_roundtrip_property(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4)) + 0.1
    s = GaussianScene(rng.standard_normal((n, 3)), rng.standard_normal((n, 3)), q,
                      rng.standard_normal(n), rng.standard_normal((n, 3)), rng.standard_normal((n, 9)),
                      rng.uniform(0, 1, 3), f"s{seed}", {"a": np.arange(0, n, 2)})
    p = tmp_path_factory.mktemp("rt") / "s"
    scene_save(s, p)
    assert scene_load(p).equals(s)


def test_noise_distortion(small_scene):
    assert distort_noise(small_scene, 0.0).equals(small_scene)
    a = distort_noise(small_scene, 0.05, seed=1)
    b = distort_noise(small_scene, 0.05, seed=1)
    assert a.equals(b)
    assert np.array_equal(a.positions, small_scene.positions)
    d = a.color_dc - small_scene.color_dc
    assert 0.03 < d.std() < 0.07


def test_prune_distortion(small_scene):
    p = distort_prune(small_scene, 0.25, seed=2)
    assert len(p) == len(small_scene) - 30
    assert sum(len(v) for v in p.labels.values()) == len(p)
    assert distort_prune(small_scene, 0.0).equals(small_scene)


def test_clone_halves_opacity(small_scene):
    c = distort_clone(small_scene, 0.1, seed=3)
    n, k = len(small_scene), 12
    assert len(c) == n + k
    a0 = sigmoid(small_scene.opacity_logits)
    a1 = sigmoid(c.opacity_logits)
    # cloned pairs carry the original total opacity
    changed = np.nonzero(a1[:n] != a0)[0]
    assert len(changed) == k
    assert np.allclose(a1[changed] + a1[n:], a0[changed])
    with pytest.raises(ValueError):
        distort_clone(small_scene, 1.0)
