import numpy as np
import pytest

from splatguard.editor import (D_MID, T_STEPS, build_editor, embed_prompt, noisy_latent, s_lat,
                               s_traj, s_xattn, schedule)

PROMPT = "turn the object into a blue glass vase"


@pytest.fixture(scope="module")
def ed():
    return build_editor(0)


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 0.8, (16, 16, 3))
    ref = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
    return img, ref


def _fd_entries(f, x, g, rng, n=10, h=1e-5):
    worst = 0.0
    for _ in range(n):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (f(xp) - f(xm)) / (2 * h)
        worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    return worst


def test_schedule_identity_and_monotone():
    sig = []
    for t in range(1, T_STEPS + 1):
        a, s = schedule(t)
        assert abs(a * a + s * s - 1) < 1e-12
        sig.append(s)
    assert np.all(np.diff(sig) >= 0)
    a1, s1 = schedule(1)
    aT, sT = schedule(T_STEPS)
    assert a1 > s1 and sT > aT
    for bad in (0, 1001, 2.5):
        with pytest.raises(ValueError):
            schedule(bad)


def test_noisy_latent_affine():
    rng = np.random.default_rng(0)
    z, eps = rng.standard_normal((2, 2, 2, 4))
    a, _ = schedule(300)
    assert np.allclose(noisy_latent(2 * z, 300, eps) - noisy_latent(z, 300, eps), a * z)
    assert np.allclose(noisy_latent(z, 300, np.zeros_like(z)), a * z)
    with pytest.raises(ValueError):
        noisy_latent(z, 300, eps[..., :2])


def test_editor_is_deterministic():
    assert build_editor(3).fingerprint() == build_editor(3).fingerprint()
    assert build_editor(1).fingerprint() != build_editor(2).fingerprint()
    e = build_editor(0)
    with pytest.raises(ValueError):
        e.weights["enc1"][0, 0, 0, 0] = 1.0


def test_prompt_embedding():
    a, b = embed_prompt(PROMPT, 0), embed_prompt(PROMPT, 0)
    assert np.array_equal(a.sequence, b.sequence)
    assert a.sequence.shape == (8, 64)
    assert not np.array_equal(a.sequence, embed_prompt("make it snowy", 0).sequence)


def test_latent_shapes(ed):
    assert ed.encode(np.zeros((64, 64, 3))).shape == (8, 8, 4)
    assert ed.xattn_descriptor(np.zeros((64, 64, 3)), embed_prompt(PROMPT), 500,
                               np.zeros((8, 8, 4))).shape == (D_MID,)
    with pytest.raises(ValueError):
        ed.encode(np.zeros((12, 16, 3)))


def test_encoder_vjp(ed, pair):
    img, _ = pair
    rng = np.random.default_rng(4)
    gz = rng.standard_normal((2, 2, 4))
    g = ed.encode_vjp(img, gz)
    assert _fd_entries(lambda x: float(np.sum(ed.encode(x) * gz)), img, g, rng) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separation_cotangents(ed, pair, seed):
    img, ref = pair
    rng = np.random.default_rng(seed)
    pr = embed_prompt(PROMPT)
    t = int(rng.integers(200, 801))
    eps = rng.standard_normal((2, 2, 4))
    for fn in (lambda a: s_lat(a, ref, ed), lambda a: s_traj(a, ref, pr, t, eps, ed),
               lambda a: s_xattn(a, ref, pr, t, eps, ed)):
        v, g = fn(img)
        assert v > 0
        assert _fd_entries(lambda x: fn(x)[0], img, g, rng) < 1e-3


def test_identical_images_give_zero(ed, pair):
    img, _ = pair
    pr = embed_prompt(PROMPT)
    eps = np.ones((2, 2, 4))
    for v, g in (s_lat(img, img, ed), s_traj(img, img, pr, 400, eps, ed), s_xattn(img, img, pr, 400, eps, ed)):
        assert v == 0.0 and not np.any(g)


def test_xattn_normalization(ed, pair):
    img, ref = pair
    pr = embed_prompt(PROMPT)
    eps = np.zeros((2, 2, 4))
    d = ed.xattn_descriptor(img, pr, 400, eps) - ed.xattn_descriptor(ref, pr, 400, eps)
    assert np.isclose(s_xattn(img, ref, pr, 400, eps, ed)[0], np.sum(d * d) / 32)


def test_xattn_pooling_is_permutation_invariant(ed):
    rng = np.random.default_rng(0)
    pr = embed_prompt(PROMPT)
    zt = rng.standard_normal((4, 4, 4))
    h1 = ed._mid(zt, 400, pr)[1]["h1"]
    perm = rng.permutation(16)
    q = h1.reshape(-1, 16).mean(0) @ ed.weights["w_q"]
    qp = h1.reshape(-1, 16)[perm].mean(0) @ ed.weights["w_q"]
    assert np.allclose(q, qp, atol=1e-15)


def test_traj_descriptor_properties(ed, pair):
    img, _ = pair
    eps = np.random.default_rng(2).standard_normal((2, 2, 4))
    a = ed.traj_descriptor(img, embed_prompt(PROMPT), 500, eps)
    b = ed.traj_descriptor(img, embed_prompt("make it snowy"), 500, eps)
    assert a.shape == (2 * 2 * 2 * 4,)
    assert np.linalg.norm(a - b) > 0
    with pytest.raises(ValueError):
        ed.traj_descriptor(img, embed_prompt(PROMPT), 100, eps)


def test_edit_image(ed):
    img = np.random.default_rng(5).uniform(0.1, 0.9, (32, 32, 3))
    eps = np.random.default_rng(6).standard_normal((4, 4, 4))
    pr = embed_prompt(PROMPT)
    assert np.array_equal(ed.edit_image(img, pr, 0.0, 600, eps), img)
    mags = [np.linalg.norm(ed.edit_image(img, pr, s, 600, eps) - img) for s in (0.0, 0.5, 1.0)]
    assert mags[0] < mags[1] < mags[2]
    other = ed.edit_image(img, embed_prompt("make it snowy"), 1.0, 600, eps)
    assert not np.array_equal(other, ed.edit_image(img, pr, 1.0, 600, eps))
    with pytest.raises(ValueError):
        ed.edit_image(img, pr, -1.0, 600, eps)
