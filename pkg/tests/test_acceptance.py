"""Acceptance checks, one per criterion.

Each test records a pass/fail line that is printed at the end of the module, so
``pytest -v tests/test_acceptance.py`` shows a compact scoreboard even when a check
fails.  The end-to-end runs (3, 4, 7, 8) are marked slow.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from splatguard.cli import main as cli_main
from splatguard.editloop import DEFAULT_PROMPTS, SOURCE_PROMPT, EditConfig, run_edit
from splatguard.editor import build_editor, embed_prompt, s_lat, s_traj, s_xattn
from splatguard.metrics import build_embedders, clip_metrics, psnr, read_rows_csv, sucps, sucps_against
from splatguard.protect import DEFAULT_RHO, ProtectConfig, modulate, protect
from splatguard.renderer import GradientBundle, orbit_views, render
from splatguard.robustness import (ADV_HEADER, AFTER_EDIT_HEADER, IDENTITY, WM_HEADER, DistortionSpec,
                                   adv_robustness_harness, distort_image, mean_bit_accuracy,
                                   read_table_csv, wm_after_edit_harness, wm_robustness_harness,
                                   write_table_csv)
from splatguard.scene import ParamGroup, make_toy_scene
from splatguard.selection import EPS, build_mask, gaussian_scores, hard_coefficients, procedural_mask, soft_coefficients
from splatguard.watermark import Message, WatermarkKey, msg_loss, quality_loss

from conftest import central_fd, rel_err
from test_editor import _fd_entries
from test_renderer import _fd_check, naive_render

DATA = Path(__file__).parent / "data"
RESULTS = {}

TABLE1 = {"3DGSW": 0.7791, "GaussianMarker": 0.7516, "GuardSplat": 0.7489, "DEGauss": 0.6467,
          "3DGSW+DEGauss": 0.6200, "Ours": 0.8622}
TABLE2 = [0.6776, 0.8566, 0.6683, 0.8622]

# reference toy setup shared by the end-to-end criteria
SIZE, N_GAUSS, EPOCHS = 64, 2000, 12
DECODER = dict(gain=60.0, block=2, chroma=True, highpass=2.0)
# edit loop used for the deterrence check; fewer refit steps than the CLI default keep
# the six edit runs inside the time budget
DETERRENCE_EDIT = dict(rounds=3, fit_steps=50)
# diversion weights rescaled from 1e-4 by the latent-size ratio (4x64x64 vs 4x8x8); at 1e-4
# the l1 term inside the adversarial loss dominates and the separation terms shrink
DIVERSION = dict(lambda_lat=6.4e-3, lambda_traj=6.4e-3, lambda_xattn=6.4e-3)


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="module", autouse=True)
def scoreboard(request):
    yield
    rep = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(RESULTS.items())]
    for line in lines:
        if rep is not None:
            rep.write_line(line)
        else:
            print(line)


# ---------------------------------------------------------------------------
# 1. sUCPS reproduction

def test_1_sucps_reproduction():
    t0 = time.perf_counter()
    rows = read_rows_csv(DATA / "table1_rows.csv")
    got1 = {s.method: s.sucps for s in sucps(rows)}
    err1 = max(abs(got1[k] - v) for k, v in TABLE1.items())
    baselines = [r for r in rows if r.method != "Ours"]
    got2 = [s.sucps for s in sucps_against(baselines, read_rows_csv(DATA / "table2_rows.csv"))]
    err2 = max(abs(a - b) for a, b in zip(got2, TABLE2))
    dt = time.perf_counter() - t0
    record(1, err1 <= 0.002 and err2 <= 0.002 and dt < 1.0,
           f"max |err| main {err1:.5f}, ablation {err2:.5f} (tol 0.002), {dt * 1000:.0f} ms")


# ---------------------------------------------------------------------------
# 2. gradient integrity

def test_2_gradient_integrity():
    t0 = time.perf_counter()
    worst = {"watermark": 0.0, "editor": 0.0}
    renderer_ok = True
    ed = build_editor(0)
    for seed in (0, 1, 2):
        # renderer: each sampled entry within 1e-8 + 1e-4 relative
        scene = make_toy_scene("object_on_plane", 60, seed)
        try:
            _fd_check(scene, orbit_views(1, 24, 24, phase=seed * 0.3, radius=2.2)[0], seed)
        except AssertionError:
            renderer_ok = False
        rng = np.random.default_rng(seed)
        key = WatermarkKey(seed, 8, 8, 8, gain=5.0, block=2, chroma=True, highpass=1.0)
        msg = Message.random(8, seed)
        img = rng.uniform(0.1, 0.9, (8, 8, 3))
        ref = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
        g = msg_loss(img, key, msg)[1]
        worst["watermark"] = max(worst["watermark"], rel_err(g, central_fd(lambda x: msg_loss(x, key, msg)[0], img)))
        g = quality_loss(img, ref, ed)[1]
        worst["watermark"] = max(worst["watermark"],
                                 rel_err(g, central_fd(lambda x: quality_loss(x, ref, ed)[0], img)))
        a = rng.uniform(0.2, 0.8, (16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        pr = embed_prompt("make it look like a bronze statue")
        t = int(rng.integers(200, 801))
        eps = rng.standard_normal((2, 2, 4))
        for fn in (lambda x: s_lat(x, b, ed), lambda x: s_traj(x, b, pr, t, eps, ed),
                   lambda x: s_xattn(x, b, pr, t, eps, ed)):
            worst["editor"] = max(worst["editor"], _fd_entries(lambda x: fn(x)[0], a, fn(a)[1], rng))
    dt = time.perf_counter() - t0
    ok = renderer_ok and worst["watermark"] < 1e-4 and worst["editor"] < 1e-3 and dt < 300
    record(2, ok, f"renderer {'ok' if renderer_ok else 'MISMATCH'} (3 seeds), watermark rel {worst['watermark']:.1e}, "
                  f"editor rel {worst['editor']:.1e}, {dt:.0f} s")


# ---------------------------------------------------------------------------
# shared end-to-end runs

@pytest.fixture(scope="module")
def toy():
    scene = make_toy_scene("object_on_plane", N_GAUSS, 0)
    train = orbit_views(24, SIZE, SIZE, prefix="t")
    held_out = orbit_views(8, SIZE, SIZE, phase=0.5, prefix="e")
    key = WatermarkKey(0, 32, SIZE, SIZE, **DECODER)
    return scene, train, held_out, key, Message.random(32, 0)


@pytest.fixture(scope="module")
def wm_only_run(toy):
    scene, train, held_out, key, msg = toy
    t0 = time.perf_counter()
    prot, report = protect(scene, ProtectConfig(lambda_adv=0.0, epochs=EPOCHS), key, msg, None,
                           build_editor(0), [], train, eval_views=held_out)
    return prot, report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def full_run(toy):
    scene, train, held_out, key, msg = toy
    t0 = time.perf_counter()
    mask = build_mask(scene, train, [procedural_mask(scene, v, "object") for v in train])
    prot, report = protect(scene, ProtectConfig(epochs=EPOCHS, **DIVERSION), key, msg, mask, build_editor(0),
                           list(DEFAULT_PROMPTS), train, eval_views=held_out)
    return prot, report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def protected_scenes(toy, wm_only_run):
    scene, _, held_out, key, msg = toy
    return scene, {"wm_only": wm_only_run[0]}, key, msg, held_out


# ---------------------------------------------------------------------------
# 3. watermark-only sanity

@pytest.mark.slow
def test_3_watermark_only(wm_only_run):
    _, report, dt = wm_only_run
    ok = report.bit_accuracy >= 0.95 and report.psnr >= 30.0 and dt < 20 * 60
    record(3, ok, f"held-out bit accuracy {report.bit_accuracy:.4f} (>= 0.95), PSNR {report.psnr:.2f} dB "
                  f"(>= 30), {report.iterations} iterations in {dt / 60:.1f} min (< 20)")


# ---------------------------------------------------------------------------
# 4. deterrence

@pytest.mark.slow
def test_4_deterrence(toy, wm_only_run, full_run):
    scene, _, held_out, _, _ = toy
    t0 = time.perf_counter()
    emb = build_embedders(0)
    diffs = {}
    for variant in ("dge_like", "ge_like"):
        cfg = EditConfig(variant=variant, **DETERRENCE_EDIT)
        edited = {name: run_edit(s, held_out, cfg) for name, s in
                  (("orig", scene), ("wm_only", wm_only_run[0]), ("full", full_run[0]))}
        eo = [edited["orig"].renders[v.view_id] for v in held_out]
        src_o = [render(scene, v).image for v in held_out]
        for name, s in (("wm_only", wm_only_run[0]), ("full", full_run[0])):
            m = clip_metrics(eo, [edited[name].renders[v.view_id] for v in held_out], src_o,
                             [render(s, v).image for v in held_out], SOURCE_PROMPT, cfg.prompt, emb)
            diffs[variant, name] = m["clip"]["diff"]
    dt = time.perf_counter() - t0 + full_run[2] + wm_only_run[2]
    ok = all(diffs[v, "full"] > 0 and diffs[v, "full"] > diffs[v, "wm_only"] for v in ("dge_like", "ge_like"))
    ok = ok and dt < 40 * 60
    record(4, ok, "; ".join(f"{v}: dCLIP full {diffs[v, 'full']:.4f} vs watermark-only {diffs[v, 'wm_only']:.4f}"
                            for v in ("dge_like", "ge_like"))
           + f"; full-run bit acc {full_run[1].bit_accuracy:.3f}, PSNR {full_run[1].psnr:.2f} dB; {dt / 60:.1f} min (< 40)")


# ---------------------------------------------------------------------------
# 5. modulation algebra

def test_5_modulation_algebra():
    rng = np.random.default_rng(0)
    n = 40
    ok = True
    for _ in range(20):
        adv = GradientBundle.zeros(n).map(lambda g, a: rng.standard_normal(a.shape))
        wm = GradientBundle.zeros(n).map(lambda g, a: rng.standard_normal(a.shape))
        m = rng.uniform(0, 1, n)
        m[rng.choice(n, 10, replace=False)] = 0.0
        out = modulate(adv, m, DEFAULT_RHO, float(rng.uniform(0.1, 5)), wm)
        for g in ParamGroup:
            ok &= np.array_equal(out.get(g)[m == 0], wm.get(g)[m == 0])
        rho = dict(DEFAULT_RHO)
        zero = ParamGroup(rng.choice([g.value for g in ParamGroup if g is not ParamGroup.POSITION]))
        rho[zero] = 0.0
        out = modulate(adv, m, rho, 1.0, wm)
        ok &= np.array_equal(out.get(zero), wm.get(zero))
        ok &= np.array_equal(out.get(ParamGroup.POSITION), wm.get(ParamGroup.POSITION))
    # protect with lambda_adv = 0 equals the watermark-only run, whatever the mask and prompts
    scene = make_toy_scene("object_on_plane", 80, 1)
    views = orbit_views(4, 32, 32, prefix="m")
    key = WatermarkKey(0, 8, 32, 32, gain=20.0, block=2, chroma=True, highpass=2.0)
    msg = Message.random(8, 0)
    cfg = ProtectConfig(lambda_adv=0.0, epochs=1, views_per_iter=2)
    a, _ = protect(scene, cfg, key, msg, None, build_editor(0), [], views)
    mask = build_mask(scene, views, [procedural_mask(scene, v, "object") for v in views])
    b, _ = protect(scene, cfg, key, msg, mask, build_editor(0), list(DEFAULT_PROMPTS), views)
    full, _ = protect(scene, ProtectConfig(epochs=1, views_per_iter=2), key, msg, mask,
                      build_editor(0), list(DEFAULT_PROMPTS), views)
    ok &= a.equals(b)
    ok &= np.array_equal(full.positions, scene.positions) and np.array_equal(a.positions, scene.positions)
    record(5, ok, "m=0 and rho=0 pass the watermark gradient through; lambda_adv=0 run "
                  "bit-identical; positions unchanged")


# ---------------------------------------------------------------------------
# 6. selection correctness

def test_6_selection():
    scene = make_toy_scene("object_on_plane", 300, 2)
    views = orbit_views(4, 32, 32, prefix="q")
    masks = [procedural_mask(scene, v, "object") for v in views]
    s = gaussian_scores(scene, views, masks)
    obj, bg = s[scene.labels["object"]].mean(), s[scene.labels["plane"]].mean()
    tau = 0.6
    sat = soft_coefficients(np.array([tau + EPS, tau + 0.1, 1.0]), tau, 2.0)
    grid = np.random.default_rng(0).uniform(0, 1, 2000)
    grid = grid[np.abs(grid - tau) > 0.02]
    same = np.array_equal(np.round(soft_coefficients(grid, tau, 64.0)), hard_coefficients(grid, tau))
    small = make_toy_scene("object_on_plane", 40, 5)
    cam = orbit_views(1, 24, 24, prefix="o")[0]
    mask = np.random.default_rng(1).uniform(0, 1, (24, 24))
    _, den, num = naive_render(small, cam, mask)
    oracle = np.clip(num / (den + EPS), 0, 1)
    err = float(np.max(np.abs(gaussian_scores(small, [cam], [mask]) - oracle)))
    ok = obj > bg and np.all(sat == 1.0) and same and err < 1e-9
    record(6, ok, f"mean s object {obj:.3f} > background {bg:.3f}; saturation {np.all(sat == 1.0)}; "
                  f"gamma=64 equals hard {same}; brute-force err {err:.1e}")


# ---------------------------------------------------------------------------
# 7. robustness harness completeness

@pytest.mark.slow
def test_7_robustness_harness(tmp_path, protected_scenes):
    original, scenes, key, msg, eval_views = protected_scenes
    wm_only = scenes["wm_only"]
    quick = EditConfig(rounds=1, fit_steps=20)
    rows = wm_robustness_harness({"wm_only": wm_only, "original": original}, key, msg, eval_views)
    write_table_csv(rows, WM_HEADER, tmp_path / "wm.csv")
    adv = adv_robustness_harness(original, {"wm_only": wm_only}, eval_views[:2], quick, SOURCE_PROMPT,
                                 build_embedders(0))
    write_table_csv(adv, ADV_HEADER, tmp_path / "adv.csv")
    after = wm_after_edit_harness({"wm_only": wm_only}, key, msg, eval_views[:2], quick)
    write_table_csv(after, AFTER_EDIT_HEADER, tmp_path / "after.csv")
    shaped = all(len(read_table_csv(tmp_path / f, h)) == n for f, h, n in
                 (("wm.csv", WM_HEADER, 2), ("adv.csv", ADV_HEADER, 1), ("after.csv", AFTER_EDIT_HEADER, 1)))
    direct = mean_bit_accuracy(wm_only, key, msg, eval_views)
    none_ok = rows[0]["none"] == direct
    img = render(wm_only, eval_views[0]).image
    ident = all(np.array_equal(distort_image(img, DistortionSpec(k, p, 5), "x"), img) for k, p in IDENTITY.items())
    accs = [mean_bit_accuracy(original, WatermarkKey(s, 32, SIZE, SIZE, **DECODER), Message.random(32, s),
                              eval_views) for s in range(100)]
    chance = float(np.mean(accs))
    within = float(np.mean(np.abs(np.array(accs) - 0.5) <= 0.15))
    ok = shaped and none_ok and ident and abs(chance - 0.5) <= 0.15
    record(7, ok, f"3 tables written; none==direct {none_ok}; identities {ident}; unprotected decode "
                  f"mean {chance:.3f} over 100 keys ({100 * within:.0f}% of keys within 0.5+-0.15)")


# ---------------------------------------------------------------------------
# 8. determinism across repeats and worker counts

PIPELINE_SETTINGS = ["--set", "scene.n=200", "--set", "views.width=32", "--set", "views.height=32",
                     "--set", "views.train=4", "--set", "views.eval=2", "--set", "protect.epochs=1",
                     "--set", "protect.views_per_iter=2", "--set", "edit.rounds=1",
                     "--set", "edit.fit_steps=6"]


def _pipeline(root: Path, workers: int):
    w = ["--workers", str(workers), *PIPELINE_SETTINGS]
    steps = [
        ["scene-gen", "--out", root / "scene.gsplat"],
        ["mask-build", "--scene", root / "scene.gsplat", "--out", root / "mask.csv"],
        ["protect", "--scene", root / "scene.gsplat", "--out-dir", root / "prot", "--mask", root / "mask.csv"],
        ["render", "--scene", root / "prot" / "protected.gsplat", "--out-dir", root / "renders", "--views", "eval"],
        ["edit", "--scene", root / "prot" / "protected.gsplat", "--out-dir", root / "edit"],
        ["distort", "--input", root / "renders" / "e000.ppm", "--out", root / "jpeg.ppm", "--kind", "jpeg_like"],
        ["metrics", "--original", root / "scene.gsplat", "--protected", root / "prot" / "protected.gsplat",
         "--key", root / "prot" / "key.json", "--message", root / "prot" / "message.txt",
         "--method", "ours", "--out", root / "rows.csv"],
        ["robustness", "--original", root / "scene.gsplat", "--protected", f"ours={root / 'prot' / 'protected.gsplat'}",
         "--key", root / "prot" / "key.json", "--message", root / "prot" / "message.txt",
         "--out-dir", root / "tables", "--tables", "wm,after"],
    ]
    codes = [cli_main([str(a) for a in s] + w) for s in steps]
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return codes, files


@pytest.mark.slow
def test_8_determinism(tmp_path):
    runs = [_pipeline(tmp_path / name, w) for name, w in (("a", 1), ("b", 1), ("c", 3))]
    codes_ok = all(c == 0 for codes, _ in runs for c in codes)
    (_, fa), (_, fb), (_, fc) = runs
    same = fa.keys() == fb.keys() == fc.keys() and all(fa[k] == fb[k] == fc[k] for k in fa)
    kinds = sorted({Path(k).suffix for k in fa})
    record(8, codes_ok and same and len(fa) > 10,
           f"{len(fa)} files ({', '.join(kinds)}) bit-identical over 2 repeats and workers 1/3")
