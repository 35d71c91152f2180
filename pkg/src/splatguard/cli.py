"""Command-line interface.

Every command reads one JSON run config (``--config``) plus ``--set section.key=value``
overrides, and composes with the others through files on disk.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_NUMERIC = 6

EXIT_HELP = """exit codes:
  0  success
  2  usage error (bad command line)
  3  config error (unknown key, wrong type, invalid value)
  4  missing input file
  5  malformed input file or module error
  6  numerical failure (non-finite loss or gradient)
errors are printed to stderr as a single line: "splatguard: error[<code>]: <message>"
"""

GROUPS = ("log_scale", "rotation", "opacity_logit", "color_dc", "color_rest")

# section -> key -> (default, help).  The type of the default is the accepted type;
# None defaults accept int or null.
SCHEMA = {
    "scene": {
        "kind": ("object_on_plane", "toy scene kind"),
        "n": (2000, "number of Gaussians"),
        "seed": (0, "scene generation seed"),
    },
    "views": {
        "train": (24, "number of training (and mask) views"),
        "eval": (8, "number of held-out evaluation views"),
        "width": (64, "image width"),
        "height": (64, "image height"),
        "radius": (3.2, "orbit radius"),
        "fov_deg": (45.0, "horizontal field of view"),
    },
    "key": {
        "seed": (0, "decoder seed"),
        "k": (32, "message length in bits"),
        "gain": (60.0, "decoder logit gain"),
        "block": (2, "decoder weight block size (Haar-band pixels)"),
        "chroma": (True, "decoder reads colour-opponent signal only"),
        "highpass": (2.0, "decoder high-pass width (Haar-band pixels, 0 = off)"),
    },
    "message": {
        "seed": (0, "seed for a random message"),
        "bits": ("", "explicit 0/1 message; overrides the seed when non-empty"),
    },
    "mask": {
        "label": ("object", "scene label used for procedural 2D masks"),
        "tau": (0.6, "soft-mask saturation threshold"),
        "gamma": (2.0, "soft-mask exponent"),
        "mode": ("soft", "soft or hard"),
        "threshold": (0.6, "hard-mask threshold"),
    },
    "editor": {
        "seed": (0, "surrogate editor seed used by protect"),
    },
    "protect": {
        "lambda_adv": (1.0, "adversarial gradient weight (0 = watermark only)"),
        "lambda_msg": (0.1, "message loss weight"),
        "lambda_quality": (1.0, "fidelity loss weight"),
        "lambda_lat": (6.4e-3, "latent separation weight"),
        "lambda_traj": (6.4e-3, "trajectory diversion weight"),
        "lambda_xattn": (6.4e-3, "cross-attention diversion weight"),
        "lambda_feat": (0.1, "encoder-feature term inside the fidelity loss"),
        "epochs": (12, "passes over the training views"),
        "views_per_iter": (4, "views per iteration"),
        "seed": (0, "sampling seed"),
        "adam_eps": (1e-15, "Adam epsilon"),
        "beta1": (0.9, "Adam beta1"),
        "beta2": (0.999, "Adam beta2"),
        "t_min": (200, "smallest sampled timestep"),
        "t_max": (800, "largest sampled timestep"),
        "adv_groups": (list(GROUPS), "groups receiving adversarial gradients"),
        "update_groups": (list(GROUPS), "groups the optimizer may change"),
        "lr": ({}, "per-group learning rates, e.g. {\"color_dc\": 0.005}"),
        "rho": ({}, "per-group adversarial role coefficients"),
    },
    "edit": {
        "prompt": ("turn the object into a blue glass vase", "target edit prompt"),
        "prompt_src": ("a toy object standing on a textured floor", "source description"),
        "variant": ("dge_like", "dge_like or ge_like"),
        "rounds": (3, "render-edit-update rounds"),
        "strength": (1.0, "edit strength"),
        "fit_steps": (200, "refit steps per round"),
        "editor_seed": (None, "editor seed (default depends on variant)"),
        "t_edit": (600, "edit timestep"),
        "seed": (0, "edit sampling seed"),
    },
    "robustness": {
        "noise": (0.01, "image noise std"),
        "rotation": (math.pi / 6, "max rotation angle (radians)"),
        "scaling": (0.75, "scale factor"),
        "blur": (0.1, "blur std (pixels)"),
        "crop": (0.4, "kept area fraction"),
        "jpeg": (50, "JPEG quality"),
        "model_noise": (0.05, "Gaussian parameter noise std"),
        "model_prune": (0.1, "pruned fraction"),
        "model_clone": (0.1, "cloned fraction"),
        "seed": (0, "distortion seed"),
    },
    "metrics": {
        "embed_seed": (0, "surrogate image/text embedder seed"),
    },
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def config_keys_help() -> str:
    lines = ["config keys (JSON object of sections; override with --set section.key=value):"]
    for sec, keys in SCHEMA.items():
        for k, (default, text) in keys.items():
            lines.append(f"  {sec}.{k} = {json.dumps(default)}  # {text}")
    return "\n".join(lines)


def _check_type(sec, key, value):
    default = SCHEMA[sec][key][0]
    where = f"{sec}.{key}"
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise CliError(EXIT_CONFIG, f"{where} must be an integer or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise CliError(EXIT_CONFIG, f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError(EXIT_CONFIG, f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError(EXIT_CONFIG, f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise CliError(EXIT_CONFIG, f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(v in GROUPS for v in value):
            raise CliError(EXIT_CONFIG, f"{where} must be a list drawn from {list(GROUPS)}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise CliError(EXIT_CONFIG, f"{where} must be an object")
        for g, v in value.items():
            if g not in GROUPS:
                raise CliError(EXIT_CONFIG, f"{where}: unknown parameter group {g!r}")
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise CliError(EXIT_CONFIG, f"{where}.{g} must be a number")
        return {g: float(v) for g, v in value.items()}
    raise AssertionError(where)


def load_config(path=None, overrides=()) -> dict:
    cfg = {sec: {k: v[0] for k, v in keys.items()} for sec, keys in SCHEMA.items()}
    entries = []
    if path is not None:
        if not os.path.exists(path):
            raise CliError(EXIT_MISSING, f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as e:
            raise CliError(EXIT_CONFIG, f"{path}: invalid JSON: {e}") from None
        if not isinstance(data, dict):
            raise CliError(EXIT_CONFIG, f"{path}: top level must be an object")
        for sec, body in data.items():
            if sec not in SCHEMA:
                raise CliError(EXIT_CONFIG, f"unknown config section {sec!r}")
            if not isinstance(body, dict):
                raise CliError(EXIT_CONFIG, f"section {sec!r} must be an object")
            entries += [(sec, k, v) for k, v in body.items()]
    for item in overrides:
        name, sep, raw = item.partition("=")
        sec, dot, key = name.partition(".")
        if not sep or not dot:
            raise CliError(EXIT_CONFIG, f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(SCHEMA.get(sec, {}).get(key, (None,))[0], str) and not isinstance(value, str):
            value = raw
        entries.append((sec, key, value))
    for sec, key, value in entries:
        if sec not in SCHEMA:
            raise CliError(EXIT_CONFIG, f"unknown config section {sec!r}")
        if key not in SCHEMA[sec]:
            raise CliError(EXIT_CONFIG, f"unknown config key {sec}.{key}")
        cfg[sec][key] = _check_type(sec, key, value)
    return cfg


# ---------------------------------------------------------------------------
# config -> library objects; invalid values are config errors


def _config_values(fn):
    def wrapped(*a, **kw):
        try:
            return fn(*a, **kw)
        except (ValueError, KeyError) as e:
            raise CliError(EXIT_CONFIG, f"invalid config value: {e}") from None
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped

@_config_values
def _views(cfg, which="train"):
    from .renderer import orbit_views
    v = cfg["views"]
    if which == "train":
        return orbit_views(v["train"], v["width"], v["height"], v["radius"], fov_deg=v["fov_deg"],
                           prefix="t")
    return orbit_views(v["eval"], v["width"], v["height"], v["radius"], fov_deg=v["fov_deg"],
                       phase=0.5, prefix="e")


@_config_values
def _key(cfg):
    from .watermark import WatermarkKey
    k, v = cfg["key"], cfg["views"]
    return WatermarkKey(k["seed"], k["k"], v["height"], v["width"], gain=k["gain"],
                        block=k["block"], chroma=k["chroma"], highpass=k["highpass"])


def _message(cfg, override=None):
    from .watermark import Message
    text = override if override is not None else cfg["message"]["bits"]
    if text:
        if os.path.exists(text):
            with open(text, encoding="utf-8") as fh:
                text = fh.read().strip()
        return Message.from_string(text)
    return Message.random(cfg["key"]["k"], cfg["message"]["seed"])


@_config_values
def protect_config(cfg, workers=1):
    from .protect import ProtectConfig
    p = cfg["protect"]
    names = ("lambda_adv", "lambda_msg", "lambda_quality", "lambda_lat", "lambda_traj",
             "lambda_xattn", "lambda_feat", "epochs", "views_per_iter", "seed", "adam_eps")
    return ProtectConfig(**{n: p[n] for n in names}, rho=p["rho"], lr=p["lr"],
                         betas=(p["beta1"], p["beta2"]), t_range=(p["t_min"], p["t_max"]),
                         adv_groups=tuple(p["adv_groups"]), update_groups=tuple(p["update_groups"]),
                         workers=workers)


@_config_values
def edit_config(cfg, workers=1):
    from .editloop import EditConfig
    e = cfg["edit"]
    return EditConfig(prompt=e["prompt"], variant=e["variant"], rounds=e["rounds"],
                      strength=e["strength"], fit_steps=e["fit_steps"], editor_seed=e["editor_seed"],
                      t_edit=e["t_edit"], seed=e["seed"], workers=workers)


@_config_values
def _specs(cfg):
    from .robustness import DistortionSpec
    r = cfg["robustness"]
    return [DistortionSpec(k, r[c], r["seed"]) for k, c in
            (("noise", "noise"), ("rotation", "rotation"), ("scaling", "scaling"),
             ("blur", "blur"), ("crop", "crop"), ("jpeg_like", "jpeg"))]


def _model_distortions(cfg):
    r = cfg["robustness"]
    return {"noise": r["model_noise"], "prune": r["model_prune"], "clone": r["model_clone"]}


def read_prompts(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    prompts = [ln for ln in lines if ln and not ln.startswith("#")]
    if not prompts:
        raise CliError(EXIT_FORMAT, f"{path}: no prompts")
    return prompts


def _need(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise CliError(EXIT_MISSING, f"input not found: {p}")


def _load_scene(path):
    from .scene import scene_load
    _need(path)
    return scene_load(path)


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands

def cmd_scene_gen(args, cfg):
    from .scene import make_toy_scene, scene_save
    s = cfg["scene"]
    scene = make_toy_scene(s["kind"], s["n"], s["seed"])
    scene_save(scene, args.out)
    print(f"wrote {args.out}: {len(scene)} Gaussians, id {scene.scene_id}")


def cmd_render(args, cfg):
    from .ppm import write_ppm
    from .renderer import render
    scene = _load_scene(args.scene)
    os.makedirs(args.out_dir, exist_ok=True)
    for cam in _views(cfg, args.views):
        write_ppm(os.path.join(args.out_dir, f"{cam.view_id}.ppm"),
                  render(scene, cam, workers=args.workers).image)
    print(f"wrote {cfg['views'][args.views]} views to {args.out_dir}")


def cmd_mask_build(args, cfg):
    from .ppm import read_pgm, write_pgm
    from .selection import build_mask, procedural_mask, write_mask_csv
    scene = _load_scene(args.scene)
    views = _views(cfg, "train")
    m = cfg["mask"]
    if args.mask_dir:
        masks = []
        for cam in views:
            p = os.path.join(args.mask_dir, f"{cam.view_id}.pgm")
            _need(p)
            masks.append(read_pgm(p))
    else:
        masks = [procedural_mask(scene, cam, m["label"], args.workers) for cam in views]
        if args.write_masks:
            os.makedirs(args.write_masks, exist_ok=True)
            for cam, mk in zip(views, masks):
                write_pgm(os.path.join(args.write_masks, f"{cam.view_id}.pgm"), mk)
    mask = build_mask(scene, views, masks, m["tau"], m["gamma"], m["mode"],
                      m["threshold"] if m["mode"] == "hard" else None, args.workers)
    write_mask_csv(mask, args.out)
    if args.saliency:
        from .editor import build_editor
        from .selection import edit_update_gradient, saliency_export
        e = cfg["edit"]
        g = edit_update_gradient(scene, views, build_editor(cfg["editor"]["seed"]), e["prompt"],
                                 e["strength"], e["t_edit"], e["seed"], args.workers)
        saliency_export(g, scene, args.saliency)
    print(f"wrote {args.out}: {int(np.sum(mask.m > 0))} of {len(mask)} Gaussians selected, "
          f"mean m {float(np.mean(mask.m)):.4f}")


def cmd_protect(args, cfg):
    from .editloop import DEFAULT_PROMPTS
    from .editor import build_editor
    from .protect import protect
    from .scene import scene_save
    from .selection import read_mask_csv
    scene = _load_scene(args.scene)
    _need(args.mask, args.prompts)
    mask = read_mask_csv(args.mask, cfg["mask"]["tau"], cfg["mask"]["gamma"]) if args.mask else None
    prompts = read_prompts(args.prompts) if args.prompts else list(DEFAULT_PROMPTS)
    key, msg = _key(cfg), _message(cfg)
    pc = protect_config(cfg, args.workers)
    prot, report = protect(scene, pc, key, msg, mask, build_editor(cfg["editor"]["seed"]), prompts,
                           _views(cfg, "train"), _views(cfg, "eval"))
    os.makedirs(args.out_dir, exist_ok=True)
    scene_save(prot, os.path.join(args.out_dir, "protected.gsplat"))
    key.save(os.path.join(args.out_dir, "key.json"))
    with open(os.path.join(args.out_dir, "message.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{msg}\n")
    report.write_csv(os.path.join(args.out_dir, "report.csv"))
    report.write_summary(os.path.join(args.out_dir, "summary.json"))
    # worker count does not change results, so it stays out of the record
    saved = {k: v for k, v in pc.to_dict().items() if k != "workers"}
    _write_json(saved, os.path.join(args.out_dir, "protect_config.json"))
    print(f"bit_accuracy {report.bit_accuracy:.4f} psnr {report.psnr:.2f} "
          f"iterations {report.iterations}")


def cmd_decode(args, cfg):
    from .ppm import read_ppm
    from .renderer import render
    from .watermark import WatermarkKey, bit_accuracy, decode_bits
    _need(args.key)
    key = WatermarkKey.load(args.key)
    msg = _message(cfg, args.message)
    if args.scene:
        scene = _load_scene(args.scene)
        images = {c.view_id: render(scene, c, workers=args.workers).image for c in _views(cfg, "eval")}
    elif args.images:
        _need(*args.images)
        images = {os.path.basename(p): read_ppm(p) for p in args.images}
    else:
        raise CliError(EXIT_USAGE, "decode needs --scene or image files")
    per = {}
    for name, img in images.items():
        decoded = decode_bits(img, key)
        per[name] = bit_accuracy(decoded, msg) if msg is not None else None
        if args.verbose:
            print(f"{name} {decoded}")
    acc = float(np.mean(list(per.values())))
    print(f"bit_accuracy {acc:.4f}")
    if args.out:
        _write_json({"bit_accuracy": acc, "per_view": per}, args.out)


def cmd_edit(args, cfg):
    from .editloop import make_editor, run_edit
    from .ppm import write_ppm
    from .scene import scene_save
    scene = _load_scene(args.scene)
    ec = edit_config(cfg, args.workers)
    views = _views(cfg, "train")
    res = run_edit(scene, views, ec, make_editor(ec))
    os.makedirs(args.out_dir, exist_ok=True)
    scene_save(res.scene, os.path.join(args.out_dir, "edited.gsplat"))
    for vid, outs in res.edited.items():
        for r, img in enumerate(outs):
            write_ppm(os.path.join(args.out_dir, f"edit{r}_{vid}.ppm"), img)
    for vid, img in res.renders.items():
        write_ppm(os.path.join(args.out_dir, f"final_{vid}.ppm"), img)
    print(f"final fit loss {res.fit_losses[-1][-1]:.5f}")


def cmd_distort(args, cfg):
    from .ppm import read_ppm, write_ppm
    from .robustness import DistortionSpec, distort_image, distort_scene
    from .scene import scene_save
    seed = cfg["robustness"]["seed"] if args.seed is None else args.seed
    if args.kind in ("model_noise", "model_prune", "model_clone"):
        scene = _load_scene(args.input)
        param = cfg["robustness"][args.kind] if args.param is None else args.param
        scene_save(distort_scene(scene, args.kind[6:], param, seed), args.out)
    else:
        _need(args.input)
        col = "jpeg" if args.kind == "jpeg_like" else args.kind
        param = cfg["robustness"][col] if args.param is None else args.param
        view = args.view if args.view is not None else os.path.splitext(os.path.basename(args.input))[0]
        write_ppm(args.out, distort_image(read_ppm(args.input), DistortionSpec(args.kind, param, seed), view))
    print(f"wrote {args.out}")


def _row_for(original, protected, key, msg, cfg, method, workers, edited_orig=None):
    """One metrics row: traceability, edit deterrence and fidelity of ``protected``."""
    from .editloop import make_editor, run_edit
    from .metrics import SucpsRow, build_embedders, clip_metrics, feat_lpips, psnr, ssim
    from .renderer import render
    from .watermark import bit_accuracy, decode_bits
    ev = _views(cfg, "eval")
    ec = edit_config(cfg, workers)
    editor = make_editor(ec)
    ref = [render(original, c, workers=workers).image for c in ev]
    img = [render(protected, c, workers=workers).image for c in ev]
    acc = None
    if key is not None:
        acc = float(np.mean([bit_accuracy(decode_bits(i, key), msg) for i in img]))
    if edited_orig is None:
        edited_orig = run_edit(original, ev, ec, editor)
    edited = run_edit(protected, ev, ec, editor)
    cm = clip_metrics([edited_orig.renders[c.view_id] for c in ev], [edited.renders[c.view_id] for c in ev],
                      ref, img, cfg["edit"]["prompt_src"], ec.prompt,
                      build_embedders(cfg["metrics"]["embed_seed"]))
    lp = float(np.mean([feat_lpips(a, b, editor) for a, b in zip(img, ref)]))
    return SucpsRow(method, acc, cm["clip"]["diff"], cm["clipT"]["diff"], cm["clipD"]["diff"],
                    float(np.mean([psnr(a, b) for a, b in zip(img, ref)])),
                    float(np.mean([ssim(a, b) for a, b in zip(img, ref)])), max(lp, 1e-12))


def cmd_metrics(args, cfg):
    from .metrics import read_rows_csv, write_rows_csv
    from .watermark import WatermarkKey
    original = _load_scene(args.original)
    protected = _load_scene(args.protected)
    _need(args.key)
    key = WatermarkKey.load(args.key) if args.key else None
    msg = _message(cfg, args.message) if key is not None else None
    row = _row_for(original, protected, key, msg, cfg, args.method, args.workers)
    rows = read_rows_csv(args.out) if args.append and os.path.exists(args.out) else []
    rows = [r for r in rows if r.method != row.method] + [row]
    write_rows_csv(rows, args.out)
    print(f"{row.method}: bit_acc {row.bit_acc} delta_clip {row.delta_clip:.4f} "
          f"psnr {row.psnr:.2f} ssim {row.ssim:.4f}")


def cmd_sucps(args, cfg):
    from .metrics import read_rows_csv, sucps, sucps_against, write_scores_csv
    _need(args.rows, args.reference)
    rows = read_rows_csv(args.rows)
    scores = sucps_against(read_rows_csv(args.reference), rows) if args.reference else sucps(rows)
    if args.out:
        write_scores_csv(scores, args.out, args.digits)
    for s in scores:
        print(f"{s.method},{s.T:.4f},{s.E:.4f},{s.F:.4f},{s.sucps:.4f}")


def _md_table(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(x) for x in r) + " |" for r in rows]
    return "\n".join(out)


def cmd_report(args, cfg):
    from .metrics import read_rows_csv, sucps
    from .robustness import AFTER_EDIT_HEADER, WM_HEADER, read_table_csv
    _need(args.rows, args.wm_robustness, args.after_edit)
    rows = read_rows_csv(args.rows)
    scores = {s.method: s for s in sucps(rows)}
    body = []
    for r in rows:
        s = scores[r.method]
        body.append([r.method, "N/A" if r.bit_acc is None else f"{100 * r.bit_acc:.2f}",
                     f"{r.delta_clip:.4f}", f"{r.delta_clipT:.4f}", f"{r.delta_clipD:.4f}",
                     f"{r.psnr:.2f}", f"{r.ssim:.4f}", f"{r.lpips:.4f}", f"{s.sucps:.4f}"])
    parts = ["## Summary", "", _md_table(["method", "bit acc (%)", "dCLIP", "dCLIP-T", "dCLIP-D",
                                          "PSNR", "SSIM", "LPIPS", "sUCPS"], body)]
    if args.wm_robustness:
        t = read_table_csv(args.wm_robustness, WM_HEADER)
        parts += ["", "## Watermark robustness (bit acc %)", "",
                  _md_table(WM_HEADER, [[r["method"]] + [f"{100 * r[h]:.2f}" for h in WM_HEADER[1:]]
                                        for r in t])]
    if args.after_edit:
        t = read_table_csv(args.after_edit, AFTER_EDIT_HEADER)
        parts += ["", "## Bit accuracy after editing", "",
                  _md_table(AFTER_EDIT_HEADER, [[r["method"]] + [f"{r[h]:.2f}" for h in AFTER_EDIT_HEADER[1:]]
                                                for r in t])]
    text = "\n".join(parts) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")


def cmd_robustness(args, cfg):
    from .metrics import build_embedders
    from .robustness import (ADV_HEADER, AFTER_EDIT_HEADER, WM_HEADER, adv_robustness_harness,
                             wm_after_edit_harness, wm_robustness_harness, write_table_csv)
    from .watermark import WatermarkKey
    _need(args.key)
    original = _load_scene(args.original)
    scenes = {}
    for item in args.protected:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(item))[0], item
        scenes[name] = _load_scene(path)
    key = WatermarkKey.load(args.key)
    msg = _message(cfg, args.message)
    ev = _views(cfg, "eval")
    seed = cfg["robustness"]["seed"]
    os.makedirs(args.out_dir, exist_ok=True)
    tables = set(args.tables.split(","))
    if not tables <= {"wm", "adv", "after"}:
        raise CliError(EXIT_USAGE, "--tables takes a comma list drawn from wm,adv,after")
    if "wm" in tables:
        rows = wm_robustness_harness(scenes, key, msg, ev, _specs(cfg), _model_distortions(cfg),
                                     seed, args.workers)
        write_table_csv(rows, WM_HEADER, os.path.join(args.out_dir, "wm_robustness.csv"))
    ec = edit_config(cfg, 1)
    if "adv" in tables:
        rows = adv_robustness_harness(original, scenes, ev, ec, cfg["edit"]["prompt_src"],
                                      build_embedders(cfg["metrics"]["embed_seed"]),
                                      _model_distortions(cfg), seed, workers=args.workers)
        write_table_csv(rows, ADV_HEADER, os.path.join(args.out_dir, "adv_robustness.csv"))
    if "after" in tables:
        rows = wm_after_edit_harness(scenes, key, msg, ev, ec)
        write_table_csv(rows, AFTER_EDIT_HEADER, os.path.join(args.out_dir, "wm_after_edit.csv"))
    print(f"wrote tables {sorted(tables)} to {args.out_dir}")


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")

    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="splatguard", description="Watermark and edit-deterrence protection for "
                "Gaussian splatting scenes.", epilog=config_keys_help() + "\n\n" + EXIT_HELP,
                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, text):
        sp = sub.add_parser(name, parents=[common], help=text, description=text,
                            epilog=config_keys_help() + "\n\n" + EXIT_HELP, formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    sp = add("scene-gen", cmd_scene_gen, "generate a procedural toy scene")
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render the train or eval views of a scene to PPM files")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--views", choices=("train", "eval"), default="train")

    sp = add("mask-build", cmd_mask_build, "score Gaussians against 2D masks and write the soft mask CSV")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mask-dir", help="directory of <view_id>.pgm masks (default: procedural)")
    sp.add_argument("--write-masks", help="write the procedural masks here")
    sp.add_argument("--saliency", help="also export per-Gaussian edit-update saliency CSV")

    sp = add("protect", cmd_protect, "embed the watermark and deterrence signal")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--mask", help="soft mask CSV (default: all ones)")
    sp.add_argument("--prompts", help="prompt library, one prompt per line")

    sp = add("decode", cmd_decode, "decode the message and report bit accuracy")
    sp.add_argument("--key", required=True)
    sp.add_argument("--message", help="0/1 string or file (default: from config)")
    sp.add_argument("--scene", help="decode from renders of the eval views")
    sp.add_argument("--out", help="write a JSON summary")
    sp.add_argument("--verbose", action="store_true", help="print decoded bits per image")
    sp.add_argument("images", nargs="*", help="PPM images to decode")

    sp = add("edit", cmd_edit, "run the render-edit-update attack")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = add("distort", cmd_distort, "apply one image distortion to a PPM or one model distortion to a scene")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", required=True, choices=("noise", "rotation", "scaling", "blur", "crop",
                                                      "jpeg_like", "model_noise", "model_prune",
                                                      "model_clone"))
    sp.add_argument("--param", type=float, help="distortion parameter (default: from config)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--view", help="view name keying the randomness (default: file stem)")

    sp = add("metrics", cmd_metrics, "measure one method row (traceability, deterrence, fidelity)")
    sp.add_argument("--original", required=True)
    sp.add_argument("--protected", required=True)
    sp.add_argument("--key", help="key file; omit for methods without a watermark")
    sp.add_argument("--message")
    sp.add_argument("--method", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--append", action="store_true", help="add to (or replace the row in) an existing CSV")

    sp = add("sucps", cmd_sucps, "compute sUCPS scores from a metrics CSV")
    sp.add_argument("--rows", required=True)
    sp.add_argument("--reference", help="score each row jointly with these reference rows")
    sp.add_argument("--out")
    sp.add_argument("--digits", type=int)

    sp = add("report", cmd_report, "join metric CSVs into a summary table with sUCPS")
    sp.add_argument("--rows", required=True)
    sp.add_argument("--wm-robustness")
    sp.add_argument("--after-edit")
    sp.add_argument("--out")

    sp = add("robustness", cmd_robustness, "produce the robustness tables for protected scenes")
    sp.add_argument("--original", required=True)
    sp.add_argument("--protected", required=True, nargs="+", metavar="[NAME=]PATH")
    sp.add_argument("--key", required=True)
    sp.add_argument("--message")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--tables", default="wm,adv,after")
    return p


def _fail(code, message):
    print(f"splatguard: error[{code}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .protect import NumericalError
    from .scene import SceneFormatError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise CliError(EXIT_USAGE, "--workers must be >= 1")
        cfg = load_config(args.config, args.set)
        if getattr(args, "out", None):
            os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        args.func(args, cfg)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except CliError as e:
        return _fail(e.code, e)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, e)
    except (NumericalError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, e)
    except (SceneFormatError, ValueError, KeyError) as e:
        return _fail(EXIT_FORMAT, e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
