"""Joint watermark + edit-deterrence optimization of a Gaussian scene.

Each iteration renders a small batch of training views. Two losses are computed per view:

* the scene-wide watermark loss: message BCE plus fidelity to the frozen reference
  render;
* the adversarial loss: fidelity minus the three editor separation terms.

The adversarial gradient is scaled per Gaussian by the selection mask, per parameter
group by a role coefficient, and globally by ``lambda_adv``.  It is added to the
unscaled watermark gradient, and the sum drives a per-group Adam step.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .editor import SurrogateEditor, embed_prompt, s_lat, s_traj, s_xattn
from .metrics import psnr
from .optim import GroupAdam
from .renderer import CameraView, GradientBundle, render, render_vjp_many
from .scene import GaussianScene, ParamGroup, TRAINABLE_GROUPS
from .selection import SoftMask
from .watermark import Message, WatermarkKey, bit_accuracy, decode_bits, msg_loss, quality_loss

DEFAULT_RHO = {
    ParamGroup.POSITION: 0.0,
    ParamGroup.SCALE: 1.0,
    ParamGroup.ROTATION: 1.0,
    ParamGroup.OPACITY: 0.1,
    ParamGroup.COLOR_DC: 0.1,
    ParamGroup.COLOR_REST: 1.0,
}
DEFAULT_LR = {
    ParamGroup.SCALE: 2e-3,
    ParamGroup.ROTATION: 2e-3,
    ParamGroup.OPACITY: 5e-3,
    ParamGroup.COLOR_DC: 5e-3,
    ParamGroup.COLOR_REST: 5e-3,
}


class NumericalError(RuntimeError):
    pass


def _group_dict(d, default):
    out = dict(default)
    for k, v in (d or {}).items():
        out[ParamGroup(k) if not isinstance(k, ParamGroup) else k] = float(v)
    return out


@dataclass
class ProtectConfig:
    lambda_adv: float = 1.0
    lambda_msg: float = 0.1
    lambda_quality: float = 1.0
    lambda_lat: float = 1e-4
    lambda_traj: float = 1e-4
    lambda_xattn: float = 1e-4
    lambda_feat: float = 0.1
    rho: dict = field(default_factory=lambda: dict(DEFAULT_RHO))
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    epochs: int = 8
    views_per_iter: int = 4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    t_range: tuple = (200, 800)
    seed: int = 0
    adv_groups: tuple = TRAINABLE_GROUPS      # groups that receive adversarial gradients
    update_groups: tuple = TRAINABLE_GROUPS   # groups the optimizer may change
    workers: int = 1

    def __post_init__(self):
        self.rho = _group_dict(self.rho, DEFAULT_RHO)
        self.lr = _group_dict(self.lr, DEFAULT_LR)
        self.adv_groups = tuple(ParamGroup(g) for g in self.adv_groups)
        self.update_groups = tuple(ParamGroup(g) for g in self.update_groups)
        self.betas = tuple(float(b) for b in self.betas)
        self.t_range = tuple(int(t) for t in self.t_range)
        for name in ("lambda_adv", "lambda_msg", "lambda_quality", "lambda_lat",
                     "lambda_traj", "lambda_xattn", "lambda_feat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.rho[ParamGroup.POSITION] != 0.0:
            raise ValueError("rho for positions must be 0")
        if ParamGroup.POSITION in self.update_groups:
            raise ValueError("positions are never optimized")
        if self.epochs < 1 or self.views_per_iter < 1:
            raise ValueError("epochs and views_per_iter must be >= 1")
        lo, hi = self.t_range
        if not 101 <= lo <= hi <= 1000:
            raise ValueError("t_range must satisfy 101 <= lo <= hi <= 1000")

    def effective_rho(self) -> dict:
        return {g: (self.rho[g] if g in self.adv_groups else 0.0) for g in ParamGroup}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho"] = {g.value: v for g, v in self.rho.items()}
        d["lr"] = {g.value: v for g, v in self.lr.items()}
        d["adv_groups"] = [g.value for g in self.adv_groups]
        d["update_groups"] = [g.value for g in self.update_groups]
        d["betas"] = list(self.betas)
        d["t_range"] = list(self.t_range)
        return d


TRACE_KEYS = ("loss_wm", "loss_msg", "loss_quality", "loss_adv", "loss_render",
              "s_lat", "s_traj", "s_xattn", "bit_acc_train")


@dataclass
class ProtectReport:
    traces: dict
    iterations: int
    bit_accuracy: float | None = None
    psnr: float | None = None
    per_view_bit_accuracy: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *TRACE_KEYS])
            for i in range(self.iterations):
                w.writerow([i] + [repr(float(self.traces[k][i])) for k in TRACE_KEYS])

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "bit_accuracy": self.bit_accuracy,
            "psnr": self.psnr,
            "per_view_bit_accuracy": self.per_view_bit_accuracy,
            "final": {k: float(v[-1]) for k, v in self.traces.items() if v},
        }

    def write_summary(self, path, include_time: bool = False) -> None:
        d = self.summary()
        if include_time:
            d["wall_clock"] = self.wall_clock
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# per-view terms; each returns a scalar and an image cotangent

def _wm_view(image, ref, key, message, cfg: ProtectConfig, editor):
    lm, gm = msg_loss(image, key, message) if cfg.lambda_msg else (0.0, 0.0)
    if cfg.lambda_quality:
        lq, gq = quality_loss(image, ref, editor, cfg.lambda_feat)
    else:
        lq, gq = 0.0, 0.0
    loss = cfg.lambda_msg * lm + cfg.lambda_quality * lq
    cot = cfg.lambda_msg * gm + cfg.lambda_quality * gq + np.zeros_like(image)
    return loss, cot, lm, lq


def _adv_view(image, ref, editor, prompt, t, eps, cfg: ProtectConfig):
    diff = image - ref
    l_render = float(np.mean(np.abs(diff)))
    cot = np.sign(diff) / diff.size
    terms = {}
    for name, lam, fn in (("s_lat", cfg.lambda_lat, lambda: s_lat(image, ref, editor)),
                          ("s_traj", cfg.lambda_traj, lambda: s_traj(image, ref, prompt, t, eps, editor)),
                          ("s_xattn", cfg.lambda_xattn, lambda: s_xattn(image, ref, prompt, t, eps, editor))):
        if lam:
            v, g = fn()
            cot = cot - lam * g
        else:
            v = 0.0
        terms[name] = v
    loss = l_render - cfg.lambda_lat * terms["s_lat"] - cfg.lambda_traj * terms["s_traj"] \
        - cfg.lambda_xattn * terms["s_xattn"]
    return loss, cot, l_render, terms


def reference_renders(scene_ref: GaussianScene, views, workers=1) -> dict:
    return {v.view_id: render(scene_ref, v, workers=workers).image for v in views}


def _refs_for(refs, views):
    missing = [v.view_id for v in views if v.view_id not in refs]
    if missing:
        raise KeyError(f"missing reference render for view(s) {missing}")
    return [refs[v.view_id] for v in views]


def wm_loss(scene_prot, refs: dict, key, message, views, cfg: ProtectConfig = None,
            editor: SurrogateEditor = None):
    """Mean over ``views`` of lambda_msg*L_msg + lambda_quality*L_quality, with its gradient."""
    cfg = cfg or ProtectConfig()
    views = list(views)
    total, bundle = 0.0, GradientBundle.zeros(len(scene_prot))
    for cam, ref in zip(views, _refs_for(refs, views)):
        img = render(scene_prot, cam, workers=cfg.workers).image
        loss, cot, _, _ = _wm_view(img, ref, key, message, cfg, editor)
        total += loss / len(views)
        if np.any(cot):
            bundle = bundle + render_vjp_many(scene_prot, cam, [cot / len(views)], cfg.workers)[0]
    return total, bundle


def adv_loss(scene_prot, refs: dict, editor, prompt, t, eps, views, cfg: ProtectConfig = None):
    """Mean over ``views`` of L_render - sum lambda*S, and its raw (unmodulated) gradient.

    ``t`` and ``eps`` are either shared by all views or given per view as sequences.
    """
    cfg = cfg or ProtectConfig()
    if isinstance(prompt, str):
        prompt = embed_prompt(prompt, editor.seed)
    views = list(views)
    ts = list(t) if np.ndim(t) else [t] * len(views)
    epss = list(eps) if isinstance(eps, (list, tuple)) else [eps] * len(views)
    total, bundle = 0.0, GradientBundle.zeros(len(scene_prot))
    for cam, ref, tv, ev in zip(views, _refs_for(refs, views), ts, epss):
        img = render(scene_prot, cam, workers=cfg.workers).image
        loss, cot, _, _ = _adv_view(img, ref, editor, prompt, tv, ev, cfg)
        total += loss / len(views)
        if np.any(cot):
            bundle = bundle + render_vjp_many(scene_prot, cam, [cot / len(views)], cfg.workers)[0]
    return total, bundle


def modulate(bundle_adv: GradientBundle, mask, rho: dict, lambda_adv: float,
             bundle_wm: GradientBundle) -> GradientBundle:
    """out[i][k] = wm[i][k] + lambda_adv * m_i * rho_k * adv[i][k]."""
    m = np.asarray(mask.m if isinstance(mask, SoftMask) else mask, dtype=np.float64)
    n = len(bundle_wm)
    if len(bundle_adv) != n or m.shape != (n,):
        raise ValueError("bundle and mask sizes differ")
    out = {}
    for g in ParamGroup:
        a, w = bundle_adv.get(g), bundle_wm.get(g)
        if a.shape != w.shape:
            raise ValueError(f"group {g.value}: shapes {a.shape} and {w.shape} differ")
        r = float(rho.get(g, 0.0))
        if lambda_adv == 0 or r == 0:
            out[g] = w.copy()
        else:
            scale = (lambda_adv * r) * m.reshape((n,) + (1,) * (a.ndim - 1))
            out[g] = w + scale * a
    return GradientBundle(*(out[g] for g in ParamGroup))


# ---------------------------------------------------------------------------

def _batches(rng, n_views, per_iter):
    order = rng.permutation(n_views)
    return [order[i:i + per_iter] for i in range(0, n_views, per_iter)]


def protect(scene: GaussianScene, config: ProtectConfig, key: WatermarkKey, message: Message,
            mask: SoftMask | None, editor: SurrogateEditor, prompts, views,
            eval_views=None, callback=None):
    """Run the joint optimization; returns the protected scene and a report."""
    cfg = config
    start = time.perf_counter()
    views = list(views)
    if not views:
        raise ValueError("no training views")
    use_adv = cfg.lambda_adv != 0
    if use_adv and not prompts:
        raise ValueError("prompt library is empty")
    if mask is None:
        mask = SoftMask.ones(len(scene))
    if len(mask) != len(scene):
        raise ValueError(f"mask has {len(mask)} entries for {len(scene)} Gaussians")
    prompt_embs = [embed_prompt(p, editor.seed) for p in prompts] if use_adv else []
    reference = scene
    ref_hash = reference.fingerprint()
    refs = reference_renders(reference, views, cfg.workers)
    rho = cfg.effective_rho()
    adam = GroupAdam({g: cfg.lr[g] for g in cfg.update_groups}, cfg.betas, cfg.adam_eps,
                     cfg.update_groups)
    rng = np.random.default_rng([cfg.seed, 41])
    lat_shape = editor.latent_shape(views[0].height, views[0].width)
    traces = {k: [] for k in TRACE_KEYS}
    prot = scene
    it = 0
    for _epoch in range(cfg.epochs):
        for batch in _batches(rng, len(views), cfg.views_per_iter):
            pidx = int(rng.integers(len(prompt_embs))) if use_adv else -1
            nb = len(batch)
            g_wm = GradientBundle.zeros(len(prot))
            g_adv = GradientBundle.zeros(len(prot))
            rec = dict.fromkeys(TRACE_KEYS, 0.0)
            for vi in batch:
                cam = views[vi]
                t = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
                eps = rng.standard_normal(lat_shape)
                img = render(prot, cam, workers=cfg.workers).image
                ref = refs[cam.view_id]
                lw, cw, lm, lq = _wm_view(img, ref, key, message, cfg, editor)
                cots = [cw / nb]
                rec["loss_wm"] += lw / nb
                rec["loss_msg"] += lm / nb
                rec["loss_quality"] += lq / nb
                rec["bit_acc_train"] += bit_accuracy(decode_bits(img, key), message) / nb
                if use_adv:
                    la, ca, lr_, terms = _adv_view(img, ref, editor, prompt_embs[pidx], t, eps, cfg)
                    cots.append(ca / nb)
                    rec["loss_adv"] += la / nb
                    rec["loss_render"] += lr_ / nb
                    for k2, v2 in terms.items():
                        rec[k2] += v2 / nb
                grads = render_vjp_many(prot, cam, cots, cfg.workers)
                g_wm = g_wm + grads[0]
                if use_adv:
                    g_adv = g_adv + grads[1]
            for k2, v2 in rec.items():
                if not math.isfinite(v2):
                    raise NumericalError(f"non-finite {k2} at iteration {it}")
                traces[k2].append(v2)
            total = modulate(g_adv, mask, rho, cfg.lambda_adv, g_wm)
            if not np.all(np.isfinite(total.flat())):
                raise NumericalError(f"non-finite gradient at iteration {it}")
            prot = adam.step(prot, total)
            if callback is not None:
                callback(it, prot, rec)
            it += 1
    if reference.fingerprint() != ref_hash:
        raise RuntimeError("reference scene changed during protection")
    report = ProtectReport(traces, it)
    if eval_views:
        accs, ps = {}, []
        for cam in eval_views:
            img = render(prot, cam, workers=cfg.workers).image
            accs[cam.view_id] = bit_accuracy(decode_bits(img, key), message)
            ps.append(psnr(img, render(reference, cam, workers=cfg.workers).image))
        report.per_view_bit_accuracy = accs
        report.bit_accuracy = float(np.mean(list(accs.values())))
        report.psnr = float(np.mean(ps))
    report.wall_clock = time.perf_counter() - start
    return prot, report


def ema(values, window: int = 50) -> np.ndarray:
    """Exponential moving average with smoothing 2/(window+1)."""
    a = 2.0 / (window + 1)
    out = np.empty(len(values))
    acc = values[0] if len(values) else 0.0
    for i, v in enumerate(values):
        acc = a * v + (1 - a) * acc if i else v
        out[i] = acc
    return out
