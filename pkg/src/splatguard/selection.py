"""Mask-driven Gaussian selection: contribution scores, soft/hard coefficients, saliency."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .renderer import CameraView, GradientBundle, render, render_vjp
from .scene import GaussianScene, ParamGroup

EPS = 1e-8
DEFAULT_TAU = 0.6
DEFAULT_GAMMA = 2.0
DEFAULT_MASK_VIEWS = 24


@dataclass(frozen=True, eq=False)
class SoftMask:
    m: np.ndarray
    s: np.ndarray
    tau: float = DEFAULT_TAU
    gamma: float = DEFAULT_GAMMA
    mode: str = "soft"               # "soft" or "hard"
    threshold: float | None = None   # hard mode only
    views_used: tuple = field(default_factory=tuple)

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).ravel()
        s = np.array(self.s, dtype=np.float64).ravel()
        if m.shape != s.shape:
            raise ValueError("m and s must have the same length")
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("mask coefficients must lie in [0, 1]")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.mode == "hard" and not np.all((m == 0) | (m == 1)):
            raise ValueError("hard mask coefficients must be 0 or 1")
        m.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "views_used", tuple(self.views_used))

    def __len__(self):
        return self.m.size

    @classmethod
    def ones(cls, n: int) -> "SoftMask":
        return cls(np.ones(n), np.ones(n), mode="soft")


def gaussian_scores(scene: GaussianScene, views, masks, workers: int = 1) -> np.ndarray:
    """s_i = sum_v sum_p w_i(p) M_v(p) / (sum_v sum_p w_i(p) + eps)."""
    views, masks = list(views), list(masks)
    if len(views) != len(masks):
        raise ValueError(f"{len(views)} views but {len(masks)} masks")
    num = np.zeros(len(scene))
    den = np.zeros(len(scene))
    for cam, mask in zip(views, masks):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (cam.height, cam.width):
            raise ValueError(f"mask for {cam.view_id} has shape {mask.shape}, "
                             f"expected {(cam.height, cam.width)}")
        r = render(scene, cam, mask=mask, workers=workers)
        num += r.contrib_mask_num
        den += r.contrib_den
    return np.clip(num / (den + EPS), 0.0, 1.0)


def soft_coefficients(s, tau: float = DEFAULT_TAU, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if not tau > 0 or not gamma > 0:
        raise ValueError("tau and gamma must be positive")
    s = np.asarray(s, dtype=np.float64)
    return np.minimum(1.0, (np.maximum(s, 0.0) / (tau + EPS)) ** gamma)


def hard_coefficients(s, threshold: float) -> np.ndarray:
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    return (np.asarray(s, dtype=np.float64) >= threshold).astype(np.float64)


def build_mask(scene: GaussianScene, views, masks, tau=DEFAULT_TAU, gamma=DEFAULT_GAMMA,
               mode="soft", threshold=None, workers=1) -> SoftMask:
    views = list(views)
    s = gaussian_scores(scene, views, masks, workers)
    if mode == "soft":
        m = soft_coefficients(s, tau, gamma)
    elif mode == "hard":
        m = hard_coefficients(s, tau if threshold is None else threshold)
        threshold = tau if threshold is None else threshold
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return SoftMask(m, s, tau, gamma, mode, threshold, tuple(v.view_id for v in views))


def procedural_mask(scene: GaussianScene, camera: CameraView, label: str, workers: int = 1) -> np.ndarray:
    """Accumulated compositing weight of the Gaussians carrying ``label`` (occlusion-aware)."""
    if label not in scene.labels:
        raise KeyError(f"scene has no label {label!r}")
    ind = np.zeros((len(scene), 1))
    ind[scene.labels[label]] = 1.0
    r = render(scene, camera, features=ind, workers=workers)
    return np.clip(r.features[:, :, 0], 0.0, 1.0)


def edit_update_gradient(scene: GaussianScene, views, editor, prompt, strength: float = 1.0,
                         t: int = 600, seed: int = 0, workers: int = 1) -> GradientBundle:
    """Gradient of the l1 refit loss towards one round of edited views.

    This is the update an editing pipeline would apply to the scene; its per-Gaussian
    norm shows where edits land.
    """
    from .editor import embed_prompt
    emb = embed_prompt(prompt, editor.seed) if isinstance(prompt, str) else prompt
    rng = np.random.default_rng([seed, 67])
    views = list(views)
    total = GradientBundle.zeros(len(scene))
    for cam in views:
        img = render(scene, cam, workers=workers).image
        eps = rng.standard_normal(editor.latent_shape(cam.height, cam.width))
        diff = img - editor.edit_image(img, emb, strength, t, eps)
        total = total + render_vjp(scene, cam, np.sign(diff) / (diff.size * len(views)), workers)
    return total


def saliency(bundle: GradientBundle, scene: GaussianScene) -> np.ndarray:
    """Per-Gaussian L2 norm over all parameter-group gradients."""
    bundle.check_matches(scene)
    return np.sqrt(sum((bundle.get(g).reshape(len(scene), -1) ** 2).sum(axis=1) for g in ParamGroup))


def saliency_export(bundle: GradientBundle, scene: GaussianScene, path=None) -> np.ndarray:
    sal = saliency(bundle, scene)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "x", "y", "z", "saliency"])
            for i, (p, v) in enumerate(zip(scene.positions, sal)):
                w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(v))])
    return sal


def write_mask_csv(mask: SoftMask, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "s", "m"])
        for i, (s, m) in enumerate(zip(mask.s, mask.m)):
            w.writerow([i, repr(float(s)), repr(float(m))])


def read_mask_csv(path, tau=DEFAULT_TAU, gamma=DEFAULT_GAMMA) -> SoftMask:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "s", "m"]:
        raise ValueError(f"{path}: expected header index,s,m")
    body = np.array([[float(x) for x in r] for r in rows[1:]])
    if body.size == 0 or not np.array_equal(body[:, 0], np.arange(len(body))):
        raise ValueError(f"{path}: indices must run 0..N-1")
    return SoftMask(body[:, 2], body[:, 1], tau, gamma)
