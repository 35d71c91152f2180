"""Per-group Adam over the trainable fields of a scene (positions are never touched)."""
from __future__ import annotations

import numpy as np

from .renderer import GradientBundle
from .scene import GaussianScene, ParamGroup, TRAINABLE_GROUPS, normalize_quaternions, scene_with


class GroupAdam:
    def __init__(self, lrs: dict, betas=(0.9, 0.999), eps: float = 1e-15, groups=TRAINABLE_GROUPS):
        self.lrs = {ParamGroup(g): float(v) for g, v in lrs.items()}
        self.b1, self.b2 = betas
        self.eps = eps
        self.groups = tuple(g for g in groups if g != ParamGroup.POSITION
                            and self.lrs.get(g, 0.0) != 0.0)
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, scene: GaussianScene, grad: GradientBundle) -> GaussianScene:
        grad.check_matches(scene)
        self.t += 1
        updates = {}
        for g in self.groups:
            gr = grad.get(g)
            if g not in self.m:
                self.m[g] = np.zeros_like(gr)
                self.v[g] = np.zeros_like(gr)
            self.m[g] = self.b1 * self.m[g] + (1 - self.b1) * gr
            self.v[g] = self.b2 * self.v[g] + (1 - self.b2) * gr * gr
            mhat = self.m[g] / (1 - self.b1 ** self.t)
            vhat = self.v[g] / (1 - self.b2 ** self.t)
            new = scene.group(g) - self.lrs[g] * mhat / (np.sqrt(vhat) + self.eps)
            if g == ParamGroup.ROTATION:
                new = normalize_quaternions(new)
            updates[g] = new
        return scene_with(scene, updates) if updates else scene
