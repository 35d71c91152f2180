"""Render-edit-update attack: repeatedly edit rendered views and refit the scene to them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .editor import SurrogateEditor, build_editor, embed_prompt
from .optim import GroupAdam
from .renderer import render, render_vjp
from .scene import GaussianScene, ParamGroup

VARIANTS = ("dge_like", "ge_like")
SOURCE_PROMPT = "a toy object standing on a textured floor"
DEFAULT_PROMPTS = (
    "turn the object into a blue glass vase",
    "make it look like a bronze statue",
    "turn it into a marble sculpture",
    "cover the scene in snow",
    "give the object a wooden texture",
)
DEFAULT_FIT_LR = {
    ParamGroup.SCALE: 5e-3,
    ParamGroup.ROTATION: 5e-3,
    ParamGroup.OPACITY: 2e-2,
    ParamGroup.COLOR_DC: 2e-2,
    ParamGroup.COLOR_REST: 1e-2,
}


@dataclass
class EditConfig:
    prompt: str = "turn the object into a blue glass vase"
    variant: str = "dge_like"
    rounds: int = 3
    strength: float = 1.0
    fit_steps: int = 200
    fit_lr: dict = field(default_factory=lambda: dict(DEFAULT_FIT_LR))
    editor_seed: int | None = None   # default: 0 for dge_like, 1 for ge_like
    t_edit: int = 600
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown edit variant {self.variant!r}")
        if self.rounds < 1 or self.fit_steps < 1:
            raise ValueError("rounds and fit_steps must be >= 1")
        if self.strength < 0:
            raise ValueError("edit strength must be non-negative")
        self.fit_lr = {ParamGroup(k): float(v) for k, v in self.fit_lr.items()}
        if ParamGroup.POSITION in self.fit_lr:
            raise ValueError("positions are frozen during fitting")

    @property
    def resolved_editor_seed(self) -> int:
        if self.editor_seed is not None:
            return int(self.editor_seed)
        return 0 if self.variant == "dge_like" else 1


def make_editor(config: EditConfig) -> SurrogateEditor:
    return build_editor(config.resolved_editor_seed)


@dataclass
class EditResult:
    scene: GaussianScene
    edited: dict           # view_id -> list of edited targets, one per round the view was edited
    renders: dict          # view_id -> render of the final edited scene
    fit_losses: list       # per round, list of per-step l1 losses


def run_edit(scene: GaussianScene, views, config: EditConfig, editor: SurrogateEditor | None = None) -> EditResult:
    views = list(views)
    if not views:
        raise ValueError("no views to edit")
    editor = editor or make_editor(config)
    prompt = embed_prompt(config.prompt, editor.seed)
    rng = np.random.default_rng([config.seed, 61, config.resolved_editor_seed])
    lat_shape = editor.latent_shape(views[0].height, views[0].width)
    w = config.workers
    targets = {v.view_id: render(scene, v, workers=w).image for v in views}
    edited = {v.view_id: [] for v in views}
    current = scene
    losses = []
    for _round in range(config.rounds):
        if config.variant == "dge_like":
            chosen = np.arange(len(views))
        else:
            chosen = np.sort(rng.choice(len(views), size=max(1, len(views) // 2), replace=False))
        for i in chosen:
            cam = views[i]
            img = render(current, cam, workers=w).image
            eps = rng.standard_normal(lat_shape)
            out = editor.edit_image(img, prompt, config.strength, config.t_edit, eps)
            targets[cam.view_id] = out
            edited[cam.view_id].append(out)
        adam = GroupAdam(config.fit_lr)
        round_losses = []
        order = []
        for _step in range(config.fit_steps):
            if not order:
                order = list(rng.permutation(len(views)))
            cam = views[order.pop()]
            img = render(current, cam, workers=w).image
            diff = img - targets[cam.view_id]
            loss = float(np.mean(np.abs(diff)))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite fit loss in round {_round}")
            round_losses.append(loss)
            grad = render_vjp(current, cam, np.sign(diff) / diff.size, workers=w)
            current = adam.step(current, grad)
        losses.append(round_losses)
    renders = {v.view_id: render(current, v, workers=w).image for v in views}
    return EditResult(current, edited, renders, losses)
