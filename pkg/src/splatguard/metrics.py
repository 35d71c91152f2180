"""Fidelity metrics, surrogate CLIP-style edit metrics and the sUCPS aggregate score."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .editor import SurrogateEditor, embed_prompt
from .imageops import area_downsample

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EMBED_DIM = 128
EMBED_GRID = 16


def _same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Mean SSIM over all fully-contained 11x11 windows, averaged over channels."""
    a, b = _same(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")

    def filt(x):
        return np.einsum("hwcij,ij->hwc", sliding_window_view(x, win.shape, axis=(0, 1)), win)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


def feat_lpips(a, b, editor: SurrogateEditor) -> float:
    a, b = _same(a, b)
    d = editor.encode(a) - editor.encode(b)
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# surrogate embedders

def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


@dataclass(frozen=True, eq=False)
class EmbedderPair:
    seed: int
    img_hidden: np.ndarray
    img_bias: np.ndarray
    img_out: np.ndarray
    txt_proj: np.ndarray

    def image(self, image) -> np.ndarray:
        x = area_downsample(np.asarray(image, dtype=np.float64), EMBED_GRID)
        h = np.tanh(self.img_hidden @ (2.0 * x.ravel() - 1.0) + self.img_bias)
        return _unit(self.img_out @ h)

    def text(self, prompt: str) -> np.ndarray:
        tokens = embed_prompt(prompt, self.seed).sequence
        return _unit(self.txt_proj @ np.tanh(tokens).mean(axis=0))


def build_embedders(seed: int = 0) -> EmbedderPair:
    rng = np.random.default_rng([seed, 53])
    d_in = EMBED_GRID * EMBED_GRID * 3
    hid = 256
    return EmbedderPair(
        seed,
        2.0 * rng.standard_normal((hid, d_in)) / np.sqrt(d_in),
        0.1 * rng.standard_normal(hid),
        rng.standard_normal((EMBED_DIM, hid)) / np.sqrt(hid),
        rng.standard_normal((EMBED_DIM, 64)) / 8.0,
    )


def _cos(a, b) -> float:
    return float(np.dot(_unit(a), _unit(b)))


def clip_metrics(edited_orig, edited_method, src_orig, src_method, prompt_src: str,
                 prompt_tgt: str, embedders: EmbedderPair) -> dict:
    """``{metric: {"orig", "method", "diff"}}`` for metric in clip, clipT, clipD.

    Image lists are aligned by evaluation view.  A zero direction vector
    (no change between source and edit) normalizes to zero and has cosine 0.
    """
    lists = [list(edited_orig), list(edited_method), list(src_orig), list(src_method)]
    if len({len(x) for x in lists}) != 1 or not lists[0]:
        raise ValueError("view lists must be non-empty and aligned")
    eo, em, so, sm = ([embedders.image(x) for x in lst] for lst in lists)
    t_tgt = embedders.text(prompt_tgt)
    t_src = embedders.text(prompt_src)
    d_t = _unit(t_tgt - t_src)
    n = len(eo)
    r_clip = sum(_cos(em[v], eo[v]) for v in range(n)) / n
    o_t = sum(_cos(eo[v], t_tgt) for v in range(n)) / n
    r_t = sum(_cos(em[v], t_tgt) for v in range(n)) / n
    o_d = sum(_cos(_unit(eo[v] - so[v]), d_t) for v in range(n)) / n
    r_d = sum(_cos(_unit(em[v] - sm[v]), d_t) for v in range(n)) / n
    out = {}
    for k, o, r in (("clip", 1.0, r_clip), ("clipT", o_t, r_t), ("clipD", o_d, r_d)):
        out[k] = {"orig": o, "method": r, "diff": o - r}
    return out


# ---------------------------------------------------------------------------
# sUCPS

@dataclass(frozen=True)
class SucpsRow:
    method: str
    bit_acc: float | None
    delta_clip: float
    delta_clipT: float
    delta_clipD: float
    psnr: float
    ssim: float
    lpips: float

    def __post_init__(self):
        if not self.lpips > 0:
            raise ValueError(f"{self.method}: lpips must be > 0")
        if not 0 < self.ssim <= 1:
            raise ValueError(f"{self.method}: ssim must lie in (0, 1]")
        if self.bit_acc is not None and not 0 <= self.bit_acc <= 1:
            raise ValueError(f"{self.method}: bit accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class SucpsScore:
    method: str
    T: float
    E: float
    F: float
    sucps: float


def _clip01(x):
    return min(1.0, max(0.0, x))


def _hm(*xs):
    if any(x <= 0 for x in xs):
        return 0.0
    return len(xs) / sum(1.0 / x for x in xs)


def _gm(*xs):
    return float(np.prod(xs)) ** (1.0 / len(xs))


def sucps(rows) -> list:
    rows = list(rows)
    if not rows:
        raise ValueError("no rows")
    marked = [r.bit_acc for r in rows if r.bit_acc is not None]
    if not marked:
        raise ValueError("at least one row needs a bit accuracy")
    b_max = max(marked)
    gaps = {k: max(abs(getattr(r, k)) for r in rows)
            for k in ("delta_clip", "delta_clipT", "delta_clipD")}
    p_max = max(r.psnr for r in rows)
    q_max = max(r.ssim for r in rows)
    l_min = min(r.lpips for r in rows)
    out = []
    for r in rows:
        b = 0.5 if r.bit_acc is None else r.bit_acc
        T = 0.5 if b_max == 0.5 else _clip01(0.5 * (1 + (b - 0.5) / (b_max - 0.5)))
        us = [0.5 if gaps[k] == 0 else _clip01(0.5 * (1 + getattr(r, k) / gaps[k])) for k in gaps]
        E = _gm(*us)
        F = _gm(r.psnr / p_max, r.ssim / q_max, l_min / r.lpips)
        out.append(SucpsScore(r.method, T, E, F, _hm(T, E, F)))
    return out


def sucps_against(reference_rows, candidates) -> list:
    """Score each candidate jointly with a fixed set of reference rows.

    Normalizers (b_max, max gaps, best fidelity) are taken over the reference rows plus
    the one candidate being scored.
    """
    reference_rows = list(reference_rows)
    return [sucps(reference_rows + [c])[-1] for c in candidates]


SUCPS_HEADER = ["method", "bit_acc", "delta_clip", "delta_clipT", "delta_clipD",
                "psnr", "ssim", "lpips"]
SCORE_HEADER = ["method", "T", "E", "F", "sUCPS"]


def read_rows_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SUCPS_HEADER:
            raise ValueError(f"{path}: header must be {','.join(SUCPS_HEADER)}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            if len(rec) != len(SUCPS_HEADER):
                raise ValueError(f"{path}: row {rec!r} has {len(rec)} fields")
            b = rec[1].strip()
            bit = None if b.upper() in ("", "N/A", "NA") else float(b)
            rows.append(SucpsRow(rec[0], bit, *(float(x) for x in rec[2:])))
    return rows


def write_rows_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUCPS_HEADER)
        for r in rows:
            w.writerow([r.method, "N/A" if r.bit_acc is None else repr(r.bit_acc),
                        *(repr(float(getattr(r, k))) for k in SUCPS_HEADER[2:])])


def write_scores_csv(scores, path, digits: int | None = None) -> None:
    fmt = (lambda x: f"{x:.{digits}f}") if digits is not None else (lambda x: repr(float(x)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_HEADER)
        for s in scores:
            w.writerow([s.method, fmt(s.T), fmt(s.E), fmt(s.F), fmt(s.sucps)])
