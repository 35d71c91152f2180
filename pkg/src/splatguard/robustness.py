"""Image-level distortions and the watermark / deterrence robustness harnesses."""
from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage

from .editloop import EditConfig, make_editor, run_edit
from .imageops import resize_bilinear, sample_bilinear
from .metrics import EmbedderPair, clip_metrics
from .ppm import decode_srgb8, encode_srgb8
from .renderer import render
from .scene import distort_clone, distort_noise, distort_prune
from .watermark import bit_accuracy, decode_bits

KINDS = ("noise", "rotation", "scaling", "blur", "crop", "jpeg_like")

# parameter ranges (inclusive) and the value at which each distortion is the identity
_RANGES = {
    "noise": (0.0, 1.0),
    "rotation": (0.0, math.pi),
    "scaling": (0.05, 1.0),
    "blur": (0.0, 16.0),
    "crop": (0.05, 1.0),
    "jpeg_like": (1, 100),
}
IDENTITY = {"noise": 0.0, "rotation": 0.0, "scaling": 1.0, "blur": 0.0, "crop": 1.0}


@dataclass(frozen=True)
class DistortionSpec:
    """One image distortion.

    ``param`` is the noise std, the maximum rotation angle in radians, the scale factor,
    the blur std in pixels, the kept area fraction for crop, or the JPEG quality.
    """

    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        lo, hi = _RANGES[self.kind]
        if not (lo <= self.param <= hi) or not math.isfinite(self.param):
            raise ValueError(f"{self.kind} parameter {self.param} outside [{lo}, {hi}]")
        if self.kind == "jpeg_like" and int(self.param) != self.param:
            raise ValueError("jpeg quality must be an integer")

    @property
    def label(self) -> str:
        return "jpeg" if self.kind == "jpeg_like" else self.kind


def table_specs(seed: int = 0) -> list:
    """The six image distortions of the watermark robustness table, in column order."""
    return [DistortionSpec("noise", 0.01, seed), DistortionSpec("rotation", math.pi / 6, seed),
            DistortionSpec("scaling", 0.75, seed), DistortionSpec("blur", 0.1, seed),
            DistortionSpec("crop", 0.4, seed), DistortionSpec("jpeg_like", 50, seed)]


def _rng(spec: DistortionSpec, view) -> np.random.Generator:
    vkey = zlib.crc32(str(view).encode("utf-8"))
    return np.random.default_rng([int(spec.seed), vkey, KINDS.index(spec.kind), 71])


def distort_image(image, spec: DistortionSpec, view="") -> np.ndarray:
    """Apply ``spec`` to an (H, W, 3) image in [0, 1]; randomness is keyed by (view, seed)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    k, p = spec.kind, float(spec.param)
    if IDENTITY.get(k) == p:
        return img.copy()
    H, W = img.shape[:2]
    rng = _rng(spec, view)
    if k == "noise":
        return np.clip(img + p * rng.standard_normal(img.shape), 0.0, 1.0)
    if k == "rotation":
        a = rng.uniform(-p, p)
        cy, cx = (H - 1) / 2, (W - 1) / 2
        yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
        c, s = math.cos(a), math.sin(a)
        # inverse map: output pixel -> source location
        sy = c * yy - s * xx + cy
        sx = s * yy + c * xx + cx
        return sample_bilinear(img, sy, sx, mode="constant", cval=0.0)
    if k == "scaling":
        h, w = max(1, round(H * p)), max(1, round(W * p))
        return resize_bilinear(resize_bilinear(img, h, w), H, W)
    if k == "blur":
        return ndimage.gaussian_filter(img, (p, p, 0), mode="nearest")
    if k == "crop":
        side = math.sqrt(p)
        h, w = max(1, round(H * side)), max(1, round(W * side))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        return resize_bilinear(img[y0:y0 + h, x0:x0 + w], H, W)
    return jpeg_like(img, int(p))


# ---------------------------------------------------------------------------
# JPEG-like codec (baseline tables, 4:2:0, orthonormal 8x8 DCT)

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)
CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128, ycc[..., 2] - 128
    return np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], axis=-1)


def _pad_to(x, m):
    H, W = x.shape
    return np.pad(x, ((0, -H % m), (0, -W % m)), mode="edge")


def _dct_roundtrip(plane, table):
    """Level-shifted 8x8 block DCT, quantize, dequantize, inverse."""
    H, W = plane.shape
    p = _pad_to(plane - 128.0, 8)
    h, w = p.shape
    blocks = p.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    out = fft.idctn(coef, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(h, w)
    return out[:H, :W] + 128.0


def jpeg_like_u8(data: np.ndarray, quality: int) -> np.ndarray:
    """Round-trip an (H, W, 3) uint8 image through the codec."""
    ycc = rgb_to_ycbcr(np.asarray(data, dtype=np.float64))
    H, W = ycc.shape[:2]
    y = _dct_roundtrip(ycc[..., 0], quant_table(LUMA_TABLE, quality))
    chans = [y]
    for c in (1, 2):
        plane = _pad_to(ycc[..., c], 2)
        sub = plane.reshape(plane.shape[0] // 2, 2, plane.shape[1] // 2, 2).mean(axis=(1, 3))
        rec = _dct_roundtrip(sub, quant_table(CHROMA_TABLE, quality))
        chans.append(np.repeat(np.repeat(rec, 2, axis=0), 2, axis=1)[:H, :W])
    rgb = ycbcr_to_rgb(np.stack(chans, axis=-1))
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def jpeg_like(image, quality: int = 50) -> np.ndarray:
    """Codec round trip of a linear image, done on its 8-bit gamma encoding."""
    return decode_srgb8(jpeg_like_u8(encode_srgb8(image), quality))


# ---------------------------------------------------------------------------
# harnesses

MODEL_KINDS = ("noise", "prune", "clone")
DEFAULT_MODEL_DISTORTIONS = {"noise": 0.05, "prune": 0.1, "clone": 0.1}
_MODEL_FNS = {"noise": distort_noise, "prune": distort_prune, "clone": distort_clone}

WM_HEADER = ["method", "none", "model_noise", "model_prune", "model_clone",
             "noise", "rotation", "scaling", "blur", "crop", "jpeg"]
ADV_HEADER = ["method"] + [f"{m}_{c}" for m in ("clip", "clipT", "clipD")
                           for c in ("orig", "none", "noise", "prune", "clone")]
AFTER_EDIT_HEADER = ["method", "before", "after", "drop"]


def _model_distortions(md):
    md = dict(DEFAULT_MODEL_DISTORTIONS if md is None else md)
    unknown = set(md) - set(MODEL_KINDS)
    if unknown or set(md) != set(MODEL_KINDS):
        raise ValueError(f"model distortions must be exactly {MODEL_KINDS}, got {sorted(md)}")
    return md


def distort_scene(scene, kind: str, param: float, seed: int = 0):
    if kind not in _MODEL_FNS:
        raise ValueError(f"unknown model distortion {kind!r}")
    return _MODEL_FNS[kind](scene, param, seed)


def _pmap(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def mean_bit_accuracy(scene, key, message, views, spec: DistortionSpec | None = None,
                      workers: int = 1) -> float:
    accs = []
    for cam in views:
        img = render(scene, cam, workers=workers).image
        if spec is not None:
            img = distort_image(img, spec, cam.view_id)
        accs.append(bit_accuracy(decode_bits(img, key), message))
    return float(np.mean(accs))


def wm_robustness_harness(scenes: dict, key, message, views, specs=None, model_distortions=None,
                          seed: int = 0, workers: int = 1) -> list:
    """Bit accuracy per method under no / model-level / image-level distortion.

    ``scenes`` maps a method name to its protected scene.  Returns one dict per method
    keyed by ``WM_HEADER``; each cell is the mean bit accuracy over ``views``.
    """
    specs = table_specs(seed) if specs is None else list(specs)
    labels = [s.label for s in specs]
    if labels != WM_HEADER[5:]:
        raise ValueError(f"image distortions must be given in the order {WM_HEADER[5:]}")
    md = _model_distortions(model_distortions)
    views = list(views)
    rows = []
    for name in scenes:
        scene = scenes[name]
        cells = [("none", scene, None)]
        cells += [(f"model_{k}", distort_scene(scene, k, md[k], seed), None) for k in MODEL_KINDS]
        cells += [(s.label, scene, s) for s in specs]
        vals = _pmap(lambda c: mean_bit_accuracy(c[1], key, message, views, c[2]), cells, workers)
        rows.append({"method": name, **{c[0]: v for c, v in zip(cells, vals)}})
    return rows


def _edit_renders(scene, views, config: EditConfig, editor):
    res = run_edit(scene, views, config, editor)
    return [res.renders[v.view_id] for v in views]


def adv_robustness_harness(original, scenes: dict, views, config: EditConfig, prompt_src: str,
                           embedders: EmbedderPair, model_distortions=None, seed: int = 0,
                           editor=None, workers: int = 1) -> list:
    """CLIP-family metrics of edits of model-distorted protected scenes.

    ``orig`` columns come from editing ``original``; the other columns report the
    method values (not differences) for the undistorted and each distorted scene.
    """
    md = _model_distortions(model_distortions)
    views = list(views)
    editor = editor or make_editor(config)
    src_orig = [render(original, v).image for v in views]
    edited_orig = _edit_renders(original, views, config, editor)
    rows = []
    for name in scenes:
        cases = [("none", scenes[name])]
        cases += [(k, distort_scene(scenes[name], k, md[k], seed)) for k in MODEL_KINDS]

        def one(case):
            _label, sc = case
            src = [render(sc, v).image for v in views]
            ed = _edit_renders(sc, views, config, editor)
            return clip_metrics(edited_orig, ed, src_orig, src, prompt_src, config.prompt, embedders)

        results = _pmap(one, cases, workers)
        row = {"method": name}
        for metric in ("clip", "clipT", "clipD"):
            row[f"{metric}_orig"] = results[0][metric]["orig"]
            for (label, _sc), r in zip(cases, results):
                row[f"{metric}_{label}"] = r[metric]["method"]
        rows.append(row)
    return rows


def wm_after_edit_harness(scenes: dict, key, message, views, config: EditConfig,
                          editor=None) -> list:
    """Bit accuracy (percent) before and after the edit loop; drop is in percentage points."""
    views = list(views)
    editor = editor or make_editor(config)
    rows = []
    for name, scene in scenes.items():
        before = 100.0 * mean_bit_accuracy(scene, key, message, views)
        res = run_edit(scene, views, config, editor)
        after = 100.0 * float(np.mean([bit_accuracy(decode_bits(res.renders[v.view_id], key), message)
                                       for v in views]))
        rows.append({"method": name, "before": before, "after": after, "drop": before - after})
    return rows


def write_table_csv(rows, header, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r["method"]] + [repr(float(r[h])) for h in header[1:]])


def read_table_csv(path, header) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != header:
            raise ValueError(f"{path}: header must be {','.join(header)}")
        return [{"method": r[0], **{h: float(x) for h, x in zip(header[1:], r[1:])}}
                for r in reader if r]
