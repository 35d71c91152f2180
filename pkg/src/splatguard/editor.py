"""A tiny frozen latent-diffusion-style editor with analytic image cotangents.

The editor is built from fixed random weights.  It exposes the hooks the
adversarial objective needs:

* a latent encoder ``z(image)`` (two strided tanh convolutions, 8x downsampling)
  and a mirrored transposed-conv decoder used for synthetic edits,
* a cosine noise schedule with ``T = 1000`` steps,
* a denoiser ``U(z_t, t, prompt)``.  It has a 3x3 conv hidden layer (the "mid"
  features), a residual cross-attention over prompt tokens, and a 3x3 conv output,
* the two-step trajectory descriptor, the pooled mid-block query descriptor, and the
  three separation terms between a protected and a frozen reference image.

Images are H x W x 3 arrays in [0, 1]; latents are (H/8) x (W/8) x 4.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .conv import conv2d, conv2d_vjp_input, conv_transpose2d

T_STEPS = 1000
COSINE_S = 0.008
TRAJ_DELTA = 100
EMB_DIM = 16
N_TOKENS = 8
D_TXT = 64
C_LAT = 4
C_ENC = 8
D_HID = 16
D_MID = 32


# ---------------------------------------------------------------------------
# schedule

def _f(t):
    return np.cos((np.asarray(t, dtype=np.float64) / T_STEPS + COSINE_S) / (1 + COSINE_S) * np.pi / 2) ** 2


def alpha_bar(t) -> float:
    return float(np.clip(_f(t) / _f(0), 0.0, 1.0))


def schedule(t: int) -> tuple:
    """``(alpha_t, sigma_t)`` with ``alpha_t**2 + sigma_t**2 == 1``."""
    if not (1 <= int(t) <= T_STEPS) or int(t) != t:
        raise ValueError(f"timestep {t} outside 1..{T_STEPS}")
    ab = alpha_bar(t)
    return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def timestep_embedding(t: float, dim: int = EMB_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


def noisy_latent(z: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z.shape}")
    a, s = schedule(t)
    return a * z + s * eps


# ---------------------------------------------------------------------------
# prompts

@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    text: str
    sequence: np.ndarray   # (N_TOKENS, D_TXT)

    @property
    def pooled(self) -> np.ndarray:
        return self.sequence.mean(axis=0)


def _text_seed(seed: int, text: str) -> int:
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def embed_prompt(text: str, seed: int = 0) -> PromptEmbedding:
    rng = np.random.default_rng(_text_seed(seed, text))
    seq = rng.standard_normal((N_TOKENS, D_TXT))
    seq.setflags(write=False)
    return PromptEmbedding(text, seq)


# ---------------------------------------------------------------------------
# editor

@dataclass(frozen=True, eq=False)
class SurrogateEditor:
    seed: int
    weights: dict = field(repr=False)
    latent_scale: float = 1.0

    # ---- encoder -------------------------------------------------------

    def _check(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        if image.shape[0] % 8 or image.shape[1] % 8:
            raise ValueError(f"image size {image.shape[:2]} is not divisible by 8")
        return image

    def _encode(self, image):
        W = self.weights
        x = 2.0 * self._check(image) - 1.0
        h = np.tanh(conv2d(x, W["enc1"], 2, 1) + W["enc1_b"])
        u = np.tanh(conv2d(h, W["enc2"], 4, 0) + W["enc2_b"])
        return x, h, u

    def encode(self, image) -> np.ndarray:
        return self.latent_scale * self._encode(image)[2]

    def encode_vjp(self, image, g_z) -> np.ndarray:
        """Image cotangent of ``<g_z, encode(image)>``."""
        W = self.weights
        x, h, u = self._encode(image)
        g = self.latent_scale * np.asarray(g_z) * (1.0 - u * u)
        g = conv2d_vjp_input(g, W["enc2"], h.shape, 4, 0) * (1.0 - h * h)
        return 2.0 * conv2d_vjp_input(g, W["enc1"], x.shape, 2, 1)

    def decode(self, latent) -> np.ndarray:
        """Mirrored decoder (no biases, so ``decode(0) == 0``); output is an image delta."""
        W = self.weights
        z = np.asarray(latent, dtype=np.float64)
        h, w = z.shape[:2]
        a = np.tanh(conv_transpose2d(z, W["dec1"], (4 * h, 4 * w), 4, 0))
        return 0.5 * conv_transpose2d(a, W["dec2"], (8 * h, 8 * w), 2, 1)

    # ---- denoiser -------------------------------------------------------

    def _denoise(self, zt, t, prompt: PromptEmbedding):
        W = self.weights
        cond = W["w_t"] @ timestep_embedding(t) + W["w_p"] @ prompt.pooled + W["b1"]
        h1 = np.tanh(conv2d(zt, W["den1"], 1, 1) + cond)
        hh, ww = h1.shape[:2]
        tok = h1.reshape(-1, D_HID)
        Q = tok @ W["w_q"]
        K = prompt.sequence @ W["w_k"]
        V = prompt.sequence @ W["w_v"]
        S = Q @ K.T / np.sqrt(D_MID)
        S = S - S.max(axis=1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=1, keepdims=True)
        h2 = (tok + A @ V).reshape(hh, ww, D_HID)
        out = conv2d(h2, W["den2"], 1, 1)
        return out, dict(zt=zt, h1=h1, A=A, V=V, K=K, h2=h2)

    def denoise(self, zt, t, prompt: PromptEmbedding) -> np.ndarray:
        return self._denoise(np.asarray(zt, dtype=np.float64), t, prompt)[0]

    def _denoise_vjp(self, cache, g_out, g_h1_extra=None):
        W = self.weights
        h1, A, V, K, h2 = cache["h1"], cache["A"], cache["V"], cache["K"], cache["h2"]
        g_h2 = conv2d_vjp_input(g_out, W["den2"], h2.shape, 1, 1).reshape(-1, D_HID)
        g_A = g_h2 @ V.T
        g_S = A * (g_A - (g_A * A).sum(axis=1, keepdims=True))
        g_Q = g_S @ K / np.sqrt(D_MID)
        g_h1 = (g_h2 + g_Q @ W["w_q"].T).reshape(h1.shape)
        if g_h1_extra is not None:
            g_h1 = g_h1 + g_h1_extra
        g_pre = g_h1 * (1.0 - h1 * h1)
        return conv2d_vjp_input(g_pre, W["den1"], cache["zt"].shape, 1, 1)

    # ---- descriptors ----------------------------------------------------

    def _zt(self, image, t, eps):
        return noisy_latent(self.encode(image), t, eps)

    def _traj(self, zt, t, prompt):
        if t - TRAJ_DELTA < 1:
            raise ValueError(f"timestep {t} too small for a {TRAJ_DELTA}-step trajectory")
        _, sigma = schedule(t)
        d1, c1 = self._denoise(zt, t, prompt)
        z2 = zt - sigma * d1
        d2, c2 = self._denoise(z2, t - TRAJ_DELTA, prompt)
        return np.concatenate([d1.ravel(), d2.ravel()]), (c1, c2, sigma, d1.shape)

    def traj_descriptor(self, image, prompt, t, eps) -> np.ndarray:
        return self._traj(self._zt(image, t, eps), t, prompt)[0]

    def traj_descriptor_vjp(self, image, prompt, t, eps, g_desc) -> np.ndarray:
        alpha, _ = schedule(t)
        _, (c1, c2, sigma, shp) = self._traj(self._zt(image, t, eps), t, prompt)
        n = int(np.prod(shp))
        g_d1 = g_desc[:n].reshape(shp)
        g_d2 = g_desc[n:].reshape(shp)
        g_z2 = self._denoise_vjp(c2, g_d2)
        g_zt = g_z2 + self._denoise_vjp(c1, g_d1 - sigma * g_z2)
        return self.encode_vjp(image, alpha * g_zt)

    def _mid(self, zt, t, prompt):
        _, cache = self._denoise(zt, t, prompt)
        return cache["h1"].reshape(-1, D_HID).mean(axis=0) @ self.weights["w_q"], cache

    def xattn_descriptor(self, image, prompt, t, eps) -> np.ndarray:
        return self._mid(self._zt(image, t, eps), t, prompt)[0]

    def xattn_descriptor_vjp(self, image, prompt, t, eps, g_desc) -> np.ndarray:
        alpha, _ = schedule(t)
        zt = self._zt(image, t, eps)
        _, cache = self._mid(zt, t, prompt)
        h1 = cache["h1"]
        n_q = h1.shape[0] * h1.shape[1]
        g_h1 = np.broadcast_to(self.weights["w_q"] @ g_desc / n_q, h1.shape)
        g_pre = g_h1 * (1.0 - h1 * h1)
        g_zt = conv2d_vjp_input(g_pre, self.weights["den1"], zt.shape, 1, 1)
        return self.encode_vjp(image, alpha * g_zt)

    # ---- edit -----------------------------------------------------------

    def edit_image(self, image, prompt: PromptEmbedding, strength: float, t: int, eps) -> np.ndarray:
        if strength < 0:
            raise ValueError("edit strength must be non-negative")
        image = self._check(image)
        if strength == 0:
            return np.clip(image, 0.0, 1.0)
        _, sigma = schedule(t)
        zt = self._zt(image, t, eps)
        delta = -strength * sigma * self.denoise(zt, t, prompt)
        return np.clip(image + self.decode(delta), 0.0, 1.0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.seed, self.latent_scale)).encode())
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(self.weights[k].tobytes())
        return h.hexdigest()

    def latent_shape(self, height: int, width: int) -> tuple:
        return (height // 8, width // 8, C_LAT)


def _init(rng, shape, fan_in, gain):
    return gain * rng.standard_normal(shape) / np.sqrt(fan_in)


def build_editor(seed: int = 0, gain: float = 1.5, latent_scale: float = 1.0) -> SurrogateEditor:
    """Deterministic editor from ``seed``; different seeds give independent editors."""
    rng = np.random.default_rng([seed, 7])
    w = {
        "enc1": _init(rng, (3, 3, 3, C_ENC), 27, gain),
        "enc1_b": _init(rng, (C_ENC,), 1, 0.1),
        "enc2": _init(rng, (4, 4, C_ENC, C_LAT), 16 * C_ENC, gain),
        "enc2_b": _init(rng, (C_LAT,), 1, 0.1),
        "dec1": _init(rng, (4, 4, C_ENC, C_LAT), C_LAT, gain),
        "dec2": _init(rng, (3, 3, 3, C_ENC), C_ENC, 1.0),
        "den1": _init(rng, (3, 3, C_LAT, D_HID), 9 * C_LAT, gain),
        "w_t": _init(rng, (D_HID, EMB_DIM), EMB_DIM, 0.5),
        "w_p": _init(rng, (D_HID, D_TXT), D_TXT, 0.5),
        "b1": _init(rng, (D_HID,), 1, 0.1),
        "w_q": _init(rng, (D_HID, D_MID), D_HID, 1.0),
        "w_k": _init(rng, (D_TXT, D_MID), D_TXT, 1.0),
        "w_v": _init(rng, (D_TXT, D_HID), D_TXT, 1.0),
        "den2": _init(rng, (3, 3, D_HID, C_LAT), 9 * D_HID, 1.0),
    }
    for a in w.values():
        a.setflags(write=False)
    return SurrogateEditor(seed, w, latent_scale)


# ---------------------------------------------------------------------------
# separation terms; the reference branch is a constant

def _pair(img_prot, img_ref):
    a = np.asarray(img_prot, dtype=np.float64)
    b = np.asarray(img_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def s_lat(img_prot, img_ref, editor: SurrogateEditor):
    """``||z(prot) - z(ref)||^2`` and its cotangent w.r.t. ``img_prot``."""
    a, b = _pair(img_prot, img_ref)
    d = editor.encode(a) - editor.encode(b)
    return float((d * d).sum()), editor.encode_vjp(a, 2.0 * d)


def s_traj(img_prot, img_ref, prompt, t, eps, editor: SurrogateEditor):
    a, b = _pair(img_prot, img_ref)
    d = editor.traj_descriptor(a, prompt, t, eps) - editor.traj_descriptor(b, prompt, t, eps)
    return float((d * d).sum()), editor.traj_descriptor_vjp(a, prompt, t, eps, 2.0 * d)


def s_xattn(img_prot, img_ref, prompt, t, eps, editor: SurrogateEditor):
    a, b = _pair(img_prot, img_ref)
    d = editor.xattn_descriptor(a, prompt, t, eps) - editor.xattn_descriptor(b, prompt, t, eps)
    return float((d * d).sum()) / D_MID, editor.xattn_descriptor_vjp(a, prompt, t, eps, 2.0 * d / D_MID)
