"""Scene-wide watermark branch: Haar low band, a frozen seeded linear decoder and its losses."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .editor import SurrogateEditor

DEFAULT_K = 32
LAMBDA_FEAT = 0.1


@dataclass(frozen=True, eq=False)
class Message:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool).ravel()
        if b.size < 1:
            raise ValueError("message needs at least one bit")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def k(self) -> int:
        return self.bits.size

    @classmethod
    def random(cls, k: int = DEFAULT_K, seed: int = 0) -> "Message":
        return cls(np.random.default_rng([seed, 31]).integers(0, 2, k))

    @classmethod
    def from_string(cls, s: str) -> "Message":
        if not s or set(s) - {"0", "1"}:
            raise ValueError(f"message must be a non-empty 0/1 string, got {s!r}")
        return cls(np.array([c == "1" for c in s]))

    def __str__(self):
        return "".join("1" if b else "0" for b in self.bits)

    def __eq__(self, other):
        return isinstance(other, Message) and np.array_equal(self.bits, other.bits)


def haar_ll(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if H % 2 or W % 2:
        raise ValueError(f"Haar transform needs even dimensions, got {H}x{W}")
    return 0.25 * (image[0::2, 0::2] + image[0::2, 1::2] + image[1::2, 0::2] + image[1::2, 1::2])


def haar_ll_adjoint(band: np.ndarray) -> np.ndarray:
    return 0.25 * np.repeat(np.repeat(band, 2, axis=0), 2, axis=1)


@dataclass(frozen=True, eq=False)
class WatermarkKey:
    """Frozen decoder, regenerated from its parameters (weights are never stored).

    Each weight row is a random field that is constant over ``block x block`` cells of
    the Haar band, so a bit keeps responding when a view shifts by a pixel or two.
    Optional shaping reduces how much ordinary scene content leaks into the logits:
    ``highpass`` subtracts a Gaussian blur of that width (in band pixels) and ``chroma``
    removes the per-pixel mean over RGB.  Rows are then made zero-mean, unit-variance and
    scaled by ``gain / sqrt(dim)``.  A large gain makes the cross-entropy saturate once a
    bit is decoded with some margin, so it stops pushing the scene away from the
    reference.  ``block=1, highpass=0, chroma=False, center=False, gain=1`` gives plain
    i.i.d. unit-variance entries scaled by 1/sqrt(dim).
    """

    seed: int
    k: int
    height: int
    width: int
    gain: float = 60.0
    block: int = 2
    center: bool = True
    chroma: bool = True
    highpass: float = 2.0
    W: np.ndarray = field(init=False, repr=False)
    bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.height % 2 or self.width % 2:
            raise ValueError("key image size must be even")
        h, w = self.height // 2, self.width // 2
        dim = 3 * h * w
        rng = np.random.default_rng([self.seed, self.k, self.height, self.width, 17])
        b = max(1, int(self.block))
        coarse = rng.standard_normal((self.k, -(-h // b), -(-w // b), 3))
        full = np.repeat(np.repeat(coarse, b, axis=1), b, axis=2)[:, :h, :w]
        if self.highpass > 0:
            full = full - ndimage.gaussian_filter(full, (0, self.highpass, self.highpass, 0),
                                                  mode="wrap")
        if self.chroma:
            full = full - full.mean(axis=3, keepdims=True)
        if self.center:
            full = full - full.mean(axis=(1, 2), keepdims=True)
            full = full / full.std(axis=(1, 2, 3), keepdims=True)
        W = self.gain * full.reshape(self.k, dim) / np.sqrt(dim)
        bias = self.gain * rng.standard_normal(self.k) / np.sqrt(dim)
        W.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "bias", bias)

    def params(self) -> dict:
        return dict(seed=self.seed, k=self.k, height=self.height, width=self.width,
                    gain=self.gain, block=self.block, center=self.center,
                    chroma=self.chroma, highpass=self.highpass)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.params(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "WatermarkKey":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        unknown = set(d) - {"seed", "k", "height", "width", "gain", "block", "center",
                            "chroma", "highpass"}
        if unknown:
            raise ValueError(f"unknown key fields: {sorted(unknown)}")
        return cls(**d)

    def _check(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (self.height, self.width, 3):
            raise ValueError(f"image shape {image.shape} does not match key "
                             f"({self.height}, {self.width}, 3)")
        return image


def decode_logits(image, key: WatermarkKey) -> np.ndarray:
    return key.W @ haar_ll(key._check(image)).ravel() + key.bias


def decode_bits(image, key: WatermarkKey) -> Message:
    return Message(decode_logits(image, key) > 0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def msg_loss(image, key: WatermarkKey, message: Message):
    """Mean binary cross-entropy of the decoded logits and its image cotangent."""
    if message.k != key.k:
        raise ValueError(f"message length {message.k} != key length {key.k}")
    logits = decode_logits(image, key)
    m = message.bits.astype(np.float64)
    loss = float(np.mean(_softplus(logits) - m * logits))
    g_logits = (0.5 * (1.0 + np.tanh(0.5 * logits)) - m) / key.k
    g_band = (key.W.T @ g_logits).reshape(key.height // 2, key.width // 2, 3)
    return loss, haar_ll_adjoint(g_band)


def bit_accuracy(decoded: Message, target: Message) -> float:
    if decoded.k != target.k:
        raise ValueError(f"message lengths differ: {decoded.k} vs {target.k}")
    return float(np.mean(decoded.bits == target.bits))


def feature_distance(image, reference, editor: SurrogateEditor):
    """Mean squared difference of frozen encoder features, with its image cotangent."""
    d = editor.encode(image) - editor.encode(reference)
    return float(np.mean(d * d)), editor.encode_vjp(image, 2.0 * d / d.size)


def quality_loss(image, reference, editor: SurrogateEditor | None = None,
                 lambda_feat: float = LAMBDA_FEAT):
    """Mean l1 distance plus ``lambda_feat`` times the encoder feature distance."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if editor is not None and lambda_feat:
        f, g = feature_distance(a, b, editor)
        loss += lambda_feat * f
        grad = grad + lambda_feat * g
    return loss, grad
