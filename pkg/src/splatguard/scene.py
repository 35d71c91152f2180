"""Gaussian scene data model, binary scene files, toy scenes and model-level distortions.

Scenes are stored struct-of-arrays: every per-Gaussian field is an ``(N, d)``
float64 array and row ``i`` of every array describes Gaussian ``i``.  Arrays are
made read-only on construction; all operations return new scenes.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GSPL"
FORMAT_VERSION = 1
RECORD_FLOATS = 23  # 3 position + 3 log_scale + 4 rotation + 1 opacity + 3 dc + 9 rest


class SceneFormatError(ValueError):
    """Base class for scene file problems."""


class MalformedHeaderError(SceneFormatError):
    pass


class TruncatedPayloadError(SceneFormatError):
    pass


class VersionMismatchError(SceneFormatError):
    pass


class EmptySceneError(ValueError):
    pass


class InvalidRotationError(ValueError):
    pass


class ParamGroup(enum.Enum):
    POSITION = "position"
    SCALE = "log_scale"
    ROTATION = "rotation"
    OPACITY = "opacity_logit"
    COLOR_DC = "color_dc"
    COLOR_REST = "color_rest"

    @property
    def width(self) -> int:
        return _GROUP_WIDTH[self]


_GROUP_WIDTH = {
    ParamGroup.POSITION: 3,
    ParamGroup.SCALE: 3,
    ParamGroup.ROTATION: 4,
    ParamGroup.OPACITY: 1,
    ParamGroup.COLOR_DC: 3,
    ParamGroup.COLOR_REST: 9,
}

# non-position groups, in record order
TRAINABLE_GROUPS = (
    ParamGroup.SCALE,
    ParamGroup.ROTATION,
    ParamGroup.OPACITY,
    ParamGroup.COLOR_DC,
    ParamGroup.COLOR_REST,
)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    """A single anisotropic Gaussian (a row view of a scene)."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color_dc: np.ndarray
    color_rest: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianScene:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_dc: np.ndarray
    color_rest: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scene_id: str = "scene"
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        n = np.asarray(self.positions).reshape(-1, 3).shape[0]
        if n == 0:
            raise EmptySceneError("empty scene")
        set_ = object.__setattr__
        set_(self, "positions", _frozen(self.positions, (n, 3)))
        set_(self, "log_scales", _frozen(self.log_scales, (n, 3)))
        set_(self, "rotations", _frozen(self.rotations, (n, 4)))
        set_(self, "opacity_logits", _frozen(self.opacity_logits, (n,)))
        set_(self, "color_dc", _frozen(self.color_dc, (n, 3)))
        set_(self, "color_rest", _frozen(self.color_rest, (n, 9)))
        set_(self, "background", _frozen(self.background, (3,)))
        labels = {}
        for name, idx in dict(self.labels).items():
            idx = np.unique(np.asarray(idx, dtype=np.int64))
            if idx.size and (idx[0] < 0 or idx[-1] >= n):
                raise ValueError(f"label {name!r} indexes outside the scene")
            idx.setflags(write=False)
            labels[str(name)] = idx
        set_(self, "labels", labels)
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "color_dc", "color_rest", "background"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0.0):
            raise InvalidRotationError("invalid rotation: zero-norm quaternion")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.log_scales[i], self.rotations[i],
                        float(self.opacity_logits[i]), self.color_dc[i], self.color_rest[i])

    @property
    def n(self) -> int:
        return len(self)

    def group(self, g: ParamGroup) -> np.ndarray:
        return {
            ParamGroup.POSITION: self.positions,
            ParamGroup.SCALE: self.log_scales,
            ParamGroup.ROTATION: self.rotations,
            ParamGroup.OPACITY: self.opacity_logits,
            ParamGroup.COLOR_DC: self.color_dc,
            ParamGroup.COLOR_REST: self.color_rest,
        }[g]

    def replace(self, **changes) -> "GaussianScene":
        fields_ = dict(
            positions=self.positions, log_scales=self.log_scales, rotations=self.rotations,
            opacity_logits=self.opacity_logits, color_dc=self.color_dc,
            color_rest=self.color_rest, background=self.background,
            scene_id=self.scene_id, labels=self.labels,
        )
        fields_.update(changes)
        return GaussianScene(**fields_)

    def subset(self, index) -> "GaussianScene":
        index = np.asarray(index, dtype=np.int64)
        remap = -np.ones(len(self), dtype=np.int64)
        remap[index] = np.arange(index.size)
        labels = {k: np.sort(remap[v][remap[v] >= 0]) for k, v in self.labels.items()}
        return GaussianScene(
            self.positions[index], self.log_scales[index], self.rotations[index],
            self.opacity_logits[index], self.color_dc[index], self.color_rest[index],
            self.background, self.scene_id, labels,
        )

    def records(self) -> np.ndarray:
        return np.concatenate([
            self.positions, self.log_scales, self.rotations, self.opacity_logits[:, None],
            self.color_dc, self.color_rest,
        ], axis=1)

    def label_mask(self, label: str) -> np.ndarray:
        if label not in self.labels:
            raise KeyError(f"unknown label {label!r}")
        out = np.zeros(len(self), dtype=bool)
        out[self.labels[label]] = True
        return out

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(self.records().tobytes())
        h.update(self.background.tobytes())
        return h.hexdigest()

    def equals(self, other: "GaussianScene") -> bool:
        return (
            isinstance(other, GaussianScene)
            and self.records().shape == other.records().shape
            and np.array_equal(self.records(), other.records())
            and np.array_equal(self.background, other.background)
            and self.scene_id == other.scene_id
            and self.labels.keys() == other.labels.keys()
            and all(np.array_equal(self.labels[k], other.labels[k]) for k in self.labels)
        )


def _field_name(g: ParamGroup) -> str:
    return {
        ParamGroup.POSITION: "positions",
        ParamGroup.SCALE: "log_scales",
        ParamGroup.ROTATION: "rotations",
        ParamGroup.OPACITY: "opacity_logits",
        ParamGroup.COLOR_DC: "color_dc",
        ParamGroup.COLOR_REST: "color_rest",
    }[g]


def scene_with(scene: GaussianScene, values: dict) -> GaussianScene:
    return scene.replace(**{_field_name(ParamGroup(g)): v for g, v in values.items()})


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# binary format

def scene_save(scene: GaussianScene, path) -> None:
    """Write ``scene`` as ``GSPL`` | u8 version | u64 N | N*22 f64 | u64 len | JSON footer."""
    footer = json.dumps({
        "background": [float(x).hex() for x in scene.background],
        "scene_id": scene.scene_id,
        "labels": {k: v.tolist() for k, v in scene.labels.items()},
    }, sort_keys=True).encode("utf-8")
    payload = scene.records().astype("<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BQ", FORMAT_VERSION, len(scene)))
        fh.write(payload)
        fh.write(struct.pack("<Q", len(footer)))
        fh.write(footer)


def scene_load(path) -> GaussianScene:
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: not a GSPL scene file")
    version, n = struct.unpack_from("<BQ", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if n == 0:
        raise EmptySceneError("empty scene")
    start = 13
    end = start + n * RECORD_FLOATS * 8
    if len(data) < end + 8:
        raise TruncatedPayloadError(f"{path}: payload truncated ({len(data)} bytes, need {end + 8})")
    rec = np.frombuffer(data, dtype="<f8", count=n * RECORD_FLOATS, offset=start)
    rec = rec.reshape(n, RECORD_FLOATS).astype(np.float64)
    (flen,) = struct.unpack_from("<Q", data, end)
    if len(data) < end + 8 + flen:
        raise TruncatedPayloadError(f"{path}: footer truncated")
    try:
        footer = json.loads(data[end + 8:end + 8 + flen].decode("utf-8"))
        background = [float.fromhex(x) for x in footer["background"]]
        scene_id = footer["scene_id"]
        labels = footer.get("labels", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"{path}: bad footer ({exc})") from exc
    if np.any(np.linalg.norm(rec[:, 6:10], axis=1) == 0.0):
        raise InvalidRotationError("invalid rotation: zero-norm quaternion")
    return GaussianScene(
        rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14], rec[:, 14:23],
        background, scene_id, labels,
    )


# ---------------------------------------------------------------------------
# toy scenes

def _random_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return normalize_quaternions(q)


def _z_quaternions(rng, n):
    half = rng.uniform(0.0, np.pi, n)
    q = np.zeros((n, 4))
    q[:, 0] = np.cos(half)
    q[:, 3] = np.sin(half)
    return q


def _plane_texture(xy):
    # smooth two-tone pattern with a diagonal stripe; values in logit space
    x, y = xy[:, 0], xy[:, 1]
    r = 0.25 + 0.5 * (0.5 + 0.5 * np.sin(2.6 * x + 0.7))
    g = 0.35 + 0.4 * (0.5 + 0.5 * np.cos(2.1 * y - 0.4))
    b = 0.30 + 0.4 * (0.5 + 0.5 * np.sin(1.7 * (x + y)))
    return logit(np.clip(np.stack([r, g, b], axis=1), 0.02, 0.98))


def _plane(rng, n, extent=1.2):
    side = int(np.ceil(np.sqrt(n)))
    spacing = 2 * extent / side
    gx, gy = np.meshgrid(np.arange(side), np.arange(side), indexing="xy")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n].astype(np.float64)
    xy = -extent + spacing * (grid + 0.5) + rng.uniform(-0.25, 0.25, (n, 2)) * spacing
    pos = np.column_stack([xy, rng.normal(0.0, 0.004, n)])
    s_xy = np.log(0.75 * spacing) + rng.normal(0.0, 0.08, (n, 2))
    log_scale = np.column_stack([s_xy, np.full(n, np.log(0.2 * spacing))])
    dc = _plane_texture(xy) + rng.normal(0.0, 0.15, (n, 3))
    return pos, log_scale, _z_quaternions(rng, n), rng.uniform(2.0, 3.0, n), dc


def _blob(rng, n, center=(0.0, 0.0, 0.45), radii=(0.42, 0.32, 0.42)):
    # points on/in an ellipsoid shell
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0.75, 1.0, n) ** (1 / 3)
    pos = np.asarray(center) + d * np.asarray(radii) * r[:, None]
    size = 1.6 * (np.prod(radii) * 4.2 / n) ** (1 / 3)
    log_scale = np.log(size) + rng.normal(0.0, 0.12, (n, 3))
    shade = 0.5 + 0.3 * d[:, 2:3]
    base = np.array([0.78, 0.42, 0.22])
    dc = logit(np.clip(base * shade + 0.05, 0.02, 0.98)) + rng.normal(0.0, 0.2, (n, 3))
    return pos, log_scale, _random_quaternions(rng, n), rng.uniform(2.5, 3.5, n), dc


def make_toy_scene(kind: str, n: int, seed: int = 0) -> GaussianScene:
    """Procedural scene: ``plane``, ``object_on_plane`` or ``random``; deterministic per args."""
    if n < 1:
        raise ValueError("n must be >= 1")
    kinds = {"plane": 1, "object_on_plane": 2, "random": 3}
    if kind not in kinds:
        raise ValueError(f"unknown toy scene kind {kind!r}")
    rng = np.random.default_rng([int(seed), n, kinds[kind]])
    labels = {}
    if kind == "plane":
        pos, ls, rot, op, dc = _plane(rng, n)
        labels["plane"] = np.arange(n)
    elif kind == "object_on_plane":
        n_obj = max(1, int(round(0.3 * n))) if n > 1 else 1
        n_plane = n - n_obj
        parts = [_blob(rng, n_obj)]
        if n_plane:
            parts.insert(0, _plane(rng, n_plane))
        pos, ls, rot, op, dc = (np.concatenate(p, axis=0) for p in zip(*parts))
        labels["plane"] = np.arange(n_plane)
        labels["object"] = np.arange(n_plane, n)
    elif kind == "random":
        pos = rng.uniform(-0.8, 0.8, (n, 3))
        size = 1.4 * (4.1 / n) ** (1 / 3)
        ls = np.log(size) + rng.normal(0.0, 0.25, (n, 3))
        rot = _random_quaternions(rng, n)
        op = rng.uniform(-0.5, 2.5, n)
        dc = rng.normal(0.0, 1.0, (n, 3))
        labels["all"] = np.arange(n)
    else:
        raise ValueError(f"unknown toy scene kind {kind!r}")
    rest = rng.normal(0.0, 0.15, (n, 9))
    return GaussianScene(pos, ls, normalize_quaternions(rot), op, dc, rest,
                         background=np.array([0.05, 0.05, 0.08]),
                         scene_id=f"{kind}-{n}-{seed}", labels=labels)


# ---------------------------------------------------------------------------
# model-level distortions

def distort_noise(scene: GaussianScene, sigma: float, seed: int = 0) -> GaussianScene:
    """Add N(0, sigma^2) to every non-position field; quaternions are renormalized."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return scene.replace()
    rng = np.random.default_rng([int(seed), 101])
    n = len(scene)
    rot = scene.rotations + sigma * rng.standard_normal((n, 4))
    return scene.replace(
        log_scales=scene.log_scales + sigma * rng.standard_normal((n, 3)),
        rotations=normalize_quaternions(rot),
        opacity_logits=scene.opacity_logits + sigma * rng.standard_normal(n),
        color_dc=scene.color_dc + sigma * rng.standard_normal((n, 3)),
        color_rest=scene.color_rest + sigma * rng.standard_normal((n, 9)),
    )


def distort_prune(scene: GaussianScene, fraction: float, seed: int = 0) -> GaussianScene:
    if not 0 <= fraction < 1:
        raise ValueError("prune fraction must be in [0, 1)")
    n = len(scene)
    k = int(np.floor(fraction * n))
    if k == 0:
        return scene.replace()
    rng = np.random.default_rng([int(seed), 102])
    drop = rng.choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return scene.subset(keep)


def distort_clone(scene: GaussianScene, fraction: float, seed: int = 0,
                  jitter: float = 1e-3) -> GaussianScene:
    """Duplicate floor(fraction*N) Gaussians; clones are appended, both copies get half opacity."""
    if not 0 <= fraction < 1:
        raise ValueError("clone fraction must be in [0, 1)")
    n = len(scene)
    k = int(np.floor(fraction * n))
    if k == 0:
        return scene.replace()
    rng = np.random.default_rng([int(seed), 103])
    idx = np.sort(rng.choice(n, size=k, replace=False))
    halved = logit(0.5 * sigmoid(scene.opacity_logits[idx]))
    op = scene.opacity_logits.copy()
    op[idx] = halved
    pos_new = scene.positions[idx] + jitter * rng.standard_normal((k, 3))
    labels = {}
    for name, members in scene.labels.items():
        extra = n + np.nonzero(np.isin(idx, members))[0]
        labels[name] = np.concatenate([members, extra])
    return GaussianScene(
        np.concatenate([scene.positions, pos_new]),
        np.concatenate([scene.log_scales, scene.log_scales[idx]]),
        np.concatenate([scene.rotations, scene.rotations[idx]]),
        np.concatenate([op, halved]),
        np.concatenate([scene.color_dc, scene.color_dc[idx]]),
        np.concatenate([scene.color_rest, scene.color_rest[idx]]),
        scene.background, scene.scene_id, labels,
    )
