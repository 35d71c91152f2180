"""Differentiable CPU splatting: projection, tile compositing and the vector-Jacobian product.

Conventions
-----------
* Cameras follow the OpenCV convention (x right, y down, z forward); pixel
  ``(x, y)`` has its centre at image coordinates ``(x, y)``.
* Gaussians are composited front to back in order of mean camera depth
  (a single global sort per view).
* A Gaussian's footprint is cut off where its Mahalanobis radius squared
  exceeds ``CUTOFF_R2`` (footprint < 1.2e-12); this makes tile culling exact.
* A pixel stops accepting Gaussians once its transmittance falls below
  ``T_MIN``; the backward pass applies the same rule.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .scene import GaussianScene, ParamGroup, TRAINABLE_GROUPS, sigmoid

NEAR = 0.01
DILATION = 0.3
T_MIN = 1e-4
CUTOFF_R2 = 55.0
DET_MIN = 1e-12
SH_C1 = 0.4886025119029199
TILE = 16


@dataclass(frozen=True, eq=False)
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    view_id: str = "view"

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)


def look_at(eye, target, width, height, fov_deg=45.0, up=(0.0, 0.0, 1.0), view_id="view"):
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraView(focal, focal, width / 2.0, height / 2.0, R, -R @ eye,
                      width, height, view_id)


def orbit_views(n, width=64, height=64, radius=3.2, elevation=(28.0, 42.0),
                azimuth=(-50.0, 50.0), fov_deg=45.0, target=(0.0, 0.0, 0.15),
                phase=0.0, prefix="v"):
    """``n`` cameras spread evenly in azimuth on a spherical cap, looking at ``target``.

    ``phase`` in [0, 1) shifts the azimuth grid by a fraction of one step, which is how
    held-out views are interleaved with training views.
    """
    views = []
    for i in range(n):
        f = (i + 0.5 + phase) / n
        az = np.radians(azimuth[0] + (azimuth[1] - azimuth[0]) * f)
        el = np.radians(elevation[0] + (elevation[1] - elevation[0])
                        * (0.5 + 0.5 * np.sin(2 * np.pi * f * 1.5)))
        eye = radius * np.array([np.cos(el) * np.sin(az), -np.cos(el) * np.cos(az), np.sin(el)])
        views.append(look_at(eye + np.asarray(target), target, width, height, fov_deg,
                             view_id=f"{prefix}{i:03d}"))
    return views


# ---------------------------------------------------------------------------
# projection

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotmat_vjp(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion ``q`` given dL/dR = ``G`` (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = lambda i, j: G[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([dw, dx, dy, dz], -1)


@dataclass(frozen=True, eq=False)
class Projection:
    mean2d: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray       # (N, 2, 2)
    depth: np.ndarray       # (N,)
    visible: np.ndarray     # (N,) bool
    # intermediates kept for the backward pass
    M: np.ndarray = field(repr=False)          # (N, 2, 3) = J @ R_cam
    R: np.ndarray = field(repr=False)          # (N, 3, 3) Gaussian rotation
    scale: np.ndarray = field(repr=False)      # (N, 3)
    qhat: np.ndarray = field(repr=False)       # (N, 4)
    qnorm: np.ndarray = field(repr=False)      # (N,)


def project(scene, camera: CameraView) -> Projection:
    """Perspective projection of every Gaussian (a single ``Gaussian`` is accepted too)."""
    if not isinstance(scene, GaussianScene):
        g = scene
        scene = GaussianScene([g.position], [g.log_scale], [g.rotation], [g.opacity_logit],
                              [g.color_dc], [g.color_rest])
    Rc, tc = camera.rotation, camera.translation
    p = scene.positions @ Rc.T + tc
    depth = p[:, 2]
    visible = depth > NEAR
    tz = np.where(visible, depth, 1.0)
    tx, ty = p[:, 0], p[:, 1]
    mean2d = np.stack([camera.fx * tx / tz + camera.cx, camera.fy * ty / tz + camera.cy], 1)
    n = len(scene)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * tx / tz ** 2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * ty / tz ** 2
    M = J @ Rc
    qnorm = np.linalg.norm(scene.rotations, axis=1)
    qhat = scene.rotations / qnorm[:, None]
    R = quat_to_rotmat(qhat)
    s = np.exp(scene.log_scales)
    A = R * s[:, None, :]
    cov = M @ (A @ A.transpose(0, 2, 1)) @ M.transpose(0, 2, 1)
    cov = cov + DILATION * np.eye(2)
    return Projection(mean2d, cov, depth, visible, M, R, s, qhat, qnorm)


def sh_basis(scene: GaussianScene, camera: CameraView) -> np.ndarray:
    d = scene.positions - camera.center
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return SH_C1 * np.stack([-d[:, 1], d[:, 2], -d[:, 0]], 1)


def gaussian_colors(scene: GaussianScene, camera: CameraView):
    """View-dependent colour sigmoid(c_dc + SH1(dir) . c_rest); also returns the SH basis."""
    Y = sh_basis(scene, camera)
    rest = scene.color_rest.reshape(-1, 3, 3)
    return sigmoid(scene.color_dc + np.einsum("nb,nbc->nc", Y, rest)), Y


# ---------------------------------------------------------------------------
# tiled compositing

@dataclass(frozen=True, eq=False)
class RenderResult:
    image: np.ndarray                 # (H, W, 3)
    contrib_den: np.ndarray           # (N,)  sum_p w_i(p)
    contrib_mask_num: np.ndarray | None   # (N,) sum_p w_i(p) M(p)
    depth_order: np.ndarray           # (N,) compositing order
    alpha: np.ndarray                 # (H, W) accumulated coverage 1 - T_final
    features: np.ndarray | None = None    # (H, W, F) when requested
    n_skipped: int = 0                # Gaussians dropped for a singular 2D covariance
    terminated: bool = False          # any pixel hit the transmittance floor


@dataclass
class _Setup:
    scene: GaussianScene
    camera: CameraView
    proj: Projection
    conic: np.ndarray        # (N, 3) a, b, c
    colors: np.ndarray       # (N, 3)
    Y: np.ndarray            # (N, 3)
    opac: np.ndarray         # (N,)
    order: np.ndarray
    tiles: list              # (x0, x1, y0, y1, gaussian index array in depth order)
    n_skipped: int


def _setup(scene: GaussianScene, camera: CameraView, tile: int = TILE) -> _Setup:
    proj = project(scene, camera)
    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    ok = det >= DET_MIN
    usable = proj.visible & ok
    n_skipped = int(np.count_nonzero(proj.visible & ~ok))
    safe = np.where(ok, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / safe, -cov[:, 0, 1] / safe, cov[:, 0, 0] / safe], 1)
    colors, Y = gaussian_colors(scene, camera)
    order = np.argsort(proj.depth, kind="stable")
    ext_x = np.sqrt(CUTOFF_R2 * np.maximum(cov[:, 0, 0], 0))
    ext_y = np.sqrt(CUTOFF_R2 * np.maximum(cov[:, 1, 1], 0))
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    tiles = []
    H, W = camera.height, camera.width
    o_usable = usable[order]
    for y0 in range(0, H, tile):
        y1 = min(H, y0 + tile)
        for x0 in range(0, W, tile):
            x1 = min(W, x0 + tile)
            hit = ((u + ext_x >= x0) & (u - ext_x <= x1 - 1)
                   & (v + ext_y >= y0) & (v - ext_y <= y1 - 1))
            idx = order[o_usable & hit[order]]
            tiles.append((x0, x1, y0, y1, idx))
    return _Setup(scene, camera, proj, conic, colors, Y, sigmoid(scene.opacity_logits),
                  order, tiles, n_skipped)


def _tile_forward(st: _Setup, tile):
    x0, x1, y0, y1, idx = tile
    px, py = np.meshgrid(np.arange(x0, x1, dtype=np.float64),
                         np.arange(y0, y1, dtype=np.float64), indexing="xy")
    px, py = px.ravel(), py.ravel()
    mu = st.proj.mean2d[idx]
    dx = px[None, :] - mu[:, 0:1]
    dy = py[None, :] - mu[:, 1:2]
    a, b, c = (st.conic[idx, k][:, None] for k in range(3))
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    inside = power >= -0.5 * CUTOFF_R2
    keep = inside.any(axis=1)
    if not keep.all():
        idx, dx, dy, power, inside = idx[keep], dx[keep], dy[keep], power[keep], inside[keep]
    g = np.where(inside, np.exp(np.minimum(power, 0.0)), 0.0)
    alpha = st.opac[idx][:, None] * g
    one_m = 1.0 - alpha
    T_incl = np.cumprod(one_m, axis=0)
    T_excl = np.empty_like(T_incl)
    if len(idx):
        T_excl[0] = 1.0
        T_excl[1:] = T_incl[:-1]
    active = T_excl >= T_MIN
    w = alpha * T_excl * active
    T_final = np.where(active, T_incl, 1.0).min(axis=0) if len(idx) else np.ones(px.size)
    # rows with no weight anywhere change neither the image nor any gradient
    live = w.any(axis=1)
    if not live.all():
        idx, dx, dy, g, alpha, one_m = idx[live], dx[live], dy[live], g[live], alpha[live], one_m[live]
        T_excl, active, w = T_excl[live], active[live], w[live]
    return dict(idx=idx, dx=dx, dy=dy, g=g, alpha=alpha, one_m=one_m, T_excl=T_excl,
                active=active, w=w, T_final=T_final, shape=(y1 - y0, x1 - x0),
                terminated=bool(len(idx) and not active.all()))


def _tile_render(st: _Setup, tile, mask, features):
    f = _tile_forward(st, tile)
    x0, x1, y0, y1, _ = tile
    idx = f["idx"]
    w = f["w"]
    bg = st.scene.background
    rgb = w.T @ st.colors[idx] + f["T_final"][:, None] * bg[None, :]
    out = dict(idx=idx, rgb=rgb, T_final=f["T_final"], den=w.sum(axis=1),
               terminated=f["terminated"])
    if mask is not None:
        out["num"] = w @ mask[y0:y1, x0:x1].ravel()
    if features is not None:
        out["feat"] = w.T @ features[idx]
    return out


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(t) for t in items]


def render(scene: GaussianScene, camera: CameraView, mask=None, features=None,
           workers: int = 1, tile: int = TILE) -> RenderResult:
    """Render ``scene`` from ``camera``.

    ``mask`` (H, W) in [0, 1] fills ``contrib_mask_num``; ``features`` (N, F) are
    composited with the same weights (no background, no sigmoid).
    """
    H, W = camera.height, camera.width
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (H, W):
            raise ValueError(f"mask shape {mask.shape} != image shape {(H, W)}")
        if mask.min() < 0 or mask.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")
    if features is not None:
        features = np.asarray(features, dtype=np.float64).reshape(len(scene), -1)
    st = _setup(scene, camera, tile)
    parts = _map(lambda t: _tile_render(st, t, mask, features), st.tiles, workers)
    n = len(scene)
    image = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    den = np.zeros(n)
    num = np.zeros(n) if mask is not None else None
    feat = np.zeros((H, W, features.shape[1])) if features is not None else None
    for (x0, x1, y0, y1, _), part in zip(st.tiles, parts):
        idx = part["idx"]
        hh, ww = y1 - y0, x1 - x0
        image[y0:y1, x0:x1] = part["rgb"].reshape(hh, ww, 3)
        alpha[y0:y1, x0:x1] = 1.0 - part["T_final"].reshape(hh, ww)
        den[idx] += part["den"]
        if num is not None:
            num[idx] += part["num"]
        if feat is not None:
            feat[y0:y1, x0:x1] = part["feat"].reshape(hh, ww, -1)
    return RenderResult(np.clip(image, 0.0, 1.0), den, num, st.order, alpha, feat,
                        st.n_skipped, any(p["terminated"] for p in parts))


# ---------------------------------------------------------------------------
# backward

@dataclass
class GradientBundle:
    """Per-Gaussian gradients, one array per parameter group (positions always zero)."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color_dc: np.ndarray
    color_rest: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBundle":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, 9)))

    @classmethod
    def zeros_like_scene(cls, scene: GaussianScene) -> "GradientBundle":
        return cls.zeros(len(scene))

    def __len__(self):
        return self.position.shape[0]

    def get(self, g: ParamGroup) -> np.ndarray:
        return getattr(self, g.value)

    def items(self):
        return [(g, self.get(g)) for g in ParamGroup]

    def map(self, fn) -> "GradientBundle":
        return GradientBundle(*(fn(g, self.get(g)) for g in ParamGroup))

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(*(self.get(g) + other.get(g) for g in ParamGroup))

    def __mul__(self, k: float) -> "GradientBundle":
        return GradientBundle(*(self.get(g) * k for g in ParamGroup))

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([self.get(g).reshape(len(self), -1) for g in ParamGroup], axis=1)

    def check_matches(self, scene: GaussianScene) -> None:
        for g in ParamGroup:
            if self.get(g).shape != scene.group(g).shape:
                raise ValueError(f"gradient group {g.value} has shape {self.get(g).shape}, "
                                 f"scene has {scene.group(g).shape}")

    def allclose(self, other, **kw) -> bool:
        return all(np.allclose(self.get(g), other.get(g), **kw) for g in ParamGroup)

    def array_equal(self, other) -> bool:
        return all(np.array_equal(self.get(g), other.get(g)) for g in ParamGroup)


def _tile_backward(st: _Setup, tile, cots):
    """Per-Gaussian partials for one tile, for a stack of K cotangent images.

    The forward quantities are shared; each cotangent is then processed on its own so
    its result does not depend on how many cotangents are batched together.
    """
    f = _tile_forward(st, tile)
    x0, x1, y0, y1, _ = tile
    idx = f["idx"]
    if len(idx) == 0:
        return idx, None
    w, T_excl, active = f["w"], f["T_excl"], f["active"]
    col = st.colors[idx]
    bg = st.scene.background
    nxt = np.zeros_like(active)
    nxt[:-1] = active[1:]
    last = active & ~nxt
    # for non-last active entries 1 - alpha >= T_MIN by the termination rule
    denom = np.where(active & ~last, f["one_m"], 1.0)
    og = st.opac[idx][:, None] * f["g"]
    g = f["g"]
    dx, dy = f["dx"], f["dy"]
    qa, qb, qc = -0.5 * dx * dx, -dx * dy, -0.5 * dy * dy
    out = []
    for cot_img in cots:
        cot = cot_img[y0:y1, x0:x1, :].reshape(-1, 3)
        dcol = w @ cot
        # cc[j, p] = <colour_j, cot(p)>.  "behind" is the colour composited behind
        # Gaussian j scaled by T_excl_j, i.e. R_j / (1 - alpha_j), where R_j is the
        # weighted colour of all later Gaussians plus background.
        cc = col @ cot.T
        bc = cot @ bg
        R = np.empty_like(cc)
        R[-1] = 0.0
        if len(idx) > 1:
            R[:-1] = np.cumsum((w * cc)[::-1], axis=0)[::-1][1:]
        R += f["T_final"] * bc
        behind = np.where(last, T_excl * bc[None, :], R / denom)
        dalpha = (T_excl * cc - behind) * active
        dpow = dalpha * og
        out.append((dcol, (dalpha * g).sum(axis=1), (dpow * qa).sum(axis=1),
                    (dpow * qb).sum(axis=1), (dpow * qc).sum(axis=1)))
    return idx, out


def render_vjp_many(scene: GaussianScene, camera: CameraView, cotangents,
                    workers: int = 1, tile: int = TILE) -> list:
    """VJPs of the rendered image for several cotangents sharing one forward pass."""
    cots = np.asarray(cotangents, dtype=np.float64)
    H, W = camera.height, camera.width
    if cots.ndim != 4 or cots.shape[1:] != (H, W, 3):
        raise ValueError(f"cotangent shape {cots.shape} does not match image {(H, W, 3)}")
    if not np.all(np.isfinite(cots)):
        raise ValueError("cotangent must be finite")
    K, n = cots.shape[0], len(scene)
    st = _setup(scene, camera, tile)
    parts = _map(lambda t: _tile_backward(st, t, cots), st.tiles, workers)
    dcol = np.zeros((K, n, 3))
    dop = np.zeros((K, n))
    gcon = np.zeros((K, n, 3))
    for idx, part in parts:
        if part is None:
            continue
        for k, (pc, po, ga, gb, gc) in enumerate(part):
            dcol[k, idx] += pc
            dop[k, idx] += po
            gcon[k, idx, 0] += ga
            gcon[k, idx, 1] += gb
            gcon[k, idx, 2] += gc
    return [_to_params(st, dcol[k], dop[k], gcon[k]) for k in range(K)]


def render_vjp(scene: GaussianScene, camera: CameraView, cotangent,
               workers: int = 1, tile: int = TILE) -> GradientBundle:
    """d<cotangent, render(scene, camera).image>/d(theta) for every non-position group."""
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (camera.height, camera.width, 3):
        raise ValueError(f"cotangent shape {cot.shape} does not match image "
                         f"{(camera.height, camera.width, 3)}")
    return render_vjp_many(scene, camera, cot[None], workers, tile)[0]


def _to_params(st: _Setup, dcol, dop, gcon) -> GradientBundle:
    scene, proj = st.scene, st.proj
    n = len(scene)
    col = st.colors
    dz = dcol * col * (1.0 - col)
    d_rest = (st.Y[:, :, None] * dz[:, None, :]).reshape(n, 9)
    op = st.opac
    d_logit = dop * op * (1.0 - op)
    # conic -> covariance
    a, b, c = st.conic[:, 0], st.conic[:, 1], st.conic[:, 2]
    Kc = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    GK = np.stack([np.stack([gcon[:, 0], 0.5 * gcon[:, 1]], -1),
                   np.stack([0.5 * gcon[:, 1], gcon[:, 2]], -1)], -2)
    GC = -Kc @ GK @ Kc
    GS = proj.M.transpose(0, 2, 1) @ GC @ proj.M
    A = proj.R * proj.scale[:, None, :]
    GA = 2.0 * GS @ A
    GR = GA * proj.scale[:, None, :]
    d_logs = (GA * proj.R).sum(axis=1) * proj.scale
    gq = rotmat_vjp(proj.qhat, GR)
    gq = (gq - proj.qhat * (proj.qhat * gq).sum(1, keepdims=True)) / proj.qnorm[:, None]
    return GradientBundle(np.zeros((n, 3)), d_logs, gq, d_logit, dz, d_rest)


def bundle_groups() -> tuple:
    return TRAINABLE_GROUPS
