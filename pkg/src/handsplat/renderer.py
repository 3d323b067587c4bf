"""Tile-based differentiable Gaussian splatting on the CPU.

Projection and its backward are vectorised numpy; per-pixel compositing runs
in numba kernels parallel over 16x16 tiles. Each (tile, Gaussian) pair owns a
gradient slot, so the backward scatter is reduced in a fixed order and the
result does not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

# tbb in this environment is too old; fall back quietly
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

TILE = 16
NEAR = 0.01
EIG_FLOOR = 0.3          # px^2
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF = 4.5             # 3 sigma: contributions need -power <= 4.5


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray            # world -> camera rotation
    t: np.ndarray            # world -> camera translation
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-8:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def scaled(self, factor: float) -> "Camera":
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      self.R, self.t, int(round(self.width * factor)), int(round(self.height * factor)),
                      self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.tolist(), "t": self.t.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["R"]), np.asarray(d["t"]),
                   int(d["width"]), int(d["height"]), d.get("name", ""))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera (R, t) for an OpenCV-style camera (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, z)) > 0.99:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


# ---------------------------------------------------------------------------
# projection


@dataclass
class Projected:
    mean2d: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray       # (N, 3) floored (a, b, c)
    conic: np.ndarray       # (N, 3) inverse covariance (A, B, C)
    depth: np.ndarray       # (N,)
    valid: np.ndarray       # (N,) bool, in front of the near plane
    cache: dict = field(default_factory=dict)


def project(means: np.ndarray, cov3d: np.ndarray, cam: Camera) -> Projected:
    """Pinhole projection with first-order covariance propagation J W Sigma W^T J^T."""
    means = np.asarray(means, dtype=np.float64)
    tc = means @ cam.R.T + cam.t
    z = tc[:, 2]
    valid = z > NEAR
    zs = np.where(valid, z, 1.0)
    x, y = tc[:, 0], tc[:, 1]
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    n = len(means)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs ** 2
    Tm = J @ cam.R
    S = Tm @ cov3d @ np.swapaxes(Tm, 1, 2)
    a, b, c = S[:, 0, 0], 0.5 * (S[:, 0, 1] + S[:, 1, 0]), S[:, 1, 1]
    half = 0.5 * (a - c)
    root = np.sqrt(half * half + b * b)
    lam_min = 0.5 * (a + c) - root
    lift = np.maximum(0.0, EIG_FLOOR - lam_min)
    af, cf = a + lift, c + lift
    det = af * cf - b * b
    conic = np.stack([cf / det, -b / det, af / det], 1)
    cov2d = np.stack([af, b, cf], 1)
    cache = dict(tc=tc, zs=zs, J=J, Tm=Tm, cov3d=cov3d, raw=(a, b, c), root=root, lifted=lift > 0)
    return Projected(np.stack([u, v], 1), cov2d, conic, z, valid, cache)


def project_backward(proj: Projected, cam: Camera, g_mean2d: np.ndarray, g_conic: np.ndarray):
    """Cotangents on (mean2d, conic) -> cotangents on world means and 3D covariances."""
    ch = proj.cache
    af, b, cf = proj.cov2d.T
    A, B, C = proj.conic.T
    gA, gB, gC = g_conic.T
    # conic = inverse(cov): d<G, S^-1> = -S^-1 G S^-1 with G symmetric
    G = np.empty((len(A), 2, 2))
    G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = gA, 0.5 * gB, 0.5 * gB, gC
    Ci = np.empty_like(G)
    Ci[:, 0, 0], Ci[:, 0, 1], Ci[:, 1, 0], Ci[:, 1, 1] = A, B, B, C
    gS = -Ci @ G @ Ci
    ga, gb, gc = gS[:, 0, 0], gS[:, 0, 1] + gS[:, 1, 0], gS[:, 1, 1]
    # eigenvalue floor: S_f = S + (floor - lam_min) I where active
    a, b_raw, c = ch["raw"]
    root = np.maximum(ch["root"], 1e-30)
    act = ch["lifted"]
    gl = -(ga + gc) * act
    ga = ga + gl * (0.5 - 0.25 * (a - c) / root)
    gc = gc + gl * (0.5 + 0.25 * (a - c) / root)
    gb = gb + gl * (-b_raw / root)
    G2 = np.empty_like(G)
    G2[:, 0, 0], G2[:, 0, 1], G2[:, 1, 0], G2[:, 1, 1] = ga, 0.5 * gb, 0.5 * gb, gc
    Tm, cov3d = ch["Tm"], ch["cov3d"]
    g_cov3d = np.swapaxes(Tm, 1, 2) @ G2 @ Tm
    gTm = 2.0 * G2 @ Tm @ cov3d
    gJ = gTm @ cam.R.T
    tc, zs = ch["tc"], ch["zs"]
    x, y = tc[:, 0], tc[:, 1]
    fx, fy = cam.fx, cam.fy
    gtc = np.zeros_like(tc)
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    gtc[:, 0] = gu * fx / zs + gJ[:, 0, 2] * (-fx / zs ** 2)
    gtc[:, 1] = gv * fy / zs + gJ[:, 1, 2] * (-fy / zs ** 2)
    gtc[:, 2] = (gu * (-fx * x / zs ** 2) + gv * (-fy * y / zs ** 2)
                 + gJ[:, 0, 0] * (-fx / zs ** 2) + gJ[:, 0, 2] * (2 * fx * x / zs ** 3)
                 + gJ[:, 1, 1] * (-fy / zs ** 2) + gJ[:, 1, 2] * (2 * fy * y / zs ** 3))
    gtc[~proj.valid] = 0.0
    g_cov3d[~proj.valid] = 0.0
    return gtc @ cam.R, g_cov3d


# ---------------------------------------------------------------------------
# binning


@dataclass
class Binning:
    order: np.ndarray        # Gaussian ids sorted front to back (valid only)
    pair_gauss: np.ndarray   # (P,) Gaussian id per (tile, Gaussian) pair, tile-major, depth order within
    tile_ranges: np.ndarray  # (n_tiles, 2) start/end into pair arrays
    tiles_x: int
    tiles_y: int


def bin_gaussians(proj: Projected, width: int, height: int) -> Binning:
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    idx = np.flatnonzero(proj.valid)
    order = idx[np.lexsort((idx, proj.depth[idx]))]
    m = proj.mean2d[order]
    ext = 3.0 * np.sqrt(proj.cov2d[order][:, [0, 2]])
    lo = m - ext
    hi = m + ext
    # pixel centres sit at integer + 0.5
    x0 = np.clip(np.floor((lo[:, 0] - 0.5) / TILE), 0, tiles_x).astype(np.int64)
    x1 = np.clip(np.floor((hi[:, 0] - 0.5) / TILE) + 1, 0, tiles_x).astype(np.int64)
    y0 = np.clip(np.floor((lo[:, 1] - 0.5) / TILE), 0, tiles_y).astype(np.int64)
    y1 = np.clip(np.floor((hi[:, 1] - 0.5) / TILE) + 1, 0, tiles_y).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    nxr = np.repeat(nx, counts)
    tx = np.repeat(x0, counts) + local % np.maximum(nxr, 1)
    ty = np.repeat(y0, counts) + local // np.maximum(nxr, 1)
    tile_id = ty * tiles_x + tx
    perm = np.argsort(tile_id, kind="stable")
    tile_sorted = tile_id[perm]
    pair_gauss = order[rank[perm]]
    n_tiles = tiles_x * tiles_y
    starts = np.searchsorted(tile_sorted, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_sorted, np.arange(n_tiles), side="right")
    return Binning(order, pair_gauss.astype(np.int64), np.stack([starts, ends], 1).astype(np.int64),
                   tiles_x, tiles_y)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(parallel=True, cache=True)
def _raster_fwd(tile_ranges, pair_gauss, mean2d, conic, opac, color, bg, width, height, tiles_x,
                image, alpha_img, last_idx, n_contrib, t_final):
    n_tiles = tile_ranges.shape[0]
    for tile in numba.prange(n_tiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = tile_ranges[tile, 0]
        end = tile_ranges[tile, 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                last = start
                cnt = 0
                for k in range(start, end):
                    gi = pair_gauss[k]
                    dx = fx - mean2d[gi, 0]
                    dy = fy - mean2d[gi, 1]
                    power = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
                    if power > 0.0 or power < -CUTOFF:
                        continue
                    a = min(ALPHA_MAX, opac[gi] * np.exp(power))
                    if a < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    w = a * T
                    r += color[gi, 0] * w
                    g += color[gi, 1] * w
                    b += color[gi, 2] * w
                    T = test_T
                    last = k + 1
                    cnt += 1
                image[py, px, 0] = r + T * bg[0]
                image[py, px, 1] = g + T * bg[1]
                image[py, px, 2] = b + T * bg[2]
                alpha_img[py, px] = 1.0 - T
                t_final[py, px] = T
                last_idx[py, px] = last
                n_contrib[py, px] = cnt


@numba.njit(parallel=True, cache=True)
def _raster_bwd(tile_ranges, pair_gauss, mean2d, conic, opac, color, bg, width, height, tiles_x,
                last_idx, t_final, g_img, g_alpha, pair_grad):
    # pair_grad columns: mean2d (2), conic (3), opacity (1), colour (3)
    n_tiles = tile_ranges.shape[0]
    for tile in numba.prange(n_tiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = tile_ranges[tile, 0]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                Tf = t_final[py, px]
                T = Tf
                gr = g_img[py, px, 0]
                gg = g_img[py, px, 1]
                gb = g_img[py, px, 2]
                ga_out = g_alpha[py, px]
                bg_dot = bg[0] * gr + bg[1] * gg + bg[2] * gb
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                last_a = 0.0
                last_r = 0.0
                last_g = 0.0
                last_b = 0.0
                for k in range(last_idx[py, px] - 1, start - 1, -1):
                    gi = pair_gauss[k]
                    dx = fx - mean2d[gi, 0]
                    dy = fy - mean2d[gi, 1]
                    power = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
                    if power > 0.0 or power < -CUTOFF:
                        continue
                    G = np.exp(power)
                    raw = opac[gi] * G
                    a = min(ALPHA_MAX, raw)
                    if a < ALPHA_MIN:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    pair_grad[k, 6] += w * gr
                    pair_grad[k, 7] += w * gg
                    pair_grad[k, 8] += w * gb
                    acc_r = last_a * last_r + (1.0 - last_a) * acc_r
                    acc_g = last_a * last_g + (1.0 - last_a) * acc_g
                    acc_b = last_a * last_b + (1.0 - last_a) * acc_b
                    last_a = a
                    last_r = color[gi, 0]
                    last_g = color[gi, 1]
                    last_b = color[gi, 2]
                    d_a = T * ((color[gi, 0] - acc_r) * gr + (color[gi, 1] - acc_g) * gg
                               + (color[gi, 2] - acc_b) * gb)
                    d_a += (ga_out - bg_dot) * Tf / (1.0 - a)
                    if raw > ALPHA_MAX:
                        continue
                    pair_grad[k, 5] += G * d_a
                    gpow = opac[gi] * G * d_a
                    # power = -0.5 (A dx^2 + C dy^2) - B dx dy, dx = pixel - mean
                    pair_grad[k, 0] += gpow * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                    pair_grad[k, 1] += gpow * (conic[gi, 2] * dy + conic[gi, 1] * dx)
                    pair_grad[k, 2] += gpow * (-0.5 * dx * dx)
                    pair_grad[k, 3] += gpow * (-dx * dy)
                    pair_grad[k, 4] += gpow * (-0.5 * dy * dy)


@numba.njit(cache=True)
def _reduce_pairs(pair_gauss, pair_grad, out, mean_abs):
    # fixed pair order, so identical sums for any thread count
    for k in range(pair_gauss.shape[0]):
        gi = pair_gauss[k]
        for c in range(out.shape[1]):
            out[gi, c] += pair_grad[k, c]
        mean_abs[gi, 0] += pair_grad[k, 0]
        mean_abs[gi, 1] += pair_grad[k, 1]


# ---------------------------------------------------------------------------
# public API


@dataclass
class RenderOutput:
    color: np.ndarray        # (H, W, 3)
    alpha: np.ndarray        # (H, W)
    n_contrib: np.ndarray    # (H, W)
    cache: dict = field(default_factory=dict, repr=False)


def rasterize(proj: Projected, colors: np.ndarray, opacities: np.ndarray, cam: Camera,
              bg=(0.0, 0.0, 0.0), dtype=np.float64) -> RenderOutput:
    binning = bin_gaussians(proj, cam.width, cam.height)
    H, W = cam.height, cam.width
    mean2d = np.ascontiguousarray(proj.mean2d, dtype=dtype)
    conic = np.ascontiguousarray(proj.conic, dtype=dtype)
    opac = np.ascontiguousarray(opacities, dtype=dtype).reshape(-1)
    col = np.ascontiguousarray(colors, dtype=dtype)
    bgv = np.asarray(bg, dtype=dtype)
    image = np.zeros((H, W, 3), dtype=dtype)
    alpha = np.zeros((H, W), dtype=dtype)
    t_final = np.ones((H, W), dtype=dtype)
    last_idx = np.zeros((H, W), dtype=np.int64)
    n_contrib = np.zeros((H, W), dtype=np.int64)
    _raster_fwd(binning.tile_ranges, binning.pair_gauss, mean2d, conic, opac, col, bgv, W, H,
                binning.tiles_x, image, alpha, last_idx, n_contrib, t_final)
    cache = dict(binning=binning, mean2d=mean2d, conic=conic, opac=opac, color=col, bg=bgv,
                 last_idx=last_idx, t_final=t_final, proj=proj, cam=cam, dtype=dtype)
    return RenderOutput(image, alpha, n_contrib, cache)


@dataclass
class RasterGrads:
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    mean2d_abs: np.ndarray   # |summed screen-space gradient| per Gaussian, for densification


def rasterize_backward(out: RenderOutput, g_image: np.ndarray, g_alpha: np.ndarray | None = None) -> RasterGrads:
    ch = out.cache
    b: Binning = ch["binning"]
    dtype = ch["dtype"]
    H, W = out.alpha.shape
    n = len(ch["opac"])
    g_image = np.ascontiguousarray(g_image, dtype=dtype)
    g_alpha = np.zeros((H, W), dtype=dtype) if g_alpha is None else np.ascontiguousarray(g_alpha, dtype=dtype)
    pair_grad = np.zeros((len(b.pair_gauss), 9), dtype=np.float64)
    _raster_bwd(b.tile_ranges, b.pair_gauss, ch["mean2d"], ch["conic"], ch["opac"], ch["color"], ch["bg"],
                W, H, b.tiles_x, ch["last_idx"], ch["t_final"], g_image, g_alpha, pair_grad)
    total = np.zeros((n, 9))
    mean_sum = np.zeros((n, 2))
    _reduce_pairs(b.pair_gauss, pair_grad, total, mean_sum)
    return RasterGrads(total[:, 0:2], total[:, 2:5], total[:, 5], total[:, 6:9],
                       np.linalg.norm(mean_sum, axis=1))


def render(means, cov3d, colors, opacities, cam: Camera, bg=(0.0, 0.0, 0.0), dtype=np.float64) -> RenderOutput:
    proj = project(means, cov3d, cam)
    return rasterize(proj, colors, opacities, cam, bg, dtype)


def render_backward(out: RenderOutput, g_image, g_alpha=None):
    """Returns (g_means, g_cov3d, g_colors, g_opacities, screen-space gradient norms)."""
    rg = rasterize_backward(out, g_image, g_alpha)
    g_means, g_cov = project_backward(out.cache["proj"], out.cache["cam"], rg.mean2d, rg.conic)
    return g_means, g_cov, rg.color, rg.opacity, rg.mean2d_abs


def rasterize_bruteforce(proj: Projected, colors, opacities, cam: Camera, bg=(0.0, 0.0, 0.0)):
    """Reference compositor: every pixel against every visible Gaussian, no tiling."""
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.reshape(-1) + 0.5
    py = ys.reshape(-1) + 0.5
    idx = np.flatnonzero(proj.valid)
    order = idx[np.lexsort((idx, proj.depth[idx]))]
    T = np.ones(H * W)
    done = np.zeros(H * W, dtype=bool)
    img = np.zeros((H * W, 3))
    opacities = np.asarray(opacities).reshape(-1)
    for gi in order:
        dx = px - proj.mean2d[gi, 0]
        dy = py - proj.mean2d[gi, 1]
        A, B, C = proj.conic[gi]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        a = np.minimum(ALPHA_MAX, opacities[gi] * np.exp(power))
        use = (~done) & (power <= 0) & (power >= -CUTOFF) & (a >= ALPHA_MIN)
        test_T = T * (1 - a)
        stop = use & (test_T < T_MIN)
        done |= stop
        use &= ~stop
        img[use] += (a * T)[use, None] * colors[gi]
        T = np.where(use, test_T, T)
    img += T[:, None] * np.asarray(bg)
    return img.reshape(H, W, 3), (1 - T).reshape(H, W)


def set_threads(n: int | None):
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
