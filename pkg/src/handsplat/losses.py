"""Training objectives: image terms, inter-pose consistency, embedding smoothness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numba
import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .nn import MLP, GradientTape


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image terms


def l1_loss(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _blur(img, win):
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim(x: np.ndarray, y: np.ndarray, win_size: int = 11, sigma: float = 1.5, grad: bool = False):
    """Mean SSIM over all pixels/channels with a zero-padded Gaussian window.

    With ``grad=True`` returns (ssim, d ssim / d x).
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    win = gaussian_window(win_size, sigma)
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sxx + syy + C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not grad:
        return value
    n = S.size
    d_mx = (2 * my * A2 / (B1 * B2) - S * 2 * mx / B1) / n
    d_sxx = -S / B2 / n
    d_sxy = 2 * A1 / (B1 * B2) / n
    gx = _blur(d_mx - 2 * mx * d_sxx - my * d_sxy, win) + 2 * x * _blur(d_sxx, win) + y * _blur(d_sxy, win)
    return value, gx


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class BaseLosses:
    rgb: float
    mask: float
    ssim: float
    g_color: np.ndarray
    g_alpha: np.ndarray


def base_losses(color: np.ndarray, alpha: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                w_mask: float = 0.1, w_ssim: float = 0.01) -> BaseLosses:
    """L1 colour, L1 alpha-vs-mask and 1 - SSIM, with weighted image-space gradients."""
    if color.shape != gt.shape or alpha.shape != mask.shape:
        raise ValueError("render and ground truth resolutions differ")
    l_rgb, g_rgb = l1_loss(color, gt)
    l_mask, g_mask = l1_loss(alpha, mask)
    s, g_s = ssim(color, gt, grad=True)
    return BaseLosses(l_rgb, l_mask, 1.0 - s, g_rgb - w_ssim * g_s, w_mask * g_mask)


# ---------------------------------------------------------------------------
# inter-pose consistency


def pose_similarity(theta_t, theta_prev, phi: MLP, delta: float = 1.5, grad: bool = False):
    """exp(-|phi(a) - phi(b)|^2 / (2 delta^2)); optionally with phi parameter gradients of omega."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    ta, tb = GradientTape(), GradientTape()
    fa = phi.forward(np.asarray(theta_t).reshape(1, -1), ta).astype(np.float64)
    fb = phi.forward(np.asarray(theta_prev).reshape(1, -1), tb).astype(np.float64)
    diff = fa - fb
    omega = float(np.exp(-(diff * diff).sum() / (2 * delta * delta)))
    if not grad:
        return omega
    g = -omega * diff / (delta * delta)
    _, ga = phi.backward(ta, g)
    _, gb = phi.backward(tb, -g)
    return omega, {k: ga[k] + gb[k] for k in ga}


@numba.njit(cache=True)
def _grid_nn(query, ref, cell, origin, dims, cell_start, cell_end, sorted_idx, out):
    gx, gy, gz = dims[0], dims[1], dims[2]
    for i in range(query.shape[0]):
        qx, qy, qz = query[i, 0], query[i, 1], query[i, 2]
        cx = int(np.floor((qx - origin[0]) / cell))
        cy = int(np.floor((qy - origin[1]) / cell))
        cz = int(np.floor((qz - origin[2]) / cell))
        # rings beyond this radius cover no grid cell
        rmax = max(max(abs(cx), abs(cx - gx + 1)), max(max(abs(cy), abs(cy - gy + 1)), max(abs(cz), abs(cz - gz + 1))))
        best = np.inf
        best_j = -1
        r = 0
        while r <= rmax:
            for ix in range(max(cx - r, 0), min(cx + r, gx - 1) + 1):
                for iy in range(max(cy - r, 0), min(cy + r, gy - 1) + 1):
                    for iz in range(max(cz - r, 0), min(cz + r, gz - 1) + 1):
                        if max(abs(ix - cx), max(abs(iy - cy), abs(iz - cz))) != r:
                            continue
                        c = (ix * gy + iy) * gz + iz
                        for k in range(cell_start[c], cell_end[c]):
                            j = sorted_idx[k]
                            dx = qx - ref[j, 0]
                            dy = qy - ref[j, 1]
                            dz = qz - ref[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best or (d == best and j < best_j):
                                best = d
                                best_j = j
            # everything in later rings is at least r cells away
            if best_j >= 0 and best < (r * cell) * (r * cell):
                break
            r += 1
        out[i] = best_j


def correspondence(points_t: np.ndarray, points_prev: np.ndarray) -> np.ndarray:
    """Nearest previous point for every current point (ties -> smallest index), uniform-grid search."""
    q = np.ascontiguousarray(points_t, dtype=np.float64)
    ref = np.ascontiguousarray(points_prev, dtype=np.float64)
    if len(ref) == 0:
        raise ValueError("previous cloud is empty")
    if not (np.isfinite(q).all() and np.isfinite(ref).all()):
        raise NumericError("non-finite positions in nearest-neighbour correspondence")
    lo = ref.min(0)
    hi = ref.max(0)
    extent = np.maximum(hi - lo, 1e-9)
    cell = float(max(np.prod(extent) / len(ref), 1e-30) ** (1 / 3))
    cell = max(cell, float(extent.max()) / 256.0, 1e-9)
    if not math.isfinite(cell):
        raise NumericError("reference cloud extent overflows in correspondence")
    dims = np.floor(extent / cell).astype(np.int64) + 1
    cid3 = np.minimum(np.floor((ref - lo) / cell).astype(np.int64), dims - 1)
    cid = (cid3[:, 0] * dims[1] + cid3[:, 1]) * dims[2] + cid3[:, 2]
    sorted_idx = np.argsort(cid, kind="stable")
    n_cells = int(np.prod(dims))
    cs = cid[sorted_idx]
    cell_start = np.searchsorted(cs, np.arange(n_cells), "left")
    cell_end = np.searchsorted(cs, np.arange(n_cells), "right")
    out = np.empty(len(q), dtype=np.int64)
    # queries far outside the grid would overflow integer cell indices
    far = np.abs((q - lo) / cell).max(1) > 1e9
    if far.any():
        out[far] = correspondence_bruteforce(q[far], ref)
    near = np.ascontiguousarray(q[~far])
    res = np.empty(len(near), dtype=np.int64)
    _grid_nn(near, ref, cell, lo, dims, cell_start, cell_end, sorted_idx, res)
    out[~far] = res
    return out


def correspondence_bruteforce(points_t: np.ndarray, points_prev: np.ndarray) -> np.ndarray:
    q = np.asarray(points_t, dtype=np.float64)
    ref = np.asarray(points_prev, dtype=np.float64)
    out = np.empty(len(q), dtype=np.int64)
    for i in range(len(q)):
        dx = q[i, 0] - ref[:, 0]
        dy = q[i, 1] - ref[:, 1]
        dz = q[i, 2] - ref[:, 2]
        out[i] = int(np.argmin(dx * dx + dy * dy + dz * dz))  # argmin returns the first minimum
    return out


class ConsistencyMemory:
    """EMA cache of attribute bundles from previous iterations, keyed by Gaussian index."""

    def __init__(self, phi: MLP, decay: float = 0.9, delta: float = 1.5):
        self.phi = phi
        self.decay = decay
        self.delta = delta
        self.bundles: np.ndarray | None = None
        self.positions: np.ndarray | None = None
        self.theta: np.ndarray | None = None
        self.resets = 0

    @property
    def seeded(self) -> bool:
        return self.bundles is not None

    def seed(self, bundles, positions, theta):
        self.bundles = np.array(bundles, dtype=np.float64)
        self.positions = np.array(positions, dtype=np.float64)
        self.theta = np.array(theta, dtype=np.float64)

    def update(self, bundles, positions, theta, pi: np.ndarray | None = None):
        """M_bar <- decay * M_bar[pi] + (1 - decay) * M_t, then the current cloud becomes 'previous'."""
        bundles = np.asarray(bundles, dtype=np.float64)
        if not self.seeded or self.bundles.shape[1] != bundles.shape[1]:
            if self.seeded:
                self.resets += 1
            self.seed(bundles, positions, theta)
            return
        if pi is None:
            pi = correspondence(positions, self.positions)
        self.bundles = self.decay * self.bundles[pi] + (1 - self.decay) * bundles
        self.positions = np.array(positions, dtype=np.float64)
        self.theta = np.array(theta, dtype=np.float64)

    def to_tensors(self) -> dict[str, np.ndarray]:
        if not self.seeded:
            return {}
        return {"mem.bundles": self.bundles, "mem.positions": self.positions, "mem.theta": self.theta}

    def load_tensors(self, t):
        if "mem.bundles" in t:
            self.seed(t["mem.bundles"], t["mem.positions"], t["mem.theta"])


@dataclass
class ConsistencyResult:
    loss: float
    omega: float
    g_bundles: np.ndarray
    pi: np.ndarray
    g_phi: dict | None = None


def consistency_loss(bundles: np.ndarray, positions: np.ndarray, theta: np.ndarray,
                     memory: ConsistencyMemory, train_phi: bool = False) -> ConsistencyResult | None:
    """omega * mean_i |M_t^i - M_bar^{pi(i)}|^2 against the detached memory (None if unseeded)."""
    if not memory.seeded or len(memory.positions) == 0:
        return None
    bundles = np.asarray(bundles, dtype=np.float64)
    if memory.bundles.shape[1] != bundles.shape[1]:
        return None
    pi = correspondence(positions, memory.positions)
    diff = bundles - memory.bundles[pi]
    sq = float((diff * diff).sum()) / len(bundles)
    if train_phi:
        omega, g_omega = pose_similarity(theta, memory.theta, memory.phi, memory.delta, grad=True)
        g_phi = {k: v * sq for k, v in g_omega.items()}
    else:
        omega = pose_similarity(theta, memory.theta, memory.phi, memory.delta)
        g_phi = None
    return ConsistencyResult(omega * sq, omega, 2.0 * omega * diff / len(bundles), pi, g_phi)


# ---------------------------------------------------------------------------
# embedding smoothness


def knn_indices(points: np.ndarray, k: int = 5) -> np.ndarray:
    n = len(points)
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((n, 0), dtype=np.int64)
    _, idx = cKDTree(points).query(points, k=k + 1)
    return idx[:, 1:]


def smoothness_loss(e_g: np.ndarray, positions: np.ndarray | None = None, k: int = 5,
                    neighbors: np.ndarray | None = None):
    """Mean squared embedding difference to the k nearest canonical neighbours, with gradient."""
    if neighbors is None:
        neighbors = knn_indices(np.asarray(positions, dtype=np.float64), k)
    e = np.asarray(e_g, dtype=np.float64)
    if neighbors.shape[1] == 0:
        return 0.0, np.zeros_like(e)
    diff = e[:, None, :] - e[neighbors]
    n_pairs = neighbors.size
    loss = float((diff * diff).sum()) / n_pairs
    g = 2.0 * diff / n_pairs
    grad = g.sum(1)
    np.add.at(grad, neighbors.reshape(-1), -g.reshape(-1, e.shape[1]))
    return loss, grad


# ---------------------------------------------------------------------------
# total


@dataclass
class LossWeights:
    mask: float = 0.1
    ssim: float = 0.01
    con: float = 0.01
    smooth: float = 1.0


def total_loss(rgb, mask, ssim_term, con, smooth, weights: LossWeights = LossWeights()):
    """L_rgb + w_mask L_mask + w_ssim L_ssim + w_con L_con + w_smooth L_smooth (no perceptual term)."""
    for name, v in (("rgb", rgb), ("mask", mask), ("ssim", ssim_term), ("con", con), ("smooth", smooth)):
        if not math.isfinite(float(v)):
            raise NumericError(f"non-finite loss component: {name}")
    base = rgb + weights.mask * mask + weights.ssim * ssim_term
    return base + weights.con * con + weights.smooth * smooth


@dataclass
class MetricsRow:
    iteration: int
    l_rgb: float
    l_mask: float
    l_ssim: float
    l_con: float
    l_smooth: float
    omega: float
    psnr: float


class MetricsLog:
    """Append-only CSV of per-iteration loss terms."""

    columns = [f.name for f in fields(MetricsRow)]

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            self.reset()

    def reset(self):
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def truncate(self, iteration: int):
        """Drop rows past ``iteration`` (used when resuming from an older checkpoint)."""
        rows = [r for r in self.read() if int(r["iteration"]) <= iteration]
        self.reset()
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            for r in rows:
                w.writerow([r[c] for c in self.columns])

    def append(self, row: MetricsRow):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([getattr(row, c) for c in self.columns])

    def read(self) -> list[dict]:
        with self.path.open() as fh:
            return list(csv.DictReader(fh))
