"""Gaussian cloud, embedding-conditioned deformation, and adaptive density control."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .nn import MLP, GradientTape, load_tensors, save_tensors

log = logging.getLogger(__name__)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# quaternion / covariance algebra, (w, x, y, z) convention


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def quat_mul_backward(a, b, g):
    """Gradients of <g, a*b> with respect to a and b."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    gw, gx, gy, gz = np.moveaxis(g, -1, 0)
    ga = np.stack([
        gw * bw + gx * bx + gy * by + gz * bz,
        -gw * bx + gx * bw - gy * bz + gz * by,
        -gw * by + gx * bz + gy * bw - gz * bx,
        -gw * bz - gx * by + gy * bx + gz * bw,
    ], -1)
    gb = np.stack([
        gw * aw + gx * ax + gy * ay + gz * az,
        -gw * ax + gx * aw + gy * az - gz * ay,
        -gw * ay - gx * az + gy * aw + gz * ax,
        -gw * az + gx * ay - gy * ax + gz * aw,
    ], -1)
    return ga, gb


def normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_backward(q, g):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    return (g - u * (u * g).sum(-1, keepdims=True)) / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (..., 4)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_to_rotmat_backward(q, G):
    w, x, y, z = np.moveaxis(q, -1, 0)
    G = [[G[..., i, j] for j in range(3)] for i in range(3)]
    gw = 2 * (-z * G[0][1] + y * G[0][2] + z * G[1][0] - x * G[1][2] - y * G[2][0] + x * G[2][1])
    gx = 2 * (y * G[0][1] + z * G[0][2] + y * G[1][0] - 2 * x * G[1][1] - w * G[1][2]
              + z * G[2][0] + w * G[2][1] - 2 * x * G[2][2])
    gy = 2 * (-2 * y * G[0][0] + x * G[0][1] + w * G[0][2] + x * G[1][0] + z * G[1][2]
              - w * G[2][0] + z * G[2][1] - 2 * y * G[2][2])
    gz = 2 * (-2 * z * G[0][0] - w * G[0][1] + x * G[0][2] + w * G[1][0] - 2 * z * G[1][1]
              + y * G[1][2] + x * G[2][0] + y * G[2][1])
    return np.stack([gw, gx, gy, gz], -1)


def axis_angle_to_quat(aa: np.ndarray) -> np.ndarray:
    aa = np.asarray(aa, dtype=np.float64)
    th = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = aa / np.where(th < 1e-12, 1.0, th)
    return np.concatenate([np.cos(th / 2), np.sin(th / 2) * axis], -1)


def covariance(rot: np.ndarray, log_scale: np.ndarray, linear: np.ndarray | None = None) -> np.ndarray:
    """A R diag(exp(2 s)) R^T A^T, PSD by construction."""
    M = quat_to_rotmat(normalize(rot)) * np.exp(log_scale)[..., None, :]
    if linear is not None:
        M = linear @ M
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(rot, log_scale, G, linear=None):
    """Gradients of <G, Sigma> with respect to the (unnormalised) quaternion and log-scale."""
    n = normalize(rot)
    R = quat_to_rotmat(n)
    S = np.exp(log_scale)
    M = R * S[..., None, :]
    Mp = M if linear is None else linear @ M
    gMp = (G + np.swapaxes(G, -1, -2)) @ Mp
    gM = gMp if linear is None else np.swapaxes(linear, -1, -2) @ gMp
    gR = gM * S[..., None, :]
    gs = (gM * R).sum(-2) * S
    gq = normalize_backward(rot, quat_to_rotmat_backward(n, gR))
    return gq, gs


# ---------------------------------------------------------------------------
# cloud


@dataclass
class GaussianCloud:
    position: np.ndarray      # (N, 3) canonical, metres
    rotation: np.ndarray      # (N, 4) quaternion (w, x, y, z)
    scale: np.ndarray         # (N, 3) log standard deviations
    color: np.ndarray         # (N, 3) RGB in [0, 1]
    opacity: np.ndarray       # (N,) logit
    e_g: np.ndarray           # (N, d)
    e_a: np.ndarray           # (N, d)
    skin_weights: np.ndarray  # (N, K)

    TRAINABLE = ("position", "rotation", "scale", "color", "opacity", "e_g", "e_a")

    def __len__(self) -> int:
        return len(self.position)

    @property
    def embed_dim(self) -> int:
        return self.e_g.shape[1]

    def alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity))

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"gs.{k}": getattr(self, k) for k in self.TRAINABLE}

    def astype(self, dtype) -> "GaussianCloud":
        kw = {f.name: getattr(self, f.name).astype(dtype) for f in fields(self)}
        return GaussianCloud(**kw)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def renormalize(self):
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)
        np.clip(self.color, 0.0, 1.0, out=self.color)

    def covariance(self) -> np.ndarray:
        return covariance(self.rotation.astype(np.float64), self.scale.astype(np.float64))

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"cloud.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "GaussianCloud":
        return cls(**{f.name: t[f"cloud.{f.name}"].copy() for f in fields(cls)})

    def save(self, path):
        save_tensors(path, self.to_tensors(), {"kind": "gaussian-cloud", "count": len(self)})

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        t, meta = load_tensors(path)
        if meta.get("kind") not in ("gaussian-cloud", "checkpoint"):
            raise ValueError(f"{path}: not a Gaussian cloud")
        return cls.from_tensors(t)


def knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k + 1)
    return d[:, 1:].mean(1)


def init_cloud(vertices: np.ndarray, skin_weights: np.ndarray, embed_dim: int = 16,
               rng: np.random.Generator | None = None, dtype=np.float32) -> GaussianCloud:
    """Gaussians on template vertices with random colour/opacity and isotropic scales."""
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(vertices)
    dist = np.maximum(knn_mean_distance(vertices, 3), 1e-4)
    cloud = GaussianCloud(
        position=np.asarray(vertices, dtype=np.float64),
        rotation=np.tile(IDENTITY_QUAT, (n, 1)),
        scale=np.repeat(np.log(dist)[:, None], 3, axis=1),
        color=rng.uniform(0.3, 0.7, (n, 3)),
        opacity=rng.normal(0.0, 0.25, n),
        e_g=rng.normal(0.0, 0.01, (n, embed_dim)),
        e_a=rng.normal(0.0, 0.01, (n, embed_dim)),
        skin_weights=np.asarray(skin_weights, dtype=np.float64),
    )
    return cloud.astype(dtype)


def export_ply(cloud: GaussianCloud, path):
    """ASCII point cloud with the usual splatting attribute names plus 8-bit colour."""
    n = len(cloud)
    rgb = np.clip(np.round(cloud.color * 255), 0, 255).astype(int)
    props = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in props]
    lines += ["property uchar red", "property uchar green", "property uchar blue", "end_header"]
    data = np.concatenate([cloud.position, cloud.color, cloud.opacity[:, None], cloud.scale,
                           cloud.rotation], 1).astype(np.float64)
    for row, c in zip(data, rgb):
        lines.append(" ".join(f"{v:.7g}" for v in row) + f" {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# deformation decoders


@dataclass
class DeformationOutput:
    dx: np.ndarray
    dq: np.ndarray
    ds: np.ndarray
    dc: np.ndarray
    dx_f: np.ndarray
    dq_f: np.ndarray
    ds_f: np.ndarray
    dc_f: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DeformationOutput":
        z3 = np.zeros((n, 3))
        qi = np.tile(IDENTITY_QUAT, (n, 1))
        return cls(z3, qi, z3.copy(), z3.copy(), z3.copy(), qi.copy(), z3.copy(), z3.copy())


GEO_OUT, APP_OUT, FUSION_OUT = 10, 3, 13


class Decoders:
    """Geometry, appearance and fusion offset heads, all zero-gated at start."""

    def __init__(self, embed_dim: int, coord_dim: int, hidden=(64, 64), dtype=np.float32, rng=None,
                 gate_init: float = 0.0):
        rng = np.random.default_rng(1) if rng is None else rng
        self.embed_dim = embed_dim
        self.coord_dim = coord_dim
        feat = coord_dim + 12
        self.geo = MLP(embed_dim + feat, GEO_OUT, hidden, "geo", gate_init, dtype, rng)
        self.app = MLP(embed_dim + feat, APP_OUT, hidden, "app", gate_init, dtype, rng)
        self.fusion = MLP(2 * embed_dim + feat, FUSION_OUT, hidden, "fusion", gate_init, dtype, rng)
        self.nonfinite = 0

    def nets(self):
        return (self.geo, self.app, self.fusion)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.nets():
            out.update(net.parameters())
        return out

    def forward(self, e_g, e_a, coords, motion, tapes=None):
        feat = np.concatenate([coords, motion], 1)
        tg, ta, tf = tapes if tapes is not None else (None, None, None)
        geo = self.geo.forward(np.concatenate([e_g, feat], 1), tg).astype(np.float64)
        app = self.app.forward(np.concatenate([e_a, feat], 1), ta).astype(np.float64)
        fus = self.fusion.forward(np.concatenate([e_g, e_a, feat], 1), tf).astype(np.float64)
        bad = ~(np.isfinite(geo).all(1) & np.isfinite(app).all(1) & np.isfinite(fus).all(1))
        if bad.any():
            self.nonfinite += int(bad.sum())
            log.warning("non-finite decoder output for %d Gaussians; offsets zeroed", int(bad.sum()))
            geo[bad] = 0.0
            app[bad] = 0.0
            fus[bad] = 0.0
        one = np.zeros(4)
        one[0] = 1.0
        out = DeformationOutput(
            dx=geo[:, :3], dq=one + geo[:, 3:7], ds=geo[:, 7:10], dc=app,
            dx_f=fus[:, :3], dq_f=one + fus[:, 3:7], ds_f=fus[:, 7:10], dc_f=fus[:, 10:13],
        )
        return out, bad

    def backward(self, tapes, g: DeformationOutput, bad=None):
        """Cotangents on raw offsets -> (g_e_g, g_e_a, g_coords, param grads)."""
        g_geo = np.concatenate([g.dx, g.dq, g.ds], 1)
        g_app = g.dc
        g_fus = np.concatenate([g.dx_f, g.dq_f, g.ds_f, g.dc_f], 1)
        if bad is not None and bad.any():
            for a in (g_geo, g_app, g_fus):
                a[bad] = 0.0
        gi_geo, pg = self.geo.backward(tapes[0], g_geo)
        gi_app, pa = self.app.backward(tapes[1], g_app)
        gi_fus, pf = self.fusion.backward(tapes[2], g_fus)
        d, M = self.embed_dim, self.coord_dim
        g_eg = gi_geo[:, :d] + gi_fus[:, :d]
        g_ea = gi_app[:, :d] + gi_fus[:, d:2 * d]
        g_coords = gi_geo[:, d:d + M] + gi_app[:, d:d + M] + gi_fus[:, 2 * d:2 * d + M]
        grads = {**pg, **pa, **pf}
        return g_eg, g_ea, g_coords, grads


@dataclass
class DeformedState:
    x: np.ndarray       # (N, 3) canonical deformed centres
    rot: np.ndarray     # (N, 4) composed quaternion (unnormalised parts normalised inside)
    scale: np.ndarray   # (N, 3) log-scale
    color: np.ndarray   # (N, 3) clamped
    cache: dict


def apply_offsets(cloud: GaussianCloud, off: DeformationOutput) -> DeformedState:
    """x' = x + dx + dx_f, q' = dq_f dq q, s' = s + ds + ds_f, c' = clamp(c + dc + dc_f)."""
    x = cloud.position.astype(np.float64) + off.dx + off.dx_f
    q0 = normalize(cloud.rotation.astype(np.float64))
    dqn = normalize(off.dq)
    dqfn = normalize(off.dq_f)
    inner = quat_mul(dqn, q0)
    rot = quat_mul(dqfn, inner)
    s = cloud.scale.astype(np.float64) + off.ds + off.ds_f
    c_raw = cloud.color.astype(np.float64) + off.dc + off.dc_f
    c = np.clip(c_raw, 0.0, 1.0)
    cache = dict(q0=q0, dqn=dqn, dqfn=dqfn, inner=inner, c_raw=c_raw)
    return DeformedState(x, rot, s, c, cache)


def apply_offsets_backward(cloud: GaussianCloud, off: DeformationOutput, st: DeformedState,
                           gx, grot, gs, gc):
    """Returns (cloud attribute grads dict, DeformationOutput of raw-offset grads)."""
    ch = st.cache
    gdqfn, ginner = quat_mul_backward(ch["dqfn"], ch["inner"], grot)
    gdqn, gq0 = quat_mul_backward(ch["dqn"], ch["q0"], ginner)
    gc_raw = gc * ((ch["c_raw"] >= 0.0) & (ch["c_raw"] <= 1.0))
    g_off = DeformationOutput(
        dx=gx, dq=normalize_backward(off.dq, gdqn), ds=gs, dc=gc_raw,
        dx_f=gx, dq_f=normalize_backward(off.dq_f, gdqfn), ds_f=gs, dc_f=gc_raw,
    )
    g_cloud = {
        "position": gx,
        "rotation": normalize_backward(cloud.rotation.astype(np.float64), gq0),
        "scale": gs,
        "color": gc_raw,
    }
    return g_cloud, g_off


def deform(cloud: GaussianCloud, coords: np.ndarray, motion: np.ndarray, decoders: Decoders):
    """Deformed canonical attributes (x', q', s', c') for the current pose."""
    off, _ = decoders.forward(cloud.e_g, cloud.e_a, coords.astype(decoders.geo.dtype),
                              motion.astype(decoders.geo.dtype))
    return apply_offsets(cloud, off)


def pose_cloud(cloud: GaussianCloud, skeleton, pose, offsets: np.ndarray | None = None):
    """LBS-posed centres (of x + offsets when given) and the (N, 12) motion embedding."""
    from .skeleton import lbs_transform

    x = cloud.position.astype(np.float64)
    if offsets is not None:
        x = x + offsets
    xp, T = lbs_transform(skeleton, pose, x, cloud.skin_weights.astype(np.float64))
    return xp, T.reshape(len(x), 12)


# ---------------------------------------------------------------------------
# densification


@dataclass
class DensifyConfig:
    grad_threshold: float = 0.25      # mean screen-space gradient of the per-pixel-summed loss
    split_scale: float = 0.004        # metres; larger Gaussians are split
    split_factor: float = 1.6
    min_opacity: float = 0.005
    max_count: int = 200_000


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    skipped: bool = False


def densify_and_prune(cloud: GaussianCloud, grad_accum: np.ndarray, grad_count: np.ndarray,
                      cfg: DensifyConfig = DensifyConfig(), rng: np.random.Generator | None = None):
    """Clone small / split large high-gradient Gaussians, drop near-transparent ones.

    Returns (new cloud, source index per new Gaussian with -1 for fresh
    children, report).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(cloud)
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = mean_grad >= cfg.grad_threshold
    big = np.exp(cloud.scale.astype(np.float64)).max(1) > cfg.split_scale
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    report = DensifyReport()
    if n + len(clone) + len(split) > cfg.max_count:
        report.skipped = True
        log.warning("densification skipped: %d Gaussians would exceed cap %d",
                    n + len(clone) + len(split), cfg.max_count)
        clone = split = np.zeros(0, dtype=np.int64)

    keep = np.ones(n, dtype=bool)
    keep[split] = False
    parts = [cloud.subset(np.flatnonzero(keep))]
    src = [np.flatnonzero(keep)]
    if len(clone):
        parts.append(cloud.subset(clone))
        src.append(np.full(len(clone), -1))
    if len(split):
        children = cloud.subset(np.repeat(split, 2))
        std = np.exp(children.scale.astype(np.float64))
        R = quat_to_rotmat(normalize(children.rotation.astype(np.float64)))
        offs = np.einsum("nij,nj->ni", R, rng.normal(size=std.shape) * std)
        children.position = (children.position + offs).astype(cloud.position.dtype)
        children.scale = (children.scale - np.log(cfg.split_factor)).astype(cloud.scale.dtype)
        parts.append(children)
        src.append(np.full(len(children), -1))
    merged = GaussianCloud(**{f.name: np.concatenate([getattr(p, f.name) for p in parts])
                              for f in fields(GaussianCloud)})
    src = np.concatenate(src)
    report.cloned, report.split = len(clone), len(split)

    alive = merged.alpha() >= cfg.min_opacity
    report.pruned = int((~alive).sum())
    return merged.subset(np.flatnonzero(alive)), src[alive], report
