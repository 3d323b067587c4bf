"""Structural coordinates: static + dynamic bone basis and angular-radial descriptors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, GradientTape
from .skeleton import BoneTopology, NUM_ARTICULATED, axis_angle_to_matrix

DEFAULT_TAU = 0.08
OFFSET_SCALE = 0.02   # metres, bound on dynamic endpoint offsets
MIN_BONE = 1e-8
ZERO_R = 1e-12


def smoothing_kernel(topology: BoneTopology) -> np.ndarray:
    """0.5 on the diagonal, 0.25 between bones sharing a joint, 0 elsewhere."""
    K = 0.25 * topology.adjacency().astype(np.float64)
    np.fill_diagonal(K, 0.5)
    return K


def chain_kernel(n: int) -> np.ndarray:
    """Kernel of an n-bone chain b0-b1-...; handy for small worked cases."""
    K = np.zeros((n, n))
    np.fill_diagonal(K, 0.5)
    idx = np.arange(n - 1)
    K[idx, idx + 1] = K[idx + 1, idx] = 0.25
    return K


def _softmax(w: np.ndarray) -> np.ndarray:
    e = np.exp(w - w.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def smooth_attention(logits: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Softmax, spread over neighbouring bones by ``kernel``, renormalised to sum 1."""
    s = _softmax(np.asarray(logits))
    u = s @ kernel.T
    total = u.sum(-1, keepdims=True)
    assert np.all(total > 0), "smoothing kernel produced zero mass"
    return u / total


def smooth_attention_backward(logits: np.ndarray, kernel: np.ndarray, g: np.ndarray) -> np.ndarray:
    s = _softmax(np.asarray(logits))
    u = s @ kernel.T
    total = u.sum(-1, keepdims=True)
    w = u / total
    gu = (g - (g * w).sum(-1, keepdims=True)) / total
    gs = gu @ kernel
    return s * (gs - (gs * s).sum(-1, keepdims=True))


@dataclass
class StructuralBasis:
    p: np.ndarray                 # (M, 3) bone starts, posed space
    q: np.ndarray                 # (M, 3) bone ends
    provenance: list[tuple[str, int]] = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.p)

    def static_mask(self) -> np.ndarray:
        return np.array([k == "static" for k, _ in self.provenance], dtype=bool)


def static_bones(posed_joints: np.ndarray, topology: BoneTopology) -> tuple[np.ndarray, np.ndarray]:
    E = topology.as_array()
    return posed_joints[E[:, 0]].copy(), posed_joints[E[:, 1]].copy()


# ---------------------------------------------------------------------------
# dynamic bones


@dataclass
class DynamicBoneParams:
    w_s_logits: np.ndarray   # (M_d, B)
    w_e_logits: np.ndarray
    t_s: np.ndarray          # (M_d, B) in [0, 1]
    t_e: np.ndarray
    delta_p: np.ndarray      # (M_d, 3) posed space, metres
    delta_q: np.ndarray


def generator_output_width(num_static: int) -> int:
    # two attention heads, per-bone interpolation for each endpoint, two offsets
    return 4 * num_static + 6


def split_generator_output(raw: np.ndarray, num_static: int) -> dict[str, np.ndarray]:
    B = num_static
    return {
        "w_s": raw[:, :B], "w_e": raw[:, B:2 * B],
        "t_s": raw[:, 2 * B:3 * B], "t_e": raw[:, 3 * B:4 * B],
        "d_p": raw[:, 4 * B:4 * B + 3], "d_q": raw[:, 4 * B + 3:4 * B + 6],
    }


def interpolate_endpoints(weights: np.ndarray, t: np.ndarray, bone_u: np.ndarray, bone_v: np.ndarray,
                          delta: np.ndarray) -> np.ndarray:
    """sum_b w_b [(1 - t_b) u_b + t_b v_b] + delta, for (M_d, B) weights/t."""
    pts = (1 - t)[..., None] * bone_u[None] + t[..., None] * bone_v[None]
    return np.einsum("mb,mbk->mk", weights, pts) + delta


class DynamicBoneGenerator:
    """MLP head producing ``num_dynamic`` virtual bones from (theta, canonical joints)."""

    def __init__(self, topology: BoneTopology, canonical_joints: np.ndarray, num_dynamic: int = 20,
                 hidden=(64, 64), dtype=np.float32, rng=None, use_t: bool = True, use_delta: bool = True):
        self.topology = topology
        self.kernel = smoothing_kernel(topology)
        self.num_static = len(topology)
        self.num_dynamic = int(num_dynamic)
        self.canonical = np.asarray(canonical_joints, dtype=np.float64).reshape(-1)
        self.use_t = use_t
        self.use_delta = use_delta
        width = generator_output_width(self.num_static) * self.num_dynamic
        # gate starts open: a closed gate would collapse every virtual bone onto one point
        self.net = MLP(3 * NUM_ARTICULATED + self.canonical.size, width, hidden, name="dyn",
                       gate_init=1.0, dtype=dtype, rng=rng)

    def net_input(self, theta: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(theta, dtype=np.float64).reshape(-1), self.canonical])

    def decode(self, raw: np.ndarray) -> DynamicBoneParams:
        parts = split_generator_output(raw.reshape(self.num_dynamic, -1).astype(np.float64), self.num_static)
        half = np.full_like(parts["t_s"], 0.5)
        zero = np.zeros_like(parts["d_p"])
        return DynamicBoneParams(
            w_s_logits=parts["w_s"], w_e_logits=parts["w_e"],
            t_s=1 / (1 + np.exp(-parts["t_s"])) if self.use_t else half,
            t_e=1 / (1 + np.exp(-parts["t_e"])) if self.use_t else half,
            delta_p=OFFSET_SCALE * np.tanh(parts["d_p"]) if self.use_delta else zero,
            delta_q=OFFSET_SCALE * np.tanh(parts["d_q"]) if self.use_delta else zero,
        )

    def forward(self, theta, posed_joints, root_rotation=None, tape: GradientTape | None = None):
        """Returns (p, q, params, cache) with p, q of shape (M_d, 3)."""
        raw = self.net.forward(self.net_input(theta)[None], tape)[0]
        prm = self.decode(raw)
        R = np.eye(3) if root_rotation is None else np.asarray(root_rotation, dtype=np.float64)
        u, v = static_bones(np.asarray(posed_joints, dtype=np.float64), self.topology)
        ws = smooth_attention(prm.w_s_logits, self.kernel)
        we = smooth_attention(prm.w_e_logits, self.kernel)
        # offsets are predicted in the wrist frame and carried into posed space
        dp = prm.delta_p @ R.T
        dq = prm.delta_q @ R.T
        p = interpolate_endpoints(ws, prm.t_s, u, v, dp)
        q = interpolate_endpoints(we, prm.t_e, u, v, dq)
        p, q = regularize_degenerate(p, q, we, u, v)
        cache = dict(raw=raw, prm=prm, ws=ws, we=we, u=u, v=v, R=R)
        return p, q, prm, cache

    def backward(self, cache, gp: np.ndarray, gq: np.ndarray, tape: GradientTape):
        """Cotangents on endpoints -> generator parameter gradients."""
        prm, u, v, R = cache["prm"], cache["u"], cache["v"], cache["R"]
        raw = split_generator_output(cache["raw"].reshape(self.num_dynamic, -1).astype(np.float64),
                                     self.num_static)
        g_raw = np.zeros((self.num_dynamic, generator_output_width(self.num_static)))
        parts = split_generator_output(g_raw, self.num_static)
        for g, wkey, tkey, dkey, W, t in (
            (gp, "w_s", "t_s", "d_p", cache["ws"], prm.t_s),
            (gq, "w_e", "t_e", "d_q", cache["we"], prm.t_e),
        ):
            pts = (1 - t)[..., None] * u[None] + t[..., None] * v[None]
            gW = np.einsum("mk,mbk->mb", g, pts)
            parts[wkey][:] = smooth_attention_backward(raw[wkey], self.kernel, gW)
            if self.use_t:
                gt = W * np.einsum("mk,bk->mb", g, v - u)
                sig = 1 / (1 + np.exp(-raw[tkey]))
                parts[tkey][:] = gt * sig * (1 - sig)
            if self.use_delta:
                gd = g @ R
                parts[dkey][:] = gd * OFFSET_SCALE * (1 - np.tanh(raw[dkey]) ** 2)
        _, grads = self.net.backward(tape, g_raw.reshape(1, -1))
        return grads


def regularize_degenerate(p, q, we, u, v):
    """Stretch near-zero-length bones by 1e-6 along their most attended static bone."""
    L = np.linalg.norm(q - p, axis=1)
    bad = L < MIN_BONE
    if bad.any():
        q = q.copy()
        dom = np.argmax(we[bad], axis=1)
        d = v[dom] - u[dom]
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-30)
        q[bad] = q[bad] + 1e-6 * d
    return p, q


def generate_dynamic_bones(generator: DynamicBoneGenerator, pose, posed_joints):
    """Basis segments for the virtual bones of ``pose``."""
    R = axis_angle_to_matrix(pose.global_rotation)
    p, q, prm, _ = generator.forward(pose.theta, posed_joints, R)
    return p, q, prm


def build_basis(posed_joints, topology: BoneTopology, dynamic=None, use_static=True) -> StructuralBasis:
    ps, qs, prov = [], [], []
    if use_static:
        u, v = static_bones(np.asarray(posed_joints, dtype=np.float64), topology)
        ps.append(u)
        qs.append(v)
        prov += [("static", i) for i in range(len(u))]
    if dynamic is not None:
        ps.append(dynamic[0])
        qs.append(dynamic[1])
        prov += [("dynamic", i) for i in range(len(dynamic[0]))]
    if not ps:
        return StructuralBasis(np.zeros((0, 3)), np.zeros((0, 3)), [])
    return StructuralBasis(np.concatenate(ps), np.concatenate(qs), prov)


# ---------------------------------------------------------------------------
# descriptors


def structural_coordinates(x: np.ndarray, basis: StructuralBasis | tuple, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Per-Gaussian descriptor P (N, M): radial decay times cosine to each bone."""
    p, q = (basis.p, basis.q) if isinstance(basis, StructuralBasis) else basis
    x = np.asarray(x, dtype=np.float64)
    r = p[None] - x[:, None]
    b = (q - p)[None]
    rn = np.linalg.norm(r, axis=-1)
    bn = np.linalg.norm(b, axis=-1)
    zero = rn < ZERO_R
    rho = np.where(zero, 0.0, (r * b).sum(-1) / np.where(zero, 1.0, rn) / bn)
    d = np.exp(-(rn / tau) ** 2)
    return d * rho


def scs_partials(x: np.ndarray, p: np.ndarray, q: np.ndarray, tau: float = DEFAULT_TAU):
    """Return P and the partials dP/dr, dP/db, each (N, M, 3), with r = p - x, b = q - p."""
    x = np.asarray(x, dtype=np.float64)
    r = p[None] - x[:, None]
    b = np.broadcast_to((q - p)[None], r.shape)
    rn = np.linalg.norm(r, axis=-1)
    bn = np.linalg.norm(b, axis=-1)
    zero = rn < ZERO_R
    rn_safe = np.where(zero, 1.0, rn)
    rho = np.where(zero, 0.0, (r * b).sum(-1) / rn_safe / bn)
    d = np.exp(-(rn / tau) ** 2)
    drho_dr = b / (rn_safe * bn)[..., None] - (rho / rn_safe ** 2)[..., None] * r
    drho_db = r / (rn_safe * bn)[..., None] - (rho / bn ** 2)[..., None] * b
    dd_dr = (-2.0 * d / tau ** 2)[..., None] * r
    dP_dr = d[..., None] * drho_dr + rho[..., None] * dd_dr
    dP_db = d[..., None] * drho_db
    dP_dr[zero] = 0.0
    dP_db[zero] = 0.0
    return d * rho, dP_dr, dP_db


def scs_jacobian(x: np.ndarray, basis: StructuralBasis | tuple, tau: float = DEFAULT_TAU) -> np.ndarray:
    """dP/dx (N, M, 3); zero rows at the r = 0 singularity."""
    p, q = (basis.p, basis.q) if isinstance(basis, StructuralBasis) else basis
    _, dP_dr, _ = scs_partials(x, p, q, tau)
    return -dP_dr


def structural_coordinates_backward(x, p, q, gP: np.ndarray, tau: float = DEFAULT_TAU):
    """Pull a (N, M) cotangent back onto x (N,3), bone starts p (M,3) and ends q (M,3)."""
    _, dP_dr, dP_db = scs_partials(x, p, q, tau)
    gr = gP[..., None] * dP_dr
    gb = gP[..., None] * dP_db
    gx = -gr.sum(1)
    gp = gr.sum(0) - gb.sum(0)
    gq = gb.sum(0)
    return gx, gp, gq
