"""Parametric 21-joint hand skeleton: kinematics, skinning and bone topology."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
NUM_JOINTS = 21
# joints with children carry a local rotation; tips are leaves
ARTICULATED = tuple(1 + 4 * f + k for f in range(5) for k in range(3))
NUM_ARTICULATED = len(ARTICULATED)

_REST_DIRS = {
    # direction of each finger chain in the canonical frame (fingers along +y,
    # palm facing -z, thumb on the +x side)
    "thumb": [(0.65, 0.75, -0.25), (0.55, 0.83, -0.1), (0.45, 0.89, 0.0), (0.4, 0.92, 0.0)],
    "index": [(0.28, 1.0, 0.0), (0.06, 1.0, 0.0), (0.05, 1.0, 0.0), (0.04, 1.0, 0.0)],
    "middle": [(0.06, 1.0, 0.0), (0.0, 1.0, 0.0), (0.0, 1.0, 0.0), (0.0, 1.0, 0.0)],
    "ring": [(-0.15, 1.0, 0.0), (-0.06, 1.0, 0.0), (-0.05, 1.0, 0.0), (-0.05, 1.0, 0.0)],
    "pinky": [(-0.38, 1.0, 0.0), (-0.14, 1.0, 0.0), (-0.12, 1.0, 0.0), (-0.1, 1.0, 0.0)],
}
_REST_LENGTHS = {
    "thumb": [0.032, 0.040, 0.032, 0.028],
    "index": [0.092, 0.045, 0.026, 0.022],
    "middle": [0.088, 0.050, 0.030, 0.024],
    "ring": [0.083, 0.046, 0.028, 0.023],
    "pinky": [0.078, 0.036, 0.021, 0.020],
}
_RADII = {
    "thumb": [0.012, 0.0105, 0.0095, 0.0085],
    "index": [0.012, 0.0088, 0.0079, 0.0070],
    "middle": [0.012, 0.0090, 0.0080, 0.0071],
    "ring": [0.012, 0.0086, 0.0077, 0.0068],
    "pinky": [0.012, 0.0076, 0.0068, 0.0061],
}
CROSS_RADIUS = 0.011


class TopologyError(ValueError):
    pass


def joint_index(finger: int, k: int) -> int:
    """Index of joint ``k`` (0 = base, 3 = tip) on ``finger`` (0 = thumb)."""
    return 1 + 4 * finger + k


def joint_names() -> list[str]:
    names = ["wrist"]
    for f in FINGERS:
        names += [f"{f}{k}" for k in range(4)]
    return names


@dataclass
class SkeletonModel:
    parent: list[int]
    rest_dirs: np.ndarray            # (K, 3) unit directions from parent, row 0 unused
    bone_lengths: np.ndarray         # (K,) length of edge parent[j] -> j, entry 0 unused
    bone_radii: np.ndarray           # (K,) capsule radius of edge parent[j] -> j
    names: list[str] = field(default_factory=joint_names)
    root_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    template_vertices: np.ndarray | None = None
    skinning_weights: np.ndarray | None = None

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def canonical_joints(self) -> np.ndarray:
        J = np.zeros((self.joint_count, 3))
        J[0] = self.root_position
        for j in range(1, self.joint_count):
            J[j] = J[self.parent[j]] + self.bone_lengths[j] * self.rest_dirs[j]
        return J

    def tree_edges(self) -> list[tuple[int, int]]:
        return [(self.parent[j], j) for j in range(self.joint_count) if self.parent[j] >= 0]

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parent) if p == j]

    def validate(self) -> list[str]:
        """Return a list of violated invariants (empty when well formed)."""
        problems = []
        K = self.joint_count
        roots = [j for j, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            problems.append(f"expected exactly one root, found {len(roots)}")
        for j, p in enumerate(self.parent):
            if p >= K or p == j:
                problems.append(f"joint {j} has invalid parent {p}")
        # acyclic + connected: every joint must reach the root
        for j in range(K):
            seen, cur = set(), j
            while cur >= 0 and cur not in seen and cur < K:
                seen.add(cur)
                cur = self.parent[cur]
            if cur >= 0:
                problems.append(f"joint {j} does not reach the root")
                break
        J = self.canonical_joints
        for u, v in self.tree_edges():
            if abs(np.linalg.norm(J[v] - J[u]) - self.bone_lengths[v]) > 1e-6:
                problems.append(f"edge ({u},{v}) inconsistent with bone length")
        if self.skinning_weights is not None:
            W = self.skinning_weights
            if W.shape[1] != K:
                problems.append("skinning weight width differs from joint count")
            if (W < 0).any():
                problems.append("negative skinning weight")
            if np.abs(W.sum(1) - 1.0).max(initial=0.0) > 1e-6:
                problems.append("skinning weight rows do not sum to 1")
            if self.template_vertices is not None and len(self.template_vertices) != len(W):
                problems.append("template vertex count differs from skinning rows")
        return problems

    def to_dict(self) -> dict:
        topo = build_static_topology(self)
        return {
            "format": "handsplat-skeleton",
            "version": 1,
            "joint_names": list(self.names),
            "parents": [int(p) for p in self.parent],
            "bone_lengths": [float(x) for x in self.bone_lengths],
            "bone_radii": [float(x) for x in self.bone_radii],
            "rest_directions": self.rest_dirs.tolist(),
            "root_position": self.root_position.tolist(),
            "edges": [
                {"u": u, "v": v, "tag": t} for (u, v), t in zip(topo.edges, topo.tags)
            ] + [{"u": u, "v": v, "tag": "removed"} for u, v in topo.removed],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonModel":
        if d.get("format") != "handsplat-skeleton":
            raise TopologyError("not a skeleton definition")
        return cls(
            parent=[int(p) for p in d["parents"]],
            rest_dirs=np.asarray(d["rest_directions"], dtype=np.float64),
            bone_lengths=np.asarray(d["bone_lengths"], dtype=np.float64),
            bone_radii=np.asarray(d["bone_radii"], dtype=np.float64),
            names=list(d["joint_names"]),
            root_position=np.asarray(d.get("root_position", [0, 0, 0]), dtype=np.float64),
        )


def default_skeleton(scale: float = 1.0) -> SkeletonModel:
    """Right hand in its canonical rest pose, wrist at the origin."""
    parent = [-1]
    dirs = [np.zeros(3)]
    lengths = [0.0]
    radii = [0.0]
    for f, name in enumerate(FINGERS):
        for k in range(4):
            parent.append(0 if k == 0 else joint_index(f, k - 1))
            d = np.asarray(_REST_DIRS[name][k], dtype=np.float64)
            dirs.append(d / np.linalg.norm(d))
            lengths.append(_REST_LENGTHS[name][k] * scale)
            radii.append(_RADII[name][k] * scale)
    return SkeletonModel(
        parent=parent,
        rest_dirs=np.asarray(dirs),
        bone_lengths=np.asarray(lengths),
        bone_radii=np.asarray(radii),
    )


# ---------------------------------------------------------------------------
# topology


@dataclass
class BoneTopology:
    edges: list[tuple[int, int]]
    tags: list[str]
    removed: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.edges)

    def tag_of(self, edge: tuple[int, int]) -> str | None:
        if edge in self.removed:
            return "removed"
        for e, t in zip(self.edges, self.tags):
            if e == edge:
                return t
        return None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    def adjacency(self) -> np.ndarray:
        """Boolean (B, B) matrix, True where two distinct bones share a joint."""
        E = self.as_array()
        share = (
            (E[:, None, 0] == E[None, :, 0]) | (E[:, None, 0] == E[None, :, 1])
            | (E[:, None, 1] == E[None, :, 0]) | (E[:, None, 1] == E[None, :, 1])
        )
        np.fill_diagonal(share, False)
        return share


def build_static_topology(model: SkeletonModel) -> BoneTopology:
    """Kinematic tree minus wrist-to-finger edges (thumb kept) plus finger-base links."""
    K = model.joint_count
    if K != NUM_JOINTS or model.parent[0] != -1:
        raise TopologyError(f"expected a {NUM_JOINTS}-joint tree rooted at the wrist")
    for j in range(1, K):
        p = model.parent[j]
        if not 0 <= p < K:
            raise TopologyError(f"joint {j} has invalid parent {p}")
    tree = model.tree_edges()
    if len(tree) != K - 1:
        raise TopologyError("kinematic tree must have K-1 edges")
    bases = [joint_index(f, 0) for f in range(5)]
    for b in bases:
        if model.parent[b] != 0:
            raise TopologyError(f"finger base {b} is not attached to the wrist")

    removed = [(0, b) for b in bases[1:]]
    cross = [(bases[f], bases[f + 1]) for f in range(4)]
    edges, tags = [], []
    for e in tree:
        if e not in removed:
            edges.append(e)
            tags.append("mano")
    for e in cross:
        edges.append(e)
        tags.append("cross")
    if len(set(edges)) != len(edges) or any(u == v for u, v in edges):
        raise TopologyError("duplicate or self edges in static topology")
    return BoneTopology(edges=edges, tags=tags, removed=removed)


# ---------------------------------------------------------------------------
# rotations


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula for (..., 3) axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta < 1e-12
    axis = aa / np.where(small, 1.0, theta)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    Kx = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), Kx.shape)
    R = eye + s * Kx + (1 - c) * (Kx @ Kx)
    return np.where(small[..., None], eye, R)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(R).as_rotvec()


@dataclass
class Pose:
    axis_angle: np.ndarray                                            # (15, 3)
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64).reshape(NUM_ARTICULATED, 3)
        self.global_rotation = np.asarray(self.global_rotation, dtype=np.float64).reshape(3)
        self.global_translation = np.asarray(self.global_translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros((NUM_ARTICULATED, 3)))

    @property
    def theta(self) -> np.ndarray:
        """Flattened articulation vector (45,)."""
        return self.axis_angle.reshape(-1)

    def is_valid(self) -> bool:
        mags = np.linalg.norm(self.axis_angle, axis=1)
        return bool(np.all(mags <= np.pi + 1e-12) and np.linalg.norm(self.global_rotation) <= np.pi + 1e-12)

    def to_dict(self) -> dict:
        return {
            "axis_angle": self.axis_angle.tolist(),
            "global_rotation": self.global_rotation.tolist(),
            "global_translation": self.global_translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(
            np.asarray(d["axis_angle"]),
            np.asarray(d.get("global_rotation", [0, 0, 0])),
            np.asarray(d.get("global_translation", [0, 0, 0])),
        )


def local_rotations(model: SkeletonModel, pose: Pose) -> np.ndarray:
    K = model.joint_count
    R = np.broadcast_to(np.eye(3), (K, 3, 3)).copy()
    R[list(ARTICULATED)] = axis_angle_to_matrix(pose.axis_angle)
    R[0] = axis_angle_to_matrix(pose.global_rotation)
    return R


def global_transforms(model: SkeletonModel, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint world rotations (K,3,3) and posed joint positions (K,3)."""
    if len(pose.axis_angle) != NUM_ARTICULATED or model.joint_count != NUM_JOINTS:
        raise ValueError("pose dimensions do not match the skeleton")
    C = model.canonical_joints
    Rl = local_rotations(model, pose)
    Rg = np.empty_like(Rl)
    P = np.empty_like(C)
    Rg[0] = Rl[0]
    P[0] = Rl[0] @ C[0] + pose.global_translation
    # parents always precede children in this ordering
    for j in range(1, model.joint_count):
        p = model.parent[j]
        Rg[j] = Rg[p] @ Rl[j]
        P[j] = P[p] + Rg[p] @ (C[j] - C[p])
    return Rg, P


def forward_kinematics(model: SkeletonModel, pose: Pose) -> np.ndarray:
    return global_transforms(model, pose)[1]


def joint_skinning_matrices(model: SkeletonModel, pose: Pose) -> np.ndarray:
    """(K, 3, 4) transforms taking canonical points to the posed space of each joint."""
    Rg, P = global_transforms(model, pose)
    C = model.canonical_joints
    A = np.empty((model.joint_count, 3, 4))
    A[:, :, :3] = Rg
    A[:, :, 3] = P - np.einsum("kij,kj->ki", Rg, C)
    return A


def lbs_transform(model: SkeletonModel, pose: Pose, points: np.ndarray, weights: np.ndarray):
    """Linear blend skinning. Returns posed points (N,3) and blended transforms (N,3,4)."""
    points = np.asarray(points)
    weights = np.asarray(weights)
    if weights.shape != (len(points), model.joint_count):
        raise ValueError("skinning weights do not align with points")
    if len(weights) and np.abs(weights.sum(1) - 1.0).max() > 1e-5:
        raise ValueError("skinning weight rows must sum to 1")
    A = joint_skinning_matrices(model, pose)
    T = np.einsum("nk,kij->nij", weights.astype(np.float64), A)
    x = np.einsum("nij,nj->ni", T[:, :, :3], points) + T[:, :, 3]
    return x.astype(points.dtype, copy=False), T.astype(points.dtype, copy=False)


# ---------------------------------------------------------------------------
# template surface and skinning weights


def capsule_edges(model: SkeletonModel) -> list[tuple[int, int]]:
    """Segments that carry surface: kinematic tree plus the finger-base links."""
    topo = build_static_topology(model)
    cross = [e for e, t in zip(topo.edges, topo.tags) if t == "cross"]
    return model.tree_edges() + cross


def _capsule_radius(model: SkeletonModel, edge) -> float:
    u, v = edge
    if model.parent[v] == u:
        return float(model.bone_radii[v])
    return CROSS_RADIUS * float(model.bone_radii[1] / _RADII["thumb"][0])


def point_segment_distance(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances (N, S) from points (N,3) to segments a->b (S,3) and the segment parameter."""
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-18)
    t = np.clip(((x[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(x[:, None, :] - closest, axis=-1), t


def sample_capsule_surface(model: SkeletonModel, count: int, rng: np.random.Generator,
                           oversample: int = 6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evenly spread points on the union of capsules around the skeleton.

    Returns positions (count,3), outward normals (count,3) and the owning capsule index.
    """
    J = model.canonical_joints
    edges = capsule_edges(model)
    a = np.array([J[u] for u, _ in edges])
    b = np.array([J[v] for _, v in edges])
    r = np.array([_capsule_radius(model, e) for e in edges])
    L = np.linalg.norm(b - a, axis=1)
    area = 2 * np.pi * r * L + 4 * np.pi * r ** 2
    n_cand = max(count * oversample, 64)
    per = rng.multinomial(n_cand, area / area.sum())
    pts, owner = [], []
    for s, m in enumerate(per):
        if m == 0:
            continue
        axis = (b[s] - a[s]) / L[s]
        helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        # uniform on the capsule: choose cylinder vs caps by area
        cyl = rng.random(m) < (2 * np.pi * r[s] * L[s]) / area[s]
        phi = rng.uniform(0, 2 * np.pi, m)
        t = rng.random(m)
        ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        p_cyl = a[s] + t[:, None] * (b[s] - a[s]) + r[s] * ring
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        start_cap = (d @ axis) < 0
        p_cap = np.where(start_cap[:, None], a[s], b[s]) + r[s] * d
        pts.append(np.where(cyl[:, None], p_cyl, p_cap))
        owner.append(np.full(m, s))
    pts = np.concatenate(pts)
    owner = np.concatenate(owner)
    dist, _ = point_segment_distance(pts, a, b)
    inside = (dist < r[None] - 1e-4)
    inside[np.arange(len(pts)), owner] = False
    keep = ~inside.any(1)
    pts, owner = pts[keep], owner[keep]
    idx = farthest_point_sample(pts, count, rng)
    pts, owner = pts[idx], owner[idx]
    _, t = point_segment_distance(pts, a, b)
    ts = t[np.arange(len(pts)), owner]
    foot = a[owner] + ts[:, None] * (b[owner] - a[owner])
    nrm = pts - foot
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    return pts, nrm, owner


def farthest_point_sample(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    if count >= n:
        return np.arange(n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d = ((points - points[chosen[0]]) ** 2).sum(1)
    for i in range(1, count):
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, ((points - points[chosen[i]]) ** 2).sum(1))
    return chosen


def compute_skinning_weights(model: SkeletonModel, points: np.ndarray,
                             falloff: float = 1.5, nearest: int = 2) -> np.ndarray:
    """Row-stochastic (N, K) weights from the ``nearest`` kinematic segments.

    Each segment parent->child is driven by the parent joint; the weight is a
    Gaussian falloff of distance with scale ``falloff`` x bone radius.
    """
    J = model.canonical_joints
    edges = model.tree_edges()
    a = np.array([J[u] for u, _ in edges])
    b = np.array([J[v] for _, v in edges])
    sigma = falloff * np.array([model.bone_radii[v] for _, v in edges])
    dist, _ = point_segment_distance(np.asarray(points, dtype=np.float64), a, b)
    order = np.argsort(dist, axis=1, kind="stable")[:, :nearest]
    rows = np.arange(len(points))[:, None]
    d = dist[rows, order]
    logw = -0.5 * (d / sigma[order]) ** 2
    logw -= logw.max(1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(1, keepdims=True)
    W = np.zeros((len(points), model.joint_count))
    drivers = np.array([u for u, _ in edges])[order]
    np.add.at(W, (np.broadcast_to(rows, drivers.shape), drivers), w)
    return W


def with_template(model: SkeletonModel, count: int = 778, seed: int = 0) -> SkeletonModel:
    """Attach capsule-sampled template vertices and their skinning weights."""
    rng = np.random.default_rng(seed)
    verts, _, _ = sample_capsule_surface(model, count, rng)
    model.template_vertices = verts
    model.skinning_weights = compute_skinning_weights(model, verts)
    return model
