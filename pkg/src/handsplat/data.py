"""Synthetic oracle hand: procedural Gaussian cloud, pose trajectories, camera rig, dataset I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull

from .gaussians import GaussianCloud, covariance, knn_mean_distance
from .renderer import Camera, look_at, render
from .skeleton import (ARTICULATED, NUM_ARTICULATED, Pose, SkeletonModel, capsule_edges,
                       compute_skinning_weights, default_skeleton, global_transforms,
                       joint_index, joint_skinning_matrices, sample_capsule_surface)

log = logging.getLogger(__name__)

SPLITS = ("train", "novel-pose", "novel-view")
TIPS = tuple(joint_index(f, 3) for f in range(5))
PALM_JOINTS = (0, joint_index(1, 0), joint_index(2, 0), joint_index(3, 0), joint_index(4, 0))
CONTACT_DISTANCE = 0.01


class DataConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class DataConfig:
    num_gaussians: int = 8000
    num_frames: int = 60
    novel_pose_frames: int = 10
    train_cameras: int = 8
    heldout_cameras: int = 4
    resolution: int = 256
    rig_radius: float = 0.5
    focal: float = 430.0                 # pixels at 256 px; scaled with resolution
    articulation_range: float = 1.0      # 0 freezes the hand in one pose
    global_rotation_range: float = 0.35  # radians
    grip_switch_prob: float = 0.12
    ou_rate: float = 0.35
    ou_noise: float = 0.08
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def validate(self):
        bad = []
        if self.num_gaussians < 1:
            bad.append("num_gaussians")
        if self.num_frames < 1:
            bad.append("num_frames")
        if not 0 <= self.novel_pose_frames < self.num_frames:
            bad.append("novel_pose_frames")
        if self.train_cameras < 1:
            bad.append("train_cameras")
        if self.heldout_cameras < 0:
            bad.append("heldout_cameras")
        if self.resolution < 8:
            bad.append("resolution")
        if self.rig_radius <= 0.2:
            bad.append("rig_radius")
        if self.focal <= 0:
            bad.append("focal")
        if not 0 <= self.articulation_range <= 1:
            bad.append("articulation_range")
        if not 0 <= self.global_rotation_range <= np.pi:
            bad.append("global_rotation_range")
        if not 0 <= self.grip_switch_prob <= 1:
            bad.append("grip_switch_prob")
        if not 0 < self.ou_rate <= 1 or self.ou_noise < 0:
            bad.append("ou_rate/ou_noise")
        if len(self.background) != 3:
            bad.append("background")
        if bad:
            raise DataConfigError(f"invalid data config field(s): {', '.join(bad)}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataConfigError(f"unknown data config field(s): {', '.join(unknown)}")
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# joint limits: flexion about the axis perpendicular to bone and palm normal, abduction in the palm plane


@dataclass
class JointLimits:
    flex_axis: np.ndarray     # (15, 3)
    abd_axis: np.ndarray      # (15, 3)
    flex: np.ndarray          # (15, 2) min/max radians
    abd: np.ndarray           # (15, 2)

    def check(self, pose: Pose, tol: float = 1e-9) -> bool:
        aa = pose.axis_angle
        f = (aa * self.flex_axis).sum(1)
        a = (aa * self.abd_axis).sum(1)
        rest = aa - f[:, None] * self.flex_axis - a[:, None] * self.abd_axis
        return bool(np.all(f >= self.flex[:, 0] - tol) and np.all(f <= self.flex[:, 1] + tol)
                    and np.all(a >= self.abd[:, 0] - tol) and np.all(a <= self.abd[:, 1] + tol)
                    and np.abs(rest).max() <= 1e-9)

    def compose(self, flex: np.ndarray, abd: np.ndarray) -> np.ndarray:
        return flex[:, None] * self.flex_axis + abd[:, None] * self.abd_axis


def joint_limits(model: SkeletonModel) -> JointLimits:
    palm = np.array([0.0, 0.0, -1.0])
    flex_axis, abd_axis, flex, abd = [], [], [], []
    J = model.canonical_joints
    for j in ARTICULATED:
        child = j + 1
        d = J[child] - J[j]
        d /= np.linalg.norm(d)
        fa = np.cross(d, palm)
        fa /= np.linalg.norm(fa)
        aa = np.cross(fa, d)        # in-plane axis, orthogonal to the flexion axis
        aa /= np.linalg.norm(aa)
        flex_axis.append(fa)
        abd_axis.append(aa)
        finger, k = (j - 1) // 4, (j - 1) % 4
        if finger == 0:
            flex.append([(-0.3, 0.9), (0.0, 1.0), (-0.2, 1.3)][k])
            abd.append((-0.4, 0.4) if k == 0 else (0.0, 0.0))
        else:
            flex.append([(-0.3, 1.5), (0.0, 1.8), (0.0, 1.3)][k])
            abd.append((-0.3, 0.3) if k == 0 else (0.0, 0.0))
    return JointLimits(np.array(flex_axis), np.array(abd_axis), np.array(flex, float), np.array(abd, float))


# grip targets per finger joint (base, middle, distal)
_OPEN = {0: (0.1, 0.1, 0.1), 1: (0.15, 0.2, 0.15)}
_GRIP = {0: (0.8, 0.8, 1.1), 1: (1.35, 1.75, 1.2)}


def sample_trajectory(model: SkeletonModel, cfg: DataConfig, rng: np.random.Generator) -> list[Pose]:
    """Ornstein-Uhlenbeck flexion around open/grip targets, clipped to joint limits."""
    lim = joint_limits(model)
    n = cfg.num_frames
    grip = rng.random() < 0.5
    target_jitter = rng.normal(0, 0.2, NUM_ARTICULATED)
    flex = np.zeros(NUM_ARTICULATED)
    abd = np.zeros(NUM_ARTICULATED)
    g_rot = rng.normal(0, 0.5, 3)
    poses = []
    for t in range(n):
        if rng.random() < cfg.grip_switch_prob:
            grip = not grip
            target_jitter = rng.normal(0, 0.2, NUM_ARTICULATED)
        mu = np.empty(NUM_ARTICULATED)
        for i, j in enumerate(ARTICULATED):
            finger, k = (j - 1) // 4, (j - 1) % 4
            table = _GRIP if grip else _OPEN
            mu[i] = table[min(finger, 1)][k] + target_jitter[i]
        noise = rng.normal(0, cfg.ou_noise, NUM_ARTICULATED)
        flex = flex + cfg.ou_rate * (mu - flex) + noise
        flex = np.clip(flex, lim.flex[:, 0], lim.flex[:, 1])
        abd = abd + cfg.ou_rate * (0 - abd) + rng.normal(0, cfg.ou_noise, NUM_ARTICULATED)
        abd = np.clip(abd, lim.abd[:, 0], lim.abd[:, 1])
        g_rot = g_rot + 0.3 * (0 - g_rot) + rng.normal(0, 0.15, 3)
        g_rot = np.clip(g_rot, -1, 1)
        s = cfg.articulation_range
        aa = lim.compose(np.clip(s * flex, lim.flex[:, 0], lim.flex[:, 1]),
                         np.clip(s * abd, lim.abd[:, 0], lim.abd[:, 1]))
        poses.append(Pose(aa, s * cfg.global_rotation_range * g_rot, np.zeros(3)))
    return poses


def palm_contact(model: SkeletonModel, pose: Pose) -> bool:
    """True if some fingertip skin lies within 1 cm of the palmar palm surface, above the palm."""
    Rg, J = global_transforms(model, pose)
    # the palm is rigid with the wrist: canonical plane z = 0, palmar side -z
    to_palm = Rg[0].T
    palm_r = float(model.bone_radii[PALM_JOINTS[1]])
    C = model.canonical_joints
    poly2 = C[list(PALM_JOINTS)][:, :2]
    for tip in TIPS:
        local = to_palm @ (J[tip] - J[0]) + C[0]
        gap = -local[2] - palm_r - float(model.bone_radii[tip])
        if abs(gap) <= CONTACT_DISTANCE and _inside_hull(local[:2], poly2, margin=0.01):
            return True
    return False


def _inside_hull(p, pts, margin=0.0):
    hull = ConvexHull(pts)
    # hull.equations: n.x + c <= 0 inside
    return bool(np.all(hull.equations[:, :2] @ p + hull.equations[:, 2] <= margin))


# ---------------------------------------------------------------------------
# oracle cloud with pose-dependent skin effects


@dataclass
class OracleCloud:
    base: GaussianCloud
    normals: np.ndarray       # (N, 3) canonical outward normals
    joint_slot: np.ndarray    # (N,) index into ARTICULATED of the nearest knuckle
    influence: np.ndarray     # (N,) falloff around that knuckle
    palmar: np.ndarray        # (N,) in [0, 1]
    dorsal: np.ndarray        # (N,) in [0, 1]
    reach: np.ndarray         # (N,) broad falloff around the nearest knuckle


_TINTS = np.array([
    [1.06, 0.90, 0.84],   # thumb
    [0.94, 1.02, 0.90],   # index
    [1.00, 0.93, 1.06],   # middle
    [0.90, 0.96, 1.02],   # ring
    [1.10, 1.00, 0.90],   # pinky
    [1.00, 1.00, 1.00],   # palm
])
_SKIN = np.array([0.82, 0.60, 0.50])
_NAIL = np.array([0.42, 0.30, 0.30])
_KNUCKLE = np.array([0.95, 0.86, 0.80])
_FLUSH = np.array([0.15, 0.45, 0.45])


def _value_noise(x: np.ndarray, rng: np.random.Generator, waves: int = 8) -> np.ndarray:
    k = rng.normal(size=(waves, 3))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    k *= rng.uniform(2 * np.pi / 0.03, 2 * np.pi / 0.008, (waves, 1))
    ph = rng.uniform(0, 2 * np.pi, waves)
    return np.sin(x @ k.T + ph).mean(1) * np.sqrt(2.0)


def _frame_from_normal(n: np.ndarray) -> np.ndarray:
    """Quaternions (w,x,y,z) rotating +z onto each normal."""
    z = np.array([0.0, 0.0, 1.0])
    c = n @ z
    axis = np.cross(z, n)
    s = np.linalg.norm(axis, axis=1)
    q = np.concatenate([(1 + c)[:, None], axis], 1)
    flip = (1 + c) < 1e-9
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def build_oracle_cloud(model: SkeletonModel, count: int, rng: np.random.Generator) -> OracleCloud:
    pts, nrm, owner = sample_capsule_surface(model, count, rng, oversample=3)
    n = len(pts)
    J = model.canonical_joints
    edges = capsule_edges(model)
    finger = np.empty(n, dtype=np.int64)
    distal = np.zeros(n, dtype=bool)
    t_along = np.zeros(n)
    for s, (u, v) in enumerate(edges):
        sel = owner == s
        if model.parent[v] == u and u != 0:
            finger[sel] = (v - 1) // 4
        elif u == 0 and v == joint_index(0, 0):
            finger[sel] = 0
        else:
            finger[sel] = 5
        if v in TIPS and model.parent[v] == u:
            distal |= sel
            d = J[v] - J[u]
            t_along[sel] = (pts[sel] - J[u]) @ d / (d @ d)
    color = _SKIN * _TINTS[finger]
    color = color * (1 + 0.12 * _value_noise(pts, rng))[:, None]
    fine = _value_noise(pts * 3.0, rng)
    color = color * (1 + 0.05 * np.sign(fine))[:, None]
    nail = distal & (nrm[:, 2] > 0.35) & (t_along > 0.35)
    color[nail] = _NAIL * (1 + 0.05 * _value_noise(pts[nail], rng))[:, None]
    color = np.clip(color, 0, 1)

    spacing = knn_mean_distance(pts, 3)
    scale = np.log(np.stack([0.75 * spacing, 0.75 * spacing, 0.25 * spacing], 1))
    cloud = GaussianCloud(
        position=pts, rotation=_frame_from_normal(nrm), scale=scale, color=color,
        opacity=np.full(n, 4.0), e_g=np.zeros((n, 1)), e_a=np.zeros((n, 1)),
        # sharper skinning than the trained model uses
        skin_weights=compute_skinning_weights(model, pts, falloff=0.8, nearest=2),
    )
    knuckles = np.array([J[j] for j in ARTICULATED])
    d = np.linalg.norm(pts[:, None] - knuckles[None], axis=-1)
    slot = np.argmin(d, 1)
    dmin = d[np.arange(n), slot]
    influence = np.exp(-0.5 * (dmin / 0.009) ** 2)
    reach = np.exp(-0.5 * (dmin / 0.02) ** 2)
    palmar = np.clip(-nrm[:, 2], 0, 1)
    dorsal = np.clip(nrm[:, 2], 0, 1)
    return OracleCloud(cloud, nrm, slot, influence, palmar, dorsal, reach)


def flexion_amount(pose: Pose, lim: JointLimits) -> np.ndarray:
    f = (pose.axis_angle * lim.flex_axis).sum(1)
    return np.clip(f / 1.3, 0.0, 1.0)


def pose_oracle(oracle: OracleCloud, model: SkeletonModel, pose: Pose, lim: JointLimits):
    """Posed means, covariances, colours and opacities of the oracle for one pose."""
    c = oracle.base
    flex = flexion_amount(pose, lim)[oracle.joint_slot]
    s = flex * oracle.influence
    # skin bunches and darkens on the palmar side of a bent knuckle, stretches and pales on the back
    x = c.position + oracle.normals * (0.0025 * s * oracle.palmar - 0.001 * s * oracle.dorsal)[:, None]
    crease = 1 - 0.6 * s * oracle.palmar
    pale = 0.5 * s * oracle.dorsal
    color = c.color * crease[:, None]
    color = color * (1 - pale[:, None]) + _KNUCKLE * pale[:, None]
    # the whole segment around a bent joint flushes red
    color = color * (1 - (flex * oracle.reach)[:, None] * _FLUSH)
    A = joint_skinning_matrices(model, pose)
    T = np.einsum("nk,kij->nij", c.skin_weights, A)
    means = np.einsum("nij,nj->ni", T[:, :, :3], x) + T[:, :, 3]
    cov = covariance(c.rotation, c.scale, T[:, :, :3])
    opacity = 1 / (1 + np.exp(-c.opacity))
    return means, cov, np.clip(color, 0, 1), opacity


# ---------------------------------------------------------------------------
# rig


def hand_center(model: SkeletonModel) -> np.ndarray:
    """Midpoint between the wrist and the middle fingertip."""
    J = model.canonical_joints
    return 0.5 * (J[0] + J[joint_index(2, 3)])


def camera_rig(model: SkeletonModel, cfg: DataConfig) -> list[Camera]:
    """Fibonacci-sphere cameras; training and held-out views interleave around the sphere."""
    total = cfg.train_cameras + cfg.heldout_cameras
    target = hand_center(model)
    golden = np.pi * (3 - np.sqrt(5))
    f = cfg.focal * cfg.resolution / 256
    cams = []
    for i in range(total):
        z = 1 - 2 * (i + 0.5) / total
        r = np.sqrt(1 - z * z)
        d = np.array([r * np.cos(golden * i), z, r * np.sin(golden * i)])
        eye = target + cfg.rig_radius * d
        R, t = look_at(eye, target, up=(0.0, 1.0, 0.0))
        cams.append(Camera(f, f, cfg.resolution / 2, cfg.resolution / 2, R, t,
                           cfg.resolution, cfg.resolution, f"cam{i:02d}"))
    # every third camera is held out until the requested count is reached
    order = list(range(0, total, 3)) + [i for i in range(total) if i % 3]
    held = set(order[:cfg.heldout_cameras])
    train = [c for i, c in enumerate(cams) if i not in held]
    test = [c for i, c in enumerate(cams) if i in held]
    return train + test


@dataclass
class OracleScene:
    seed: int
    config: DataConfig
    skeleton: SkeletonModel
    oracle: OracleCloud
    poses: list[Pose]
    cameras: list[Camera]
    limits: JointLimits

    @property
    def train_cameras(self) -> list[Camera]:
        return self.cameras[:self.config.train_cameras]

    def split_of(self, frame: int, cam_index: int) -> str:
        if frame >= self.config.num_frames - self.config.novel_pose_frames:
            return "novel-pose"
        if cam_index >= self.config.train_cameras:
            return "novel-view"
        return "train"

    def render(self, frame: int, cam: Camera, dtype=np.float64):
        means, cov, color, opacity = pose_oracle(self.oracle, self.skeleton, self.poses[frame], self.limits)
        return render(means, cov, color, opacity, cam, self.config.background, dtype)


def generate_scene(seed: int = 0, config: DataConfig | None = None) -> OracleScene:
    cfg = (config or DataConfig()).validate()
    rng = np.random.default_rng(seed)
    model = default_skeleton()
    oracle = build_oracle_cloud(model, cfg.num_gaussians, rng)
    poses = sample_trajectory(model, cfg, rng)
    lim = joint_limits(model)
    for i, p in enumerate(poses):
        if not lim.check(p):
            raise DataConfigError(f"pose {i} violates joint limits")
    return OracleScene(seed, cfg, model, oracle, poses, camera_rig(model, cfg), lim)


def contact_fraction(scene: OracleScene) -> float:
    return float(np.mean([palm_contact(scene.skeleton, p) for p in scene.poses]))


# ---------------------------------------------------------------------------
# dataset on disk


@dataclass
class FrameRecord:
    frame: int
    camera: str
    image: str
    mask: str
    pose: str
    split: str


@dataclass
class DatasetManifest:
    seed: int
    config: dict
    cameras: list[dict]
    camera_split: dict
    records: list[FrameRecord]
    root: Path | None = None

    def to_dict(self) -> dict:
        return {"format": "handsplat-dataset", "version": 1, "seed": self.seed, "config": self.config,
                "cameras": self.cameras, "camera_split": self.camera_split,
                "records": [asdict(r) for r in self.records]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except OSError as e:
            raise ManifestError(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: malformed JSON ({e})") from e
        for key in ("seed", "config", "cameras", "camera_split", "records"):
            if key not in d:
                raise ManifestError(f"{path}: missing field '{key}'")
        recs = []
        for i, r in enumerate(d["records"]):
            missing = [k for k in ("frame", "camera", "image", "mask", "pose", "split") if k not in r]
            if missing:
                raise ManifestError(f"{path}: record {i} missing {', '.join(missing)}")
            if r["split"] not in SPLITS:
                raise ManifestError(f"{path}: record {i} has unknown split {r['split']!r}")
            recs.append(FrameRecord(**{k: r[k] for k in ("frame", "camera", "image", "mask", "pose", "split")}))
        return cls(d["seed"], d["config"], d["cameras"], d["camera_split"], recs, path.parent)

    def camera(self, name: str) -> Camera:
        for c in self.cameras:
            if c["name"] == name:
                return Camera.from_dict(c)
        raise ManifestError(f"unknown camera {name}")

    def split(self, name: str) -> list[FrameRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}; expected one of {', '.join(SPLITS)}")
        return [r for r in self.records if r.split == name]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(arr).save(path, format="PNG", optimize=False)
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e


def render_dataset(scene: OracleScene, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for f, pose in enumerate(scene.poses):
        ppath = out / "poses" / f"{f:04d}.json"
        ppath.parent.mkdir(parents=True, exist_ok=True)
        ppath.write_text(json.dumps(pose.to_dict()) + "\n")
        means, cov, color, opacity = pose_oracle(scene.oracle, scene.skeleton, pose, scene.limits)
        for ci, cam in enumerate(scene.cameras):
            res = render(means, cov, color, opacity, cam, scene.config.background, np.float64)
            img_rel = f"images/{cam.name}/{f:04d}.png"
            mask_rel = f"masks/{cam.name}/{f:04d}.png"
            _write_png(out / img_rel, to_uint8(res.color))
            _write_png(out / mask_rel, np.where(res.alpha > 0.5, 255, 0).astype(np.uint8))
            records.append(FrameRecord(f, cam.name, img_rel, mask_rel, f"poses/{f:04d}.json",
                                       scene.split_of(f, ci)))
    cam_split = {c.name: ("train" if i < scene.config.train_cameras else "held-out")
                 for i, c in enumerate(scene.cameras)}
    manifest = DatasetManifest(scene.seed, asdict(scene.config), [c.to_dict() for c in scene.cameras],
                               cam_split, records, out)
    manifest.save(out / "manifest.json")
    return manifest


def scene_from_manifest(manifest: DatasetManifest) -> OracleScene:
    return generate_scene(manifest.seed, DataConfig.from_dict(manifest.config))


def load_pose(manifest: DatasetManifest, rec: FrameRecord) -> Pose:
    return Pose.from_dict(json.loads((manifest.root / rec.pose).read_text()))


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as e:
        raise OSError(f"failed to read {path}: {e}") from e
    return arr.astype(np.float64) / 255.0


def load_frame(manifest: DatasetManifest, rec: FrameRecord, scale: float = 1.0):
    """(image (H,W,3), mask (H,W)) in [0,1], box-downsampled when ``scale`` < 1."""
    img_path = manifest.root / rec.image
    mask_path = manifest.root / rec.mask
    if scale == 1.0:
        return load_image(img_path), load_image(mask_path)
    out = []
    for p in (img_path, mask_path):
        with Image.open(p) as im:
            w, h = im.size
            size = (int(round(w * scale)), int(round(h * scale)))
            # average in float so partially covered pixels keep fractional values
            arr = np.asarray(im, dtype=np.float32)
            if arr.ndim == 2:
                small = np.asarray(Image.fromarray(arr, mode="F").resize(size, Image.BOX))
            else:
                small = np.stack([np.asarray(Image.fromarray(arr[..., k], mode="F").resize(size, Image.BOX))
                                  for k in range(arr.shape[2])], -1)
        out.append(small.astype(np.float64) / 255.0)
    return out[0], out[1]
