"""The animatable hand avatar: skeleton-driven Gaussians with structure-aware offsets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .gaussians import (DeformationOutput, Decoders, GaussianCloud, apply_offsets, apply_offsets_backward,
                        covariance, covariance_backward, init_cloud, normalize)
from .losses import (ConsistencyMemory, LossWeights, base_losses, consistency_loss, smoothness_loss,
                     total_loss)
from .nn import MLP, GradientTape
from .renderer import Camera, RenderOutput, render, render_backward
from .scs import (DynamicBoneGenerator, static_bones, structural_coordinates,
                  structural_coordinates_backward)
from .skeleton import (NUM_ARTICULATED, Pose, SkeletonModel, axis_angle_to_matrix, build_static_topology,
                       global_transforms, joint_skinning_matrices, with_template)


@dataclass
class PoseContext:
    joints: np.ndarray        # (K, 3) posed
    root: np.ndarray          # (3, 3) global rotation
    transforms: np.ndarray    # (N, 3, 4) blended LBS per Gaussian


@dataclass
class Forward:
    ctx: PoseContext
    x_lbs: np.ndarray
    coords: np.ndarray
    basis: tuple | None
    dyn_cache: dict | None
    dyn_tape: GradientTape | None
    offsets: DeformationOutput
    bad: np.ndarray
    tapes: tuple | None
    state: object
    means: np.ndarray
    cov: np.ndarray
    opacity: np.ndarray
    out: RenderOutput


@dataclass
class StepResult:
    loss: float
    l_rgb: float
    l_mask: float
    l_ssim: float
    l_con: float
    l_smooth: float
    omega: float
    grads: dict
    bundles: np.ndarray
    positions: np.ndarray
    screen_grad: np.ndarray
    visible: np.ndarray
    image: np.ndarray


class AvatarModel:
    def __init__(self, skeleton: SkeletonModel, config: RunConfig | None = None, cloud: GaussianCloud | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config = config or RunConfig()
        rng = np.random.default_rng(config.seed) if rng is None else rng
        if skeleton.template_vertices is None:
            skeleton = with_template(skeleton, config.template_count, seed=config.seed)
        self.skeleton = skeleton
        self.topology = build_static_topology(skeleton)
        self.dtype = np.dtype(config.dtype)
        self.cloud = cloud if cloud is not None else init_cloud(
            skeleton.template_vertices, skeleton.skinning_weights, config.embed_dim, rng, self.dtype)
        if config.no_embeddings:
            self.cloud.e_g[:] = 0
            self.cloud.e_a[:] = 0
        self.use_static = not config.no_static_bones
        self.use_dynamic = not config.no_dynamic_bones and config.num_dynamic > 0
        self.coord_dim = len(self.topology) * self.use_static + config.num_dynamic * self.use_dynamic
        self.generator = None
        if self.use_dynamic:
            self.generator = DynamicBoneGenerator(
                self.topology, skeleton.canonical_joints, config.num_dynamic, config.hidden, self.dtype, rng,
                use_t=not config.no_t, use_delta=not config.no_delta)
        self.decoders = Decoders(config.embed_dim, self.coord_dim, config.hidden, self.dtype, rng)
        self.phi = MLP(3 * NUM_ARTICULATED, config.phi_out, (config.phi_hidden,), "phi", gate_init=1.0,
                       dtype=np.float64, rng=rng)
        self.weights = LossWeights(config.lambda_mask, config.lambda_ssim, config.lambda_con, config.lambda_smooth)
        self.bg = np.asarray(config.background, dtype=np.float64)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.cloud.parameters())
        out.update(self.decoders.parameters())
        if self.generator is not None:
            out.update(self.generator.net.parameters())
        out.update(self.phi.parameters())
        return out

    def learning_rates(self) -> dict[str, float]:
        c = self.config
        per_attr = {"position": c.lr_position, "rotation": c.lr_rotation, "scale": c.lr_scale,
                    "color": c.lr_color, "opacity": c.lr_opacity, "e_g": c.lr_embed, "e_a": c.lr_embed}
        lrs = {}
        for name in self.parameters():
            if name.startswith("gs."):
                lrs[name] = per_attr[name[3:]]
                if c.no_embeddings and name in ("gs.e_g", "gs.e_a"):
                    lrs[name] = 0.0
            elif name.startswith("phi."):
                lrs[name] = c.lr_net if c.train_phi else 0.0
            else:
                lrs[name] = c.lr_net
        return lrs

    @property
    def bundle_width(self) -> int:
        d = self.config.embed_dim
        return 13 + 2 * (d + self.coord_dim + 12)

    # -- forward ------------------------------------------------------------

    def pose_context(self, pose: Pose) -> PoseContext:
        _, joints = global_transforms(self.skeleton, pose)
        A = joint_skinning_matrices(self.skeleton, pose)
        T = np.einsum("nk,kij->nij", self.cloud.skin_weights.astype(np.float64), A)
        return PoseContext(joints, axis_angle_to_matrix(pose.global_rotation), T)

    def _basis(self, pose: Pose, ctx: PoseContext, tape):
        ps, qs = [], []
        cache = None
        if self.use_static:
            u, v = static_bones(ctx.joints, self.topology)
            ps.append(u)
            qs.append(v)
        if self.use_dynamic:
            p, q, _, cache = self.generator.forward(pose.theta, ctx.joints, ctx.root, tape)
            ps.append(p)
            qs.append(q)
        return np.concatenate(ps), np.concatenate(qs), cache

    def forward(self, pose: Pose, cam: Camera, record: bool = True) -> Forward:
        cfg = self.config
        cloud = self.cloud
        n = len(cloud)
        ctx = self.pose_context(pose)
        A = ctx.transforms[:, :, :3]
        t = ctx.transforms[:, :, 3]
        x0 = cloud.position.astype(np.float64)
        x_lbs = np.einsum("nij,nj->ni", A, x0) + t
        basis = dyn_cache = dyn_tape = None
        if cfg.no_intra_pose:
            coords = np.zeros((n, self.coord_dim))
        else:
            dyn_tape = GradientTape() if record and self.use_dynamic else None
            p, q, dyn_cache = self._basis(pose, ctx, dyn_tape)
            basis = (p, q)
            coords = structural_coordinates(x_lbs, basis, cfg.tau)
        motion = ctx.transforms.reshape(n, 12)
        tapes = (GradientTape(), GradientTape(), GradientTape()) if record else None
        off, bad = self.decoders.forward(cloud.e_g, cloud.e_a, coords.astype(self.dtype),
                                         motion.astype(self.dtype), tapes)
        st = apply_offsets(cloud, off)
        if cfg.offset_space == "canonical":
            means = np.einsum("nij,nj->ni", A, st.x) + t
        else:
            means = x_lbs + off.dx + off.dx_f
        cov = covariance(st.rot, st.scale, A)
        opacity = 1.0 / (1.0 + np.exp(-cloud.opacity.astype(np.float64)))
        out = render(means, cov, st.color, opacity, cam, self.bg, self.dtype)
        return Forward(ctx, x_lbs, coords, basis, dyn_cache, dyn_tape, off, bad, tapes, st, means, cov,
                       opacity, out)

    def render(self, pose: Pose, cam: Camera) -> RenderOutput:
        return self.forward(pose, cam, record=False).out

    def render_lbs(self, pose: Pose, cam: Camera) -> RenderOutput:
        """Skinning-only render of the canonical cloud, no learned offsets."""
        ctx = self.pose_context(pose)
        A = ctx.transforms[:, :, :3]
        means = np.einsum("nij,nj->ni", A, self.cloud.position.astype(np.float64)) + ctx.transforms[:, :, 3]
        cov = covariance(normalize(self.cloud.rotation.astype(np.float64)), self.cloud.scale.astype(np.float64), A)
        color = np.clip(self.cloud.color.astype(np.float64), 0.0, 1.0)
        opacity = 1.0 / (1.0 + np.exp(-self.cloud.opacity.astype(np.float64)))
        return render(means, cov, color, opacity, cam, self.bg, self.dtype)

    def bundles(self, fw: Forward) -> np.ndarray:
        cloud = self.cloud
        motion = fw.ctx.transforms.reshape(len(cloud), 12)
        return np.concatenate([fw.state.x, fw.state.rot, fw.state.scale, fw.state.color,
                               cloud.e_g.astype(np.float64), fw.coords, motion,
                               cloud.e_a.astype(np.float64), fw.coords, motion], 1)

    # -- one optimisation step (loss and gradients) -------------------------

    def step(self, pose: Pose, cam: Camera, gt: np.ndarray, mask: np.ndarray,
             memory: ConsistencyMemory | None = None, neighbors: np.ndarray | None = None) -> StepResult:
        cfg = self.config
        w = self.weights
        cloud = self.cloud
        n = len(cloud)
        d = cfg.embed_dim
        M = self.coord_dim
        fw = self.forward(pose, cam)
        out = fw.out
        base = base_losses(out.color, out.alpha, gt, mask, w.mask, w.ssim)
        bundles = self.bundles(fw)
        positions = fw.state.x

        g_bundle = np.zeros_like(bundles)
        l_con, omega, g_phi = 0.0, 0.0, None
        if memory is not None and not cfg.no_inter_pose:
            res = consistency_loss(bundles, positions, pose.theta, memory, cfg.train_phi)
            if res is not None:
                l_con, omega, g_phi = res.loss, res.omega, res.g_phi
                g_bundle = w.con * res.g_bundles

        if cfg.no_embeddings or w.smooth == 0:
            l_smooth, g_smooth = 0.0, np.zeros((n, d))
        else:
            l_smooth, g_smooth = smoothness_loss(cloud.e_g, positions, cfg.smooth_k, neighbors)
        loss = total_loss(base.rgb, base.mask, base.ssim, l_con, l_smooth, w)

        # image -> posed Gaussians
        g_means, g_cov, g_color, g_opac, screen = render_backward(out, base.g_color, base.g_alpha)
        A = fw.ctx.transforms[:, :, :3]
        st = fw.state
        g_rot, g_s = covariance_backward(st.rot, st.scale, g_cov, A)
        g_rot = g_rot + g_bundle[:, 3:7]
        g_s = g_s + g_bundle[:, 7:10]
        g_c = g_color + g_bundle[:, 10:13]
        o = 13
        g_eg_direct = g_bundle[:, o:o + d]
        g_P = g_bundle[:, o + d:o + d + M] + g_bundle[:, o + 2 * d + M + 12:o + 2 * d + 2 * M + 12]
        g_ea_direct = g_bundle[:, o + d + M + 12:o + 2 * d + M + 12]

        g_canon = np.einsum("nji,nj->ni", A, g_means)
        if cfg.offset_space == "canonical":
            g_x0 = g_canon + g_bundle[:, 0:3]
            g_dx = g_x0
        else:
            g_x0 = g_canon + g_bundle[:, 0:3]
            g_dx = g_means + g_bundle[:, 0:3]
        g_cloud, g_off = apply_offsets_backward(cloud, fw.offsets, st, g_dx, g_rot, g_s, g_c)

        g_eg, g_ea, g_coords, grads = self.decoders.backward(fw.tapes, g_off, fw.bad)
        g_P = g_P + g_coords
        if fw.basis is not None:
            gx_lbs, gp, gq = structural_coordinates_backward(fw.x_lbs, fw.basis[0], fw.basis[1], g_P, cfg.tau)
            g_x0 = g_x0 + np.einsum("nji,nj->ni", A, gx_lbs)
            if self.use_dynamic:
                s0 = len(self.topology) if self.use_static else 0
                grads.update(self.generator.backward(fw.dyn_cache, gp[s0:], gq[s0:], fw.dyn_tape))

        sig = fw.opacity
        grads.update({
            "gs.position": g_x0,
            "gs.rotation": g_cloud["rotation"],
            "gs.scale": g_cloud["scale"],
            "gs.color": g_cloud["color"],
            "gs.opacity": g_opac * sig * (1 - sig),
            "gs.e_g": g_eg + g_eg_direct + w.smooth * g_smooth,
            "gs.e_a": g_ea + g_ea_direct,
        })
        if g_phi is not None:
            grads.update({k: w.con * v for k, v in g_phi.items()})
        grads = {k: np.asarray(v) for k, v in grads.items()}
        return StepResult(float(loss), base.rgb, base.mask, base.ssim, l_con, l_smooth, omega, grads,
                          bundles, positions, screen, fw.out.cache["proj"].valid, out.color)
