"""Acceptance suite. Each test is one numbered criterion; a PASS/FAIL summary line per
criterion is printed at the end of the session (see conftest.py)."""
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import TINY_GEN
from handsplat import data
from handsplat.config import RunConfig, preset
from handsplat.gaussians import DeformationOutput, GaussianCloud, apply_offsets, covariance, normalize
from handsplat.losses import (ConsistencyMemory, LossWeights, consistency_loss, correspondence,
                              correspondence_bruteforce, pose_similarity, total_loss)
from handsplat.model import AvatarModel
from handsplat.nn import MLP, load_tensors
from handsplat.renderer import Camera, look_at, project, rasterize, rasterize_bruteforce, render, render_backward
from handsplat.scs import chain_kernel, interpolate_endpoints, smooth_attention, smoothing_kernel, static_bones, \
    structural_coordinates
from handsplat.skeleton import (Pose, axis_angle_to_matrix, build_static_topology, default_skeleton,
                                forward_kinematics, matrix_to_axis_angle)
from handsplat.train import CHECKPOINT, Trainer, evaluate, model_renderer


def rigid(rng):
    return Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3) * 0.2


def random_pose(rng, spread=0.3):
    return Pose(rng.normal(size=(15, 3)) * spread, rng.normal(size=3) * spread, rng.normal(size=3) * 0.05)


# 1 ---------------------------------------------------------------------------------


def test_criterion_01_full_pipeline_gradients():
    start = time.time()
    rng = np.random.default_rng(0)
    cfg = RunConfig(dtype="float64", num_dynamic=4, hidden_width=16, template_count=16)
    m = AvatarModel(default_skeleton(), cfg)
    assert len(m.cloud) == 16
    # open the gates and spread the embeddings so every pathway carries gradient
    for net in m.decoders.nets():
        net.parameters()[net.name + ".gate"][...] = 0.7
    m.cloud.e_g[:] = rng.normal(size=m.cloud.e_g.shape) * 0.3
    m.cloud.e_a[:] = rng.normal(size=m.cloud.e_a.shape) * 0.3
    m.cloud.scale[:] += 1.0
    R, t = look_at([0.05, 0.07, -0.4], [0, 0.07, 0], up=[0, -1, 0])
    cam = Camera(22, 22, 4, 4, R, t, 8, 8)
    pose = random_pose(rng)
    gt = rng.random((8, 8, 3))
    mask = (rng.random((8, 8)) > 0.5).astype(float)
    mem = ConsistencyMemory(m.phi)
    r0 = m.step(random_pose(rng), cam, gt, mask, mem)
    mem.update(r0.bundles + rng.normal(size=r0.bundles.shape) * 0.05, r0.positions, random_pose(rng).theta)
    res = m.step(pose, cam, gt, mask, mem)
    assert res.l_con > 0 and res.l_smooth > 0 and 0 < res.omega < 1
    assert 0 < res.image.min() and res.image.max() < 1

    def loss():
        return m.step(pose, cam, gt, mask, mem).loss

    params = m.parameters()
    h = 1e-6
    worst, checked = 0.0, 0
    for name, w in params.items():
        g = res.grads[name]
        mag = np.abs(g).ravel()
        live = np.flatnonzero(mag >= 1e-3 * mag.max())
        picks = {int(np.argmax(mag))} | set(rng.choice(live, min(2, len(live)), replace=False).tolist())
        for flat in picks:
            idx = np.unravel_index(flat, g.shape)
            old = w[idx]
            w[idx] = old + h
            a = loss()
            w[idx] = old - h
            b = loss()
            w[idx] = old
            num = (a - b) / (2 * h)
            worst = max(worst, abs(g[idx] - num) / max(abs(num), 1e-6))
            checked += 1
    elapsed = time.time() - start
    print(f"criterion 1: {checked} entries over {len(params)} tensors, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-3
    assert elapsed < 120


# 2 ---------------------------------------------------------------------------------


def test_criterion_02_descriptor_rigid_invariance():
    rng = np.random.default_rng(2)
    m = AvatarModel(default_skeleton(), RunConfig(dtype="float64", template_count=300))
    worst = 0.0

    def coords(pose):
        ctx = m.pose_context(pose)
        x = np.einsum("nij,nj->ni", ctx.transforms[:, :, :3], m.cloud.position) + ctx.transforms[:, :, 3]
        p, q, _ = m._basis(pose, ctx, None)
        return structural_coordinates(x, (p, q), m.config.tau), x, p, q

    for _ in range(100):
        pose = random_pose(rng)
        P, x, p, q = coords(pose)
        R, t = rigid(rng)
        # the same rigid motion applied directly to Gaussians and basis
        P_direct = structural_coordinates(x @ R.T + t, (p @ R.T + t, q @ R.T + t), m.config.tau)
        # and carried through the pose's global frame, so joints and dynamic bones move with it
        moved = Pose(pose.axis_angle, matrix_to_axis_angle(R @ axis_angle_to_matrix(pose.global_rotation)),
                     R @ pose.global_translation + t)
        P_pose, x2, p2, q2 = coords(moved)
        assert np.abs(x2 - (x @ R.T + t)).max() <= 1e-9
        assert np.abs(p2 - (p @ R.T + t)).max() <= 1e-9
        worst = max(worst, np.abs(P_direct - P).max(), np.abs(P_pose - P).max())
    print(f"criterion 2: max descriptor change {worst:.2e}")
    assert worst <= 1e-9


# 3 ---------------------------------------------------------------------------------


def test_criterion_03_smoothing_kernel_contract():
    K = smoothing_kernel(build_static_topology(default_skeleton()))
    assert K.shape == (20, 20)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        logits = rng.normal(size=20) * rng.uniform(0.1, 20)
        w = smooth_attention(logits, K)
        assert np.all(w >= 0)
        worst = max(worst, abs(w.sum() - 1))
    chain = smooth_attention(np.zeros(3), chain_kernel(3))
    err = np.abs(chain - [0.3, 0.4, 0.3]).max()
    print(f"criterion 3: max |sum - 1| {worst:.1e}, chain error {err:.1e}")
    assert worst <= 1e-6
    assert err <= 1e-12


# 4 ---------------------------------------------------------------------------------


def test_criterion_04_endpoint_cases():
    skel = default_skeleton()
    topo = build_static_topology(skel)
    E = topo.as_array()
    B = len(topo)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        J = forward_kinematics(skel, random_pose(rng, 0.5))
        u, v = static_bones(J, topo)
        for b in range(B):
            W = np.zeros((1, B))
            W[0, b] = 1.0
            for t, joint in ((0.0, E[b, 0]), (1.0, E[b, 1])):
                p = interpolate_endpoints(W, np.full((1, B), t), u, v, np.zeros((1, 3)))
                worst = max(worst, np.abs(p[0] - J[joint]).max())
    print(f"criterion 4: max endpoint error {worst:.1e}")
    assert worst <= 1e-12


# 5 ---------------------------------------------------------------------------------


def test_criterion_05_psd_preservation():
    rng = np.random.default_rng(5)
    n = 10_000
    cloud = GaussianCloud(
        position=rng.normal(size=(n, 3)) * 0.05, rotation=normalize(rng.normal(size=(n, 4))),
        scale=rng.normal(-5, 0.5, size=(n, 3)), color=rng.uniform(size=(n, 3)), opacity=rng.normal(size=n),
        e_g=np.zeros((n, 4)), e_a=np.zeros((n, 4)), skin_weights=rng.dirichlet(np.ones(21), size=n))

    def quat():
        return np.array([1.0, 0, 0, 0]) + rng.normal(size=(n, 4)) * rng.uniform(0, 3)

    off = DeformationOutput(dx=rng.normal(size=(n, 3)) * 0.01, dq=quat(), ds=rng.normal(size=(n, 3)),
                            dc=rng.normal(size=(n, 3)), dx_f=rng.normal(size=(n, 3)) * 0.01, dq_f=quat(),
                            ds_f=rng.normal(size=(n, 3)), dc_f=rng.normal(size=(n, 3)))
    st = apply_offsets(cloud, off)
    # blended skinning matrices from two random rotations
    a = rng.uniform(size=(n, 1, 1))
    A = a * Rotation.random(n, random_state=1).as_matrix() + (1 - a) * Rotation.random(n, random_state=2).as_matrix()
    low = min(np.linalg.eigvalsh(covariance(st.rot, st.scale)).min(),
              np.linalg.eigvalsh(covariance(st.rot, st.scale, A)).min())
    print(f"criterion 5: minimum eigenvalue {low:.2e}")
    assert low >= -1e-10


# 6 ---------------------------------------------------------------------------------


def test_criterion_06_identity_at_init():
    rng = np.random.default_rng(6)
    for dtype in ("float32", "float64"):
        m = AvatarModel(default_skeleton(), RunConfig(dtype=dtype, template_count=400))
        for i in range(3):
            R, t = look_at(rng.normal(size=3) * 0.1 + [0, 0.07, -0.45], [0, 0.07, 0], up=[0, -1, 0])
            cam = Camera(120, 120, 32, 32, R, t, 64, 64)
            pose = random_pose(rng)
            a, b = m.render(pose, cam), m.render_lbs(pose, cam)
            assert np.array_equal(a.color, b.color) and np.array_equal(a.alpha, b.alpha)
            assert b.alpha.max() > 0.5
    print("criterion 6: initial render bit-identical to skinning-only render")


# 7 ---------------------------------------------------------------------------------


def renderer_scene(n, seed, spread=0.05):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n, 3)) * spread
    rot = Rotation.random(n, random_state=seed).as_matrix()
    s = np.exp(rng.uniform(np.log(0.002), np.log(0.02), (n, 3)))
    cov = rot @ (s[:, :, None] ** 2 * np.eye(3)) @ np.swapaxes(rot, 1, 2)
    return means, cov, rng.uniform(size=(n, 3)), rng.uniform(0.05, 0.95, n)


def test_criterion_07_rasterizer_oracle():
    rng = np.random.default_rng(7)
    cam = Camera(100, 100, 24, 20, np.eye(3), [0, 0, 0.5], 48, 40)
    worst = 0.0
    for seed in range(50):
        means, cov, colors, opac = renderer_scene(int(rng.integers(1, 1001)), seed)
        bg = rng.uniform(size=3)
        proj = project(means, cov, cam)
        out = rasterize(proj, colors, opac, cam, bg)
        img, alpha = rasterize_bruteforce(proj, colors, opac, cam, bg)
        worst = max(worst, np.abs(out.color - img).max(), np.abs(out.alpha - alpha).max())
    assert worst <= 1e-5

    # backward against central differences on a small scene
    means, cov, colors, opac = renderer_scene(16, 11, spread=0.006)
    small = Camera(100, 100, 4, 4, np.eye(3), [0, 0, 0.5], 8, 8)
    G, Ga = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8))

    def f():
        o = render(means, cov, colors, opac, small, (0.2, 0.1, 0.0))
        return float((o.color * G).sum() + (o.alpha * Ga).sum())

    gm, gcov, gcol, gop, _ = render_backward(render(means, cov, colors, opac, small, (0.2, 0.1, 0.0)), G, Ga)
    gcov = 0.5 * (gcov + np.swapaxes(gcov, 1, 2))
    fd_worst = 0.0
    for arr, ana, h, floor in ((means, gm, 1e-7, 1e-2), (colors, gcol, 1e-6, 1e-2), (opac, gop, 1e-6, 1e-2)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            a = f()
            arr[idx] = old - h
            b = f()
            arr[idx] = old
            num = (a - b) / (2 * h)
            fd_worst = max(fd_worst, abs(ana[idx] - num) / max(abs(num), floor))
    for i in range(16):
        for r, c in ((0, 0), (0, 1), (1, 2), (2, 2)):
            E = np.zeros((3, 3))
            E[r, c] = E[c, r] = 1.0
            h = 1e-9
            cov[i] += h * E
            a = f()
            cov[i] -= 2 * h * E
            b = f()
            cov[i] += h * E
            num = (a - b) / (2 * h)
            fd_worst = max(fd_worst, abs((gcov[i] * E).sum() - num) / max(abs(num), 1e2))
    print(f"criterion 7: tiled vs brute force {worst:.1e}, backward rel err {fd_worst:.1e}")
    assert fd_worst <= 1e-3


# 8 ---------------------------------------------------------------------------------


def test_criterion_08_consistency_contracts():
    rng = np.random.default_rng(8)
    phi = MLP(45, 32, (64,), name="phi", gate_init=1.0, dtype=np.float64, rng=rng)
    for _ in range(20):
        theta = rng.normal(size=45)
        assert pose_similarity(theta, theta, phi) == 1.0

    B, X = rng.normal(size=(200, 9)), rng.normal(size=(200, 3)) * 0.05
    mem = ConsistencyMemory(phi)
    mem.seed(B, X, rng.normal(size=45))
    res = consistency_loss(B, X, rng.normal(size=45), mem)
    assert res.loss == 0.0 and np.all(res.g_bundles == 0)

    prev = rng.normal(size=(1000, 3)) * [0.05, 0.08, 0.02]
    cur = prev + rng.normal(size=prev.shape) * 0.004
    assert np.array_equal(correspondence(cur, prev), correspondence_bruteforce(cur, prev))
    fresh = rng.normal(size=(1000, 3)) * 0.06
    assert np.array_equal(correspondence(fresh, prev), correspondence_bruteforce(fresh, prev))

    M0, M = rng.normal(size=(30, 6)), rng.normal(size=(30, 6))
    X = rng.normal(size=(30, 3))
    mem = ConsistencyMemory(phi, decay=0.9)
    mem.seed(M0, X, np.zeros(45))
    start = np.linalg.norm(M0 - M)
    for n in range(1, 51):
        mem.update(M, X, np.zeros(45))
        assert np.linalg.norm(mem.bundles - M) <= 0.9 ** n * start * (1 + 1e-12)
    print("criterion 8: same-pose similarity, zero loss, grid kNN and EMA bound hold")


# 9 ---------------------------------------------------------------------------------

ABLATIONS = ("full", "no_scs", "no_static_bones", "no_dynamic_bones")


@pytest.mark.slow
def test_criterion_09_desk_scale_ablation(default_dataset, tmp_path):
    start = time.time()
    scores = {}
    for name in ABLATIONS:
        cfg = preset(name, RunConfig(seed=0))
        trainer = Trainer(cfg, default_dataset, tmp_path / name)
        trainer.run()
        scores[name] = evaluate(model_renderer(trainer.model), default_dataset, "novel-pose").psnr
        print(f"criterion 9: {name:<17} novel-pose PSNR {scores[name]:.2f} dB")
    elapsed = time.time() - start
    print(f"criterion 9: {elapsed / 60:.1f} min")
    gain = scores["full"] - scores["no_scs"]
    assert gain >= 0.5, f"full beats no_scs by {gain:.2f} dB"
    assert scores["no_static_bones"] < scores["full"]
    assert scores["no_dynamic_bones"] < scores["full"]
    assert elapsed <= 30 * 60


# 10 --------------------------------------------------------------------------------


def test_criterion_10_loss_weight_wiring():
    w = LossWeights(Fraction(1, 10), Fraction(1, 100), Fraction(1, 100), Fraction(1))
    one = Fraction(1)
    assert total_loss(one, one, one, one, one, w) == Fraction(212, 100)
    defaults = RunConfig()
    assert (defaults.lambda_mask, defaults.lambda_ssim, defaults.lambda_con, defaults.lambda_smooth) == \
        (0.1, 0.01, 0.01, 1.0)
    print("criterion 10: unit components total exactly 2.12")


# 11 --------------------------------------------------------------------------------


def cli(*args, env):
    return subprocess.run([sys.executable, "-m", "handsplat", "-q", *args], env=env, capture_output=True,
                          text=True, timeout=900)


def test_criterion_11_determinism(tmp_path):
    env = dict(os.environ, NUMBA_NUM_THREADS="4")
    done = cli("gen-data", "--out", str(tmp_path / "data"), "--seed", "1", *TINY_GEN, env=env)
    assert done.returncode == 0, done.stderr
    runs = {}
    for tag, threads in (("a1", 1), ("a4", 4), ("b4", 4)):
        done = cli("train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / tag), "--iterations", "100",
                   "--deterministic", "--threads", str(threads), "--set", "template_count=200",
                   "--set", "num_dynamic=4", "--set", "hidden_width=16", "--set", "train_scale=1.0",
                   "--set", "densify_from=20", "--set", "densify_every=20", "--set", "densify_until=80", env=env)
        assert done.returncode == 0, done.stderr
        runs[tag] = load_tensors(tmp_path / tag / CHECKPOINT)[0]
    ref = runs["a1"]
    for tag in ("a4", "b4"):
        assert runs[tag].keys() == ref.keys()
        for k in ref:
            assert np.array_equal(runs[tag][k], ref[k]), (tag, k)
        metrics = (tmp_path / tag / "metrics.csv").read_bytes()
        assert metrics == (tmp_path / "a1" / "metrics.csv").read_bytes()
    print(f"criterion 11: 3 runs of 100 iterations, {len(ref)} tensors bit-identical")
