import numpy as np
import pytest

from conftest import tiny_config
from handsplat import data
from handsplat.config import RunConfig, preset
from handsplat.model import AvatarModel
from handsplat.nn import load_tensors
from handsplat.skeleton import Pose, default_skeleton
from handsplat.train import CHECKPOINT, Trainer, evaluate, load_model, model_renderer


def checkpoint_tensors(run_dir):
    return load_tensors(run_dir / CHECKPOINT)[0]


def first_train(manifest):
    rec = manifest.split("train")[0]
    return data.load_pose(manifest, rec), manifest.camera(rec.camera)


def test_zero_iterations_checkpoint_equals_init(tiny_dataset, tmp_path):
    cfg = tiny_config(iterations=0, dtype="float64")
    Trainer(cfg, tiny_dataset, tmp_path).run()
    model, _, meta = load_model(tmp_path)
    fresh = AvatarModel(default_skeleton(), cfg, rng=np.random.default_rng(cfg.seed))
    assert meta["iteration"] == 0
    p, q = model.parameters(), fresh.parameters()
    assert p.keys() == q.keys()
    for k in p:
        assert np.array_equal(p[k], q[k]), k


def test_init_render_is_pure_skinning(tiny_dataset):
    model = AvatarModel(default_skeleton(), tiny_config(dtype="float64"))
    rng = np.random.default_rng(1)
    cam = tiny_dataset.camera(tiny_dataset.records[0].camera)
    for _ in range(3):
        pose = Pose(rng.normal(size=(15, 3)) * 0.3, rng.normal(size=3) * 0.3)
        a, b = model.render(pose, cam), model.render_lbs(pose, cam)
        assert np.array_equal(a.color, b.color) and np.array_equal(a.alpha, b.alpha)


def test_resume_is_bit_identical(tiny_dataset, tmp_path):
    cfg = tiny_config(iterations=8, deterministic=True)
    Trainer(cfg, tiny_dataset, tmp_path / "straight").run()
    t = Trainer(cfg, tiny_dataset, tmp_path / "split")
    t.run(4)
    Trainer(cfg, tiny_dataset, tmp_path / "split", resume=True).run()
    a, b = checkpoint_tensors(tmp_path / "straight"), checkpoint_tensors(tmp_path / "split")
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    rows_a = (tmp_path / "straight" / "metrics.csv").read_text()
    rows_b = (tmp_path / "split" / "metrics.csv").read_text()
    assert rows_a == rows_b


def test_emitted_config_reproduces_run(tiny_dataset, tmp_path):
    cfg = tiny_config(iterations=5, deterministic=True, seed=3)
    Trainer(cfg, tiny_dataset, tmp_path / "a").run()
    again = RunConfig.load(tmp_path / "a" / "config.json")
    assert again == cfg
    Trainer(again, tiny_dataset, tmp_path / "b").run()
    a, b = checkpoint_tensors(tmp_path / "a"), checkpoint_tensors(tmp_path / "b")
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_resume_rejects_changed_config(tiny_dataset, tmp_path):
    Trainer(tiny_config(iterations=2), tiny_dataset, tmp_path).run()
    with pytest.raises(ValueError, match="tau"):
        Trainer(tiny_config(iterations=4, tau=0.05), tiny_dataset, tmp_path, resume=True)


def test_no_intra_pose_zeroes_descriptors(tiny_dataset):
    pose, cam = first_train(tiny_dataset)
    full = AvatarModel(default_skeleton(), tiny_config())
    abl = AvatarModel(default_skeleton(), preset("no_intra_pose", tiny_config()))
    fa, fb = full.forward(pose, cam), abl.forward(pose, cam)
    assert fb.coords.shape == fa.coords.shape
    assert np.all(fb.coords == 0) and np.abs(fa.coords).max() > 0
    assert abl.bundle_width == full.bundle_width
    # every other input is unchanged
    assert np.array_equal(fa.x_lbs, fb.x_lbs)
    assert np.array_equal(fa.ctx.transforms, fb.ctx.transforms)


def test_bone_ablations_shrink_basis():
    full = AvatarModel(default_skeleton(), tiny_config())
    assert full.coord_dim == 20 + 4
    assert AvatarModel(default_skeleton(), preset("no_static_bones", tiny_config())).coord_dim == 4
    no_dyn = AvatarModel(default_skeleton(), preset("no_dynamic_bones", tiny_config()))
    assert no_dyn.coord_dim == 20 and no_dyn.generator is None
    assert full.bundle_width == 13 + 2 * (16 + 24 + 12)


def test_flag_pathways_one_step(tiny_dataset):
    pose, cam = first_train(tiny_dataset)
    img, mask = data.load_frame(tiny_dataset, tiny_dataset.split("train")[0])

    def step(cfg):
        m = AvatarModel(default_skeleton(), cfg)
        from handsplat.losses import ConsistencyMemory

        mem = ConsistencyMemory(m.phi, cfg.ema_decay, cfg.delta)
        first = m.step(pose, cam, img, mask, mem)
        mem.update(first.bundles, first.positions, pose.theta)
        return m, m.step(pose, cam, img, mask, mem)

    _, full = step(tiny_config())
    assert full.omega == 1.0
    _, no_inter = step(preset("no_t", tiny_config(no_inter_pose=True)))
    assert no_inter.l_con == 0.0 and "phi.w0" not in no_inter.grads
    m, no_emb = step(tiny_config(no_embeddings=True))
    assert np.all(m.cloud.e_g == 0) and no_emb.l_smooth == 0.0
    assert m.learning_rates()["gs.e_g"] == 0.0
    frozen = tiny_config(train_phi=False)
    assert AvatarModel(default_skeleton(), frozen).learning_rates()["phi.w0"] == 0.0


def test_no_t_and_no_delta_generator_behaviour(tiny_dataset):
    pose, cam = first_train(tiny_dataset)
    for flag in ("no_t", "no_delta"):
        m = AvatarModel(default_skeleton(), preset(flag, tiny_config()))
        ctx = m.pose_context(pose)
        p, q, prm, _ = m.generator.forward(pose.theta, ctx.joints, ctx.root, None)
        if flag == "no_t":
            assert np.all(prm.t_s == 0.5) and np.all(prm.t_e == 0.5)
        else:
            assert np.all(prm.delta_p == 0) and np.all(prm.delta_q == 0)


@pytest.mark.slow
def test_training_improves_and_beats_init(default_dataset, tmp_path):
    cfg = RunConfig(iterations=500)
    t = Trainer(cfg, default_dataset, tmp_path)
    init_rep = evaluate(model_renderer(t.model), default_dataset, "novel-pose", limit=24)
    t.run()
    psnr = np.array([float(r["psnr"]) for r in t.metrics.read()])
    window = 5
    avg = np.convolve(psnr, np.ones(window) / window, mode="valid")
    assert avg[-1] > avg[0]
    trained_rep = evaluate(model_renderer(t.model), default_dataset, "novel-pose", limit=24)
    assert trained_rep.psnr > init_rep.psnr
