"""Training loop, checkpoints, evaluation and benchmarking."""
from __future__ import annotations

import csv
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import DatasetManifest, FrameRecord, load_frame, load_image, load_pose, scene_from_manifest
from .gaussians import DensifyConfig, GaussianCloud, densify_and_prune
from .losses import ConsistencyMemory, MetricsLog, MetricsRow, NumericError, knn_indices, psnr, ssim
from .model import AvatarModel
from .nn import Adam, load_tensors, save_tensors
from .renderer import Camera, render, set_threads
from .skeleton import SkeletonModel, default_skeleton

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.hspk"
FORMAT_VERSION = 1
# keys that may change between a run and its resumption
RUN_CONTROL = ("iterations", "threads", "log_every", "checkpoint_every")


def runtime_limits(config: RunConfig):
    """Thread pinning for the run; BLAS goes single-threaded in deterministic mode."""
    set_threads(config.threads or None)
    if config.deterministic:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    return nullcontext()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AvatarModel, iteration: int, optimizer: Adam | None = None,
                    memory: ConsistencyMemory | None = None, extra_tensors: dict | None = None,
                    extra_meta: dict | None = None):
    tensors = dict(model.cloud.to_tensors())
    for k, v in model.parameters().items():
        if not k.startswith("gs."):
            tensors[f"param.{k}"] = v
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    if memory is not None:
        tensors.update(memory.to_tensors())
    tensors.update(extra_tensors or {})
    meta = {"kind": "checkpoint", "format_version": FORMAT_VERSION, "iteration": int(iteration),
            "config": model.config.to_dict(), "skeleton": model.skeleton.to_dict()}
    meta.update(extra_meta or {})
    save_tensors(path, tensors, meta)


def load_model(path) -> tuple[AvatarModel, dict, dict]:
    """(model, tensors, meta) from a checkpoint file or a run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a training checkpoint")
    config = RunConfig.from_dict(meta["config"])
    skeleton = SkeletonModel.from_dict(meta["skeleton"])
    cloud = GaussianCloud.from_tensors(tensors)
    model = AvatarModel(skeleton, config, cloud=cloud)
    params = model.parameters()
    for k, arr in params.items():
        if k.startswith("gs."):
            continue
        saved = tensors.get(f"param.{k}")
        if saved is None or saved.shape != arr.shape:
            raise ValueError(f"{path}: parameter {k} missing or mis-shaped")
        arr[...] = saved
    return model, tensors, meta


# ---------------------------------------------------------------------------
# training


class FrameCache:
    def __init__(self, manifest: DatasetManifest, scale: float, dtype):
        self.manifest = manifest
        self.scale = scale
        self.dtype = dtype
        self.items: dict[tuple[int, str], tuple] = {}
        self.cams: dict[str, Camera] = {}

    def get(self, rec: FrameRecord):
        key = (rec.frame, rec.camera)
        if key not in self.items:
            img, mask = load_frame(self.manifest, rec, self.scale)
            pose = load_pose(self.manifest, rec)
            self.items[key] = (pose, img.astype(self.dtype), mask.astype(self.dtype))
        if rec.camera not in self.cams:
            cam = self.manifest.camera(rec.camera)
            self.cams[rec.camera] = cam.scaled(self.scale) if self.scale != 1.0 else cam
        pose, img, mask = self.items[key]
        return pose, self.cams[rec.camera], img, mask


@dataclass
class TrainResult:
    iterations: int
    final_psnr: float
    num_gaussians: int
    seconds: float
    skipped_steps: int


class Trainer:
    def __init__(self, config: RunConfig, manifest: DatasetManifest, out_dir, resume: bool = False,
                 skeleton: SkeletonModel | None = None):
        self.config = config
        self.manifest = manifest
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.records = manifest.split("train")
        if not self.records:
            raise ValueError("manifest has no training records")
        self.by_frame: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            self.by_frame.setdefault(r.frame, []).append(i)
        self.frames = FrameCache(manifest, config.train_scale, np.float64)
        self.metrics = MetricsLog(self.out / "metrics.csv")
        ckpt = self.out / CHECKPOINT
        if resume and ckpt.exists():
            self._resume(ckpt)
        else:
            self.rng = np.random.default_rng(config.seed)
            self.model = AvatarModel(skeleton or default_skeleton(), config, rng=np.random.default_rng(config.seed))
            self.optimizer = Adam(self.model.parameters(), self.model.learning_rates())
            self.memory = ConsistencyMemory(self.model.phi, config.ema_decay, config.delta)
            self.iteration = 0
            self.prev_index = -1
            self.grad_accum = np.zeros(len(self.model.cloud))
            self.grad_count = np.zeros(len(self.model.cloud))
            self.metrics.reset()
            self.neighbors = None
        config.save(self.out / "config.json")

    def _resume(self, ckpt: Path):
        model, tensors, meta = load_model(ckpt)
        saved, wanted = model.config.to_dict(), self.config.to_dict()
        differ = sorted(k for k in wanted if k not in RUN_CONTROL and saved.get(k) != wanted[k])
        if differ:
            raise ValueError(f"{ckpt}: checkpoint config differs from the requested config in {', '.join(differ)}")
        model.config = self.config
        self.model = model
        self.optimizer = Adam(model.parameters(), model.learning_rates())
        self.optimizer.load_state_tensors(tensors)
        self.optimizer.skipped = int(meta.get("skipped", 0))
        self.memory = ConsistencyMemory(model.phi, self.config.ema_decay, self.config.delta)
        self.memory.load_tensors(tensors)
        self.iteration = int(meta["iteration"])
        self.prev_index = int(meta.get("prev_index", -1))
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng_state"]
        self.grad_accum = tensors["densify.accum"].copy()
        self.grad_count = tensors["densify.count"].copy()
        self.metrics.truncate(self.iteration)
        self.neighbors = tensors.get("train.neighbors")
        log.info("resumed from %s at iteration %d", ckpt, self.iteration)

    def checkpoint(self, path=None):
        save_checkpoint(path or self.out / CHECKPOINT, self.model, self.iteration, self.optimizer, self.memory,
                        {"densify.accum": self.grad_accum, "densify.count": self.grad_count,
                         **({} if self.neighbors is None else {"train.neighbors": self.neighbors})},
                        {"rng_state": self.rng.bit_generator.state, "prev_index": self.prev_index,
                         "skipped": self.optimizer.skipped})

    def sample(self) -> int:
        cfg = self.config
        if self.prev_index >= 0 and self.rng.random() < cfg.same_pose_prob:
            same = [i for i in self.by_frame[self.records[self.prev_index].frame] if i != self.prev_index]
            if same:
                return same[int(self.rng.integers(len(same)))]
        return int(self.rng.integers(len(self.records)))

    def densify(self):
        cfg = self.config
        dc = DensifyConfig(cfg.densify_grad_threshold, cfg.split_scale, 1.6, cfg.min_opacity, cfg.max_gaussians)
        new, src, rep = densify_and_prune(self.model.cloud, self.grad_accum, self.grad_count, dc, self.rng)
        self.model.cloud = new
        for name, arr in new.parameters().items():
            self.optimizer.rebind(name, arr, src)
        self.grad_accum = np.zeros(len(new))
        self.grad_count = np.zeros(len(new))
        self.neighbors = None
        log.info("densify @%d: +%d clone, +%d split, -%d pruned -> %d", self.iteration, rep.cloned, rep.split,
                 rep.pruned, len(new))

    def train_step(self):
        cfg = self.config
        idx = self.sample()
        pose, cam, gt, mask = self.frames.get(self.records[idx])
        if self.neighbors is None or self.iteration % 100 == 0:
            self.neighbors = knn_indices(self.model.cloud.position.astype(np.float64), cfg.smooth_k)
        res = self.model.step(pose, cam, gt, mask, self.memory, self.neighbors)
        if not np.isfinite(res.loss):
            raise NumericError("non-finite total loss")
        self.optimizer.step(res.grads)
        self.model.cloud.renormalize()
        if not cfg.no_inter_pose:
            self.memory.update(res.bundles, res.positions, pose.theta)
        seen = res.screen_grad > 0
        # per-pixel-summed loss units keep the threshold independent of resolution
        self.grad_accum[seen] += res.screen_grad[seen] * (cam.width * cam.height)
        self.grad_count[seen] += 1
        self.prev_index = idx
        self.iteration += 1
        it = self.iteration
        if (cfg.densify_from <= it <= cfg.densify_until and cfg.densify_every > 0
                and it % cfg.densify_every == 0):
            self.densify()
        p = psnr(res.image, gt)
        if cfg.log_every and (it % cfg.log_every == 0 or it == 1):
            self.metrics.append(MetricsRow(it, res.l_rgb, res.l_mask, res.l_ssim, res.l_con, res.l_smooth,
                                           res.omega, p))
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            self.checkpoint()
        return res, p

    def run(self, iterations: int | None = None) -> TrainResult:
        total = self.config.iterations if iterations is None else iterations
        t0 = time.perf_counter()
        last_psnr = float("nan")
        with runtime_limits(self.config):
            while self.iteration < total:
                _, last_psnr = self.train_step()
        self.checkpoint()
        return TrainResult(self.iteration, last_psnr, len(self.model.cloud), time.perf_counter() - t0,
                           self.optimizer.skipped)


def train(config: RunConfig, manifest: DatasetManifest, out_dir, resume: bool = False) -> TrainResult:
    return Trainer(config, manifest, out_dir, resume).run()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    frame: int
    camera: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    split: str
    rows: list[EvalRow]
    missing: list[str]

    @property
    def psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")

    def table(self) -> str:
        lines = [f"split {self.split}: {len(self.rows)} frames",
                 f"{'frame':>6} {'camera':>8} {'PSNR':>8} {'SSIM':>7}"]
        for r in self.rows:
            lines.append(f"{r.frame:>6} {r.camera:>8} {r.psnr:8.3f} {r.ssim:7.4f}")
        lines.append(f"{'mean':>15} {self.psnr:8.3f} {self.ssim:7.4f}")
        if self.missing:
            lines.append(f"missing: {', '.join(self.missing)}")
        return "\n".join(lines)

    def write_csv(self, path):
        write_reports([self], path)


def write_reports(reports: list[EvalReport], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "frame", "camera", "psnr", "ssim"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.split, r.frame, r.camera, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
            w.writerow([rep.split, "mean", "", f"{rep.psnr:.6f}", f"{rep.ssim:.6f}"])


def evaluate(render_fn, manifest: DatasetManifest, split: str, limit: int | None = None) -> EvalReport:
    """``render_fn(record, pose, camera) -> (H, W, 3)`` image compared against stored frames."""
    rows, missing = [], []
    records = manifest.split(split)
    if limit:
        records = records[:limit]
    for rec in records:
        path = manifest.root / rec.image
        if not path.exists() or not (manifest.root / rec.pose).exists():
            missing.append(rec.image)
            log.warning("missing frame %s", rec.image)
            continue
        gt = load_image(path)
        pred = np.clip(render_fn(rec, load_pose(manifest, rec), manifest.camera(rec.camera)), 0, 1)
        mse = float(np.mean((pred - gt) ** 2))
        p = float("inf") if mse == 0 else psnr(pred, gt)
        rows.append(EvalRow(rec.frame, rec.camera, p, float(ssim(pred, gt))))
    return EvalReport(split, rows, missing)


def model_renderer(model: AvatarModel):
    return lambda rec, pose, cam: model.render(pose, cam).color


def oracle_renderer(manifest: DatasetManifest):
    scene = scene_from_manifest(manifest)
    return lambda rec, pose, cam: scene.render(rec.frame, cam).color


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    gaussians: int
    resolution: int
    frames: int
    ms_single: float
    ms_multi: float
    threads_multi: int
    overhead_ms: float

    def table(self) -> str:
        return (f"{self.gaussians} Gaussians @ {self.resolution}x{self.resolution}, {self.frames} frames\n"
                f"  1 thread      : {self.ms_single:8.2f} ms/frame\n"
                f"  {self.threads_multi:>2} threads    : {self.ms_multi:8.2f} ms/frame\n"
                f"  empty overhead: {self.overhead_ms:8.2f} ms/frame")


def random_cloud_scene(n: int, rng: np.random.Generator):
    means = rng.normal(0, 0.05, (n, 3)) + np.array([0, 0.09, 0])
    A = rng.normal(size=(n, 3, 3)) * 0.004
    cov = A @ np.swapaxes(A, 1, 2) + 1e-6 * np.eye(3)
    return means, cov, rng.random((n, 3)), rng.uniform(0.3, 0.95, n)


def _time_renders(means, cov, colors, opac, cam, frames, threads):
    set_threads(threads)
    render(means, cov, colors, opac, cam)   # warm-up / compile
    t0 = time.perf_counter()
    for _ in range(frames):
        render(means, cov, colors, opac, cam)
    return 1000 * (time.perf_counter() - t0) / max(frames, 1)


def bench(model: AvatarModel | None, resolution: int = 256, frames: int = 10, gaussians: int = 10_000,
          seed: int = 0) -> BenchReport:
    import numba

    from .renderer import look_at

    rng = np.random.default_rng(seed)
    R, t = look_at([0, 0.09, -0.5], [0, 0.09, 0], up=(0, 1, 0))
    cam = Camera(430 * resolution / 256, 430 * resolution / 256, resolution / 2, resolution / 2, R, t,
                 resolution, resolution, "bench")
    if model is not None:
        from .skeleton import Pose

        fw = model.forward(Pose.identity(), cam, record=False)
        means, cov, colors, opac = fw.means, fw.cov, fw.state.color, fw.opacity
    else:
        means, cov, colors, opac = random_cloud_scene(gaussians, rng)
    max_threads = numba.config.NUMBA_NUM_THREADS
    prev = numba.get_num_threads()
    try:
        single = _time_renders(means, cov, colors, opac, cam, frames, 1)
        multi = _time_renders(means, cov, colors, opac, cam, frames, max_threads)
        empty = _time_renders(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0), cam,
                              frames, 1)
    finally:
        numba.set_num_threads(prev)
    return BenchReport(len(means), resolution, frames, single, multi, max_threads, empty)
