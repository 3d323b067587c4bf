import numpy as np
import pytest

from handsplat import data


# small dataset generator overrides for CLI-driven tests
TINY_GEN = ["--set", "num_gaussians=300", "--set", "resolution=32", "--set", "focal=53.75",
            "--set", "num_frames=4", "--set", "novel_pose_frames=1", "--set", "train_cameras=2",
            "--set", "heldout_cameras=1"]


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if rep.when != "call" and outcome == "passed":
                continue
            name = nodeid.split("::test_criterion_")[1]
            num, label = name.split("_", 1)
            lines[int(num)] = f"criterion {int(num):>2} {label.replace('_', ' '):<36} " + \
                ("PASS" if outcome == "passed" else "FAIL" if outcome in ("failed", "error") else "SKIP")
    if lines:
        terminalreporter.section("acceptance")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 32 px, 6-frame, 3-camera dataset for fast training plumbing tests."""
    cfg = data.DataConfig(num_gaussians=500, num_frames=6, novel_pose_frames=2, train_cameras=2,
                          heldout_cameras=1, resolution=32, focal=430.0 / 8)
    return data.render_dataset(data.generate_scene(5, cfg), tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The frozen default scene (seed 0) rendered at full size."""
    return data.render_dataset(data.generate_scene(0), tmp_path_factory.mktemp("default"))


def tiny_config(**kw):
    from handsplat.config import RunConfig

    base = dict(template_count=150, num_dynamic=4, hidden_width=16, train_scale=1.0, densify_from=3,
                densify_every=3, densify_until=9, log_every=1, checkpoint_every=0)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
