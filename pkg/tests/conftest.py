import numpy as np
import pytest

from mirrorsplat.data import SyntheticSceneSpec, generate_synthetic, load_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    generate_synthetic(SyntheticSceneSpec(), out, seed=0)
    return out


@pytest.fixture(scope="session")
def toy(toy_dir):
    return load_dataset(toy_dir / "manifest.json")


# name -> (config overrides on the desk preset, train with masks removed)
DESK_ARMS = {
    "full": ({}, False),
    "repeat": ({}, False),
    "threads8": ({"threads": 8}, False),
    "no_vco": ({"vco_steps": 0, "total_steps": 6000}, False),
    "joint": ({"joint_camera_gaussians": True}, False),
    "vanilla": ({"vanilla": True}, False),
    "empty_masks": ({}, True),
    "mirror_free": ({"vco_steps": 0, "total_steps": 6000, "lambda_pc": 0.0}, True),
}


@pytest.fixture(scope="session")
def desk_run(toy, tmp_path_factory):
    """Train (once per session) and return the desk-scale run for an ablation arm."""
    from mirrorsplat.trainer import TrainConfig, run_training

    cache = {}

    def get(arm: str):
        if arm not in cache:
            overrides, no_masks = DESK_ARMS[arm]
            cfg = TrainConfig.desk(threads=1).with_overrides(overrides)
            out = tmp_path_factory.mktemp(f"run_{arm}")
            cache[arm] = (run_training(toy.without_masks() if no_masks else toy, cfg, out), out)
        return cache[arm]

    return get


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a pass/fail line for the acceptance summary."""
    def record(index: int, name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[index] = f"[{index:2d}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(ACCEPTANCE[index])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
