import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from protoxct.cli import main

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

CHAIN = (
    ("data", ["synth-data"]),
    ("init", ["init-protos", "--data", "{data}"]),
    ("model", ["train", "--data", "{data}", "--init", "{init}"]),
    ("cal", ["calibrate", "--data", "{data}", "--model", "{model}"]),
    ("rep", ["eval", "--data", "{data}", "--model", "{model}", "--calibration", "{cal}"]),
    ("map", ["predict-map", "--data", "{data}", "--model", "{model}", "--calibration", "{cal}"]),
    ("nn", ["nearest-anchors", "--data", "{data}", "--model", "{model}"]),
    ("emb", ["export-embeddings", "--data", "{data}", "--model", "{model}", "--calibration", "{cal}"]),
)


def run_chain(root: Path, extra=()):
    """Run every CLI command in order under ``root``; returns the output dirs and wall time."""
    dirs = {name: root / name for name, _ in CHAIN}
    start = time.perf_counter()
    for name, argv in CHAIN:
        args = [a.format(**dirs) for a in argv] + ["--out", str(dirs[name]), *extra]
        code = main(args)
        assert code == 0, f"{argv[0]} exited with {code}"
    return dirs, time.perf_counter() - start


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One end-to-end run at the default configuration (a few minutes of CPU)."""
    return run_chain(tmp_path_factory.mktemp("default_run"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
