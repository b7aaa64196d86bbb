from pathlib import Path

import pytest
import yaml
from hypothesis import settings

from mrdetect.cli import main

# fixed example generation so that suite runs are repeatable
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

TINY = {
    "image_size": 32,
    "toy": {"n_real": 60, "synthetic_counts": {"toygan": 30, "toyddim": 30, "toygan_trunc": 10, "toyddim_s10": 10}},
    "diffusion": {"steps": 5, "S": 4, "variant_S": 2, "base_channels": 16},
    "gan": {"steps": 5, "encoder_steps": 5, "widths": [32, 32, 16, 16]},
    "splits": {"train_count": 20, "test_count": 10, "test_counts": {"toygan_trunc": 10, "toyddim_s10": 10}},
    "detector": {"epochs": 2},
    "eval": {"robustness_max_per_subset": 4},
}

TINY_COMMANDS = [
    ["toygen", "--stage", "real"],
    ["train", "dm"],
    ["train", "gan"],
    ["train", "encoder"],
    ["toygen", "--stage", "synthetic"],
    ["reconstruct"],
    ["train", "detector", "--mode", "all"],
    ["eval", "table"],
    ["eval", "ablation"],
    ["eval", "robustness"],
    ["eval", "embeddings"],
]


def write_tiny_config(directory: Path) -> Path:
    path = directory / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete miniature pipeline driven through the CLI, shared by several test modules."""
    root = tmp_path_factory.mktemp("tiny")
    config = write_tiny_config(root)
    out = root / "run"
    codes = {}
    for cmd in TINY_COMMANDS:
        codes[" ".join(cmd)] = main(cmd + ["--config", str(config), "--out", str(out)])
    return {"config": config, "out": out, "codes": codes}


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Report one acceptance criterion as a PASS/FAIL line, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        request.config.stash.setdefault(_ACCEPTANCE_KEY, []).append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
