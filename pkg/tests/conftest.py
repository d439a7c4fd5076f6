import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("ci", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("ci")
torch.set_num_threads(1)

SMALL_COUNTS = {
    "train": {"healthy": 6, "sick_non_tb": 6, "tb_active": 6, "tb_latent": 3, "tb_active_latent": 3},
    "val": {"healthy": 4, "sick_non_tb": 4, "tb_active": 3, "tb_latent": 2, "tb_active_latent": 1,
            "tb_uncertain": 2},
}


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    from ctdiag.synth import SynthConfig, generate_synthetic

    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthConfig(counts=SMALL_COUNTS, seed=11), root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=str):
        terminalreporter.write_line(results[key])
