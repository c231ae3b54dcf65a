import numpy as np
import pytest

from case_lab.compose import ModelConfig, Variant, init_models
from case_lab.datagen import GenConfig, generate_pairs, split_tasks

SMALL_GEN = GenConfig(width=6, height=6, tasks_min=2, tasks_max=3)


@pytest.fixture(scope="session")
def small_split():
    return split_tasks(SMALL_GEN, rng_seed=0)


@pytest.fixture(scope="session")
def small_pairs(small_split):
    return generate_pairs(12, small_split.train_sequences, SMALL_GEN, rng_seed=1)


def tiny_models(variant=Variant.CASE_CI_L, seed=0, width=6, height=6, view="centred"):
    """A small network with random (non-zero) biases, so relu kinks are not hit exactly."""
    models = init_models(
        ModelConfig(width, height, variant, latent_dim=4, hidden=8, policy_hidden=8, seed=seed, view=view)
    )
    rng = np.random.default_rng(seed + 100)
    for name, t in models.store.params.items():
        if name.endswith(".b"):
            t.data[:] = rng.normal(scale=0.1, size=t.shape)
    return models


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
