import numpy as np
import pytest

from outfitrec.datagen import WorldConfig, generate_world
from outfitrec.encoder import EncoderConfig, init_model

TINY_WORLD = WorldConfig(n_users=6, items_per_category=30, positives_per_user=13, d_in=8, style_dim=4,
                         n_cold_users=3, cold_profile_size=5, cold_test_size=4, seed=1)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_model(tiny_world):
    cfg = EncoderConfig(d_in=8, n_users=tiny_world.n_users, d=8, heads=2, tier="XS",
                        max_outfit_size=6)
    return init_model(cfg, np.random.default_rng(0))


# criterion number -> one PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
