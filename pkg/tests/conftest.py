import time

import pytest

from ctkae.data import generate_linear_oracle
from ctkae.model import KoopmanAutoencoder, ModelConfig
from ctkae.trainer import TrainConfig, train

# Shared reference run: default objective and schedule on 64 linear-oracle trajectories.
ORACLE = dict(seed=0, nz_true=8, n_d=64, T=40, dt=0.1)
TRAINED_MODEL = dict(n_d=64, nz=16)
TRAINED_EPOCHS = 200


class TrainedOracle:
    def __init__(self):
        self.train_ds = generate_linear_oracle(n_traj=64, split=0, **ORACLE)
        self.test_ds = generate_linear_oracle(n_traj=8, split=1, **ORACLE)
        self.model = KoopmanAutoencoder(ModelConfig(**TRAINED_MODEL))
        self.cfg = TrainConfig(epochs=TRAINED_EPOCHS, warmup_epochs=TRAINED_EPOCHS // 10)
        t0 = time.perf_counter()
        self.record, self.state = train(self.train_ds, self.model, self.cfg)
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_oracle():
    return TrainedOracle()


# -- acceptance report: one PASS/FAIL line per criterion in the terminal summary --------------

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
