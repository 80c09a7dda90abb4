import os

# Single-threaded BLAS keeps small-matrix runs fast and bit-reproducible.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest

from comen.config import TrainConfig
from comen.data import generate_benchmark, fold_data


@pytest.fixture(scope="session")
def bundle7():
    return generate_benchmark(7)


@pytest.fixture(scope="session")
def fold0(bundle7):
    return fold_data(bundle7, 0)


@pytest.fixture(scope="session")
def quick_cfg():
    return TrainConfig(stage1_epochs=4, stage2_epochs=4, lr_decay_epoch=3)
