"""Shared fixtures.

The reduced dataset and software models are session-scoped because several
test modules need them and they are deterministic.  The desk-scale pipeline
runs (fabricate, calibrate, convert, in-the-loop train for master seeds 0-4)
are by far the most expensive fixture — tens of minutes — and are shared by
the trainer property tests and the end-to-end acceptance tests.
"""

import os
from types import SimpleNamespace

import numpy as np
import pytest

from spikeloop import calibration, dataset, loop_trainer, relu_net, seeds, substrate

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist")


def mnist_path(base):
    for suffix in (".gz", ""):
        p = os.path.join(DATA_DIR, base + suffix)
        if os.path.exists(p):
            return p
    pytest.skip(f"MNIST file {base} not present under {DATA_DIR}")


@pytest.fixture(scope="session")
def split():
    return dataset.reduce_dataset(
        dataset.load_idx(
            mnist_path("train-images-idx3-ubyte"), mnist_path("train-labels-idx1-ubyte")
        ),
        dataset.load_idx(
            mnist_path("t10k-images-idx3-ubyte"), mnist_path("t10k-labels-idx1-ubyte")
        ),
    )


@pytest.fixture(scope="session")
def software_models(split):
    """Software training results for master seeds 0..4 (a couple seconds each)."""
    return {
        ms: relu_net.train_software(split, relu_net.HyperParams(), ms) for ms in range(5)
    }


@pytest.fixture(scope="session")
def tiny_substrate():
    """A small calibrated substrate shared by fast hardware-path tests."""
    phys = substrate.fabricate(35, fab_seed=7)
    store = calibration.calibrate_all(phys, master_seed=7)
    return phys, store


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


DESK_T_ON = 500.0
DESK_T_OFF = 100.0
DESK_ITERATIONS = 60


def run_pipeline(split, software, master_seed, progress=None):
    """One full desk-scale pipeline: fabricate, calibrate, convert, ITL.

    Every stage derives its randomness from the master seed (the substrate's
    fabrication seed included), so the products are fully reproducible.
    """
    phys = substrate.fabricate(35, fab_seed=master_seed)
    store = calibration.calibrate_all(phys, master_seed=master_seed)
    probe_rng = seeds.generator(master_seed, seeds.TUNE_G_UNIT, 2)
    pick = probe_rng.choice(split.n_train, size=50, replace=False)
    cfg = loop_trainer.convert(
        software, phys, store, master_seed,
        tune_pixels=split.train_pixels[pick],
        tune_labels=split.train_labels[pick],
    )
    sub_idx = loop_trainer.eval_subset_indices(split, master_seed, 1000)
    conversion_accuracy, _ = loop_trainer.eval_hw(
        phys, cfg, split.test_pixels[sub_idx], split.test_labels[sub_idx],
        master_seed, t_on=DESK_T_ON, t_off=DESK_T_OFF,
    )
    itl = loop_trainer.ITLConfig(
        batch_size=300, iterations=DESK_ITERATIONS,
        t_on=DESK_T_ON, t_off=DESK_T_OFF, eval_size=300,
    )
    result = loop_trainer.train_itl(
        phys, cfg, software, split, itl, master_seed, progress=progress
    )
    return SimpleNamespace(
        master_seed=master_seed,
        software=software,
        software_accuracy=relu_net.accuracy(
            software.weights, split.test_pixels, split.test_labels
        ),
        phys=phys,
        store=store,
        cfg=cfg,
        conversion_accuracy=conversion_accuracy,
        itl=result,
        migration=loop_trainer.weight_migration(cfg, result.cfg),
    )


@pytest.fixture(scope="session")
def pipeline_runs(split, software_models):
    """Desk-scale pipeline products for master seeds 0..4 (tens of minutes)."""
    return {ms: run_pipeline(split, software_models[ms], ms) for ms in range(5)}
