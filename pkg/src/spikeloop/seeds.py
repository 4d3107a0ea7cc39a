"""Deterministic seed splitting.

Every random stream in the pipeline derives from one master seed through
numpy's SeedSequence with a spawn key of (role, *indices).  The role codes
below are stable identifiers and part of the reproducibility contract:
given the same master seed, every sub-phase sees the same streams no matter
which other phases ran before it.
"""

import numpy as np

# Role codes. Do not renumber — checkpoints and reruns depend on them.
SW_INIT = 0  # software weight initialization
SW_BATCHES = 1  # software training batch shuffling
CALIB_TRIAL = 2  # trial-to-trial noise during calibration measurements
TUNE_G_UNIT = 3  # probe-sample selection and trials for g_unit search
CONVERT_TRIAL = 4  # configuration noise for the conversion-time network
ITL_TRIAL = 5  # per-iteration reconfiguration noise (index = iteration)
ITL_BATCHES = 6  # in-the-loop batch shuffling
INPUT_TRAINS = 7  # Poisson input spike trains (indices = context, sample)
EVAL_SUBSET = 8  # evaluation-subset selection
EVAL_TRIAL = 9  # configuration noise for evaluation runs (index = context)
RASTER = 10  # raster export sample selection
SPREAD_TRIAL = 11  # trial noise draws for the calibration spread report


def sequence(master_seed: int, role: int, *indices: int) -> np.random.SeedSequence:
    """SeedSequence for a named stream of the given master seed."""
    return np.random.SeedSequence(master_seed, spawn_key=(role, *indices))


def generator(master_seed: int, role: int, *indices: int) -> np.random.Generator:
    """PCG64 generator for a named stream of the given master seed."""
    return np.random.Generator(np.random.PCG64(sequence(master_seed, role, *indices)))
