"""Conversion of trained weights onto the substrate and in-the-loop training.

Conversion quantizes each float weight in [-1, 1] to a 4-bit magnitude with
a sign choosing which of the synapse's twin entries is enabled, pairs that
with the calibrated DAC words, and picks the global conductance unit so the
label layer responds in a usable rate band.

In-the-loop training then runs the familiar gradient loop, except the
forward pass happens on the substrate: measured firing rates (divided by a
fixed rate divisor) stand in for the ReLU activations, both in the cost and
in the backward pass's derivative masks.  Weight updates are applied to a
float-precision master copy which is requantized for the next hardware
iteration, so progress is not limited by the 4-bit resolution.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import calibration, dataset, relu_net, seeds, substrate
from .errors import ConfigError
from .substrate import HardwareNetworkConfig, NeuronTargets, VariationSpec

HW_LEVELS = 15  # 4-bit magnitude
RATE_DIVISOR = 30.0  # Hz; measured rate / divisor stands in for an activation

# spike-train seed contexts (second spawn-key index of INPUT_TRAINS)
EVAL_CONTEXT = 0
BATCH_CONTEXT_BASE = 1


def quantize(weights):
    """Map float weights in [-1, 1] to (magnitude, sign) hardware levels.

    Magnitude is round-half-away-from-zero of |w| * 15; sign is +1 for
    w >= 0 else -1 (a zero weight is an excitatory entry of weight 0).
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.abs(w).max(initial=0.0) > 1.0:
        raise ValueError(f"weight magnitude exceeds 1 (max {np.abs(w).max():.6g})")
    hw = np.floor(np.abs(w) * HW_LEVELS + 0.5).astype(np.uint8)
    sign = np.where(w >= 0, 1, -1).astype(np.int8)
    return hw, sign


def quantize_all(weight_list):
    pairs = [quantize(w) for w in weight_list]
    return [h for h, _ in pairs], [s for _, s in pairs]


def convert(
    software,
    phys,
    store,
    master_seed,
    g_unit=None,
    tune_pixels=None,
    tune_labels=None,
    targets=NeuronTargets(),
    variation=VariationSpec(),
    threads=1,
):
    """Build a HardwareNetworkConfig from a software training result.

    Uses the calibration store's inverse curves for the DAC words.  When
    g_unit is not given it is tuned on tune_pixels/tune_labels so that the
    median rate of each sample's own label neuron lands in the usable band.
    """
    if store.fab_seed != phys.fab_seed:
        raise ConfigError(
            f"calibration store was made for fab_seed {store.fab_seed}, "
            f"substrate has fab_seed {phys.fab_seed}"
        )
    topology = tuple(software.topology)
    n_logical = int(sum(topology[1:]))
    if store.n_neurons < n_logical or phys.n_neurons < n_logical:
        raise ConfigError(
            f"network needs {n_logical} neurons; calibrated substrate has "
            f"{min(store.n_neurons, phys.n_neurons)}"
        )
    hw, sign = quantize_all(software.weights)
    dacs = store.dacs_for(targets)[:n_logical]
    cfg = HardwareNetworkConfig(
        topology=topology,
        dacs=dacs,
        hw=hw,
        sign=sign,
        g_unit=1.0,
        fab_seed=phys.fab_seed,
        master_seed=master_seed,
    )
    if g_unit is None:
        if tune_pixels is None or tune_labels is None:
            raise ConfigError(
                "convert needs either an explicit g_unit or tuning pixels with labels"
            )
        g_unit, _ = calibration.tune_g_unit(
            phys, cfg, tune_pixels, tune_labels, master_seed, variation=variation, threads=threads
        )
    cfg.g_unit = float(g_unit)
    cfg.validate()
    return cfg


def forward_hw(
    phys,
    cfg,
    pixels,
    master_seed,
    trial,
    train_context,
    t_on=substrate.DEFAULT_T_ON,
    t_off=substrate.DEFAULT_T_OFF,
    dt=substrate.DEFAULT_DT,
    divisor=RATE_DIVISOR,
    variation=VariationSpec(),
    threads=1,
    net=None,
    return_record=False,
):
    """One hardware forward pass: activations are measured rates / divisor.

    Returns (acts, record); acts[0] is the raw pixel batch, later entries
    follow the layer order.  Pass an already configured net to reuse a
    write (e.g. several presentations of one trial).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if net is None:
        net = substrate.configure(phys, cfg, trial, variation)
    rates = substrate.encode_rates(pixels)
    trains = [
        substrate.make_spike_trains(
            r, t_on=t_on, t_off=t_off,
            seed=seeds.sequence(master_seed, seeds.INPUT_TRAINS, train_context, i),
        )
        for i, r in enumerate(rates)
    ]
    if return_record:
        rec = substrate.run(net, trains, t_on=t_on, t_off=t_off, dt=dt, threads=threads)
        measured = substrate.rates_from_record(rec)
    else:
        rec = None
        measured = substrate.measure_rates(net, trains, t_on=t_on, t_off=t_off, dt=dt,
                                           threads=threads)
    acts = [pixels]
    for name, _, _ in substrate.layer_map(net.topology)[1:]:
        acts.append(measured[name] / divisor)
    return acts, rec


@dataclass
class ITLConfig:
    """Hyper-parameters of the in-the-loop phase."""

    eta: float = 0.05
    gamma: float = 0.0
    lam: float = 0.001
    batch_size: int = 1200
    iterations: int = 40
    rate_divisor: float = RATE_DIVISOR
    t_on: float = substrate.DEFAULT_T_ON
    t_off: float = substrate.DEFAULT_T_OFF
    dt: float = substrate.DEFAULT_DT
    eval_size: int = 1000

    def validate(self):
        if self.eta <= 0 or not 0 <= self.gamma < 1:
            raise ConfigError("need eta > 0 and 0 <= gamma < 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_size < 1:
            raise ConfigError("batch_size, iterations and eval_size must be positive")
        if self.rate_divisor <= 0 or self.t_on <= 0 or self.t_off < 0 or self.dt <= 0:
            raise ConfigError("invalid rate/timing settings")
        return self


@dataclass
class ItlStepResult:
    weights: list
    velocity: list
    cfg: HardwareNetworkConfig
    batch_accuracy: float
    mean_label_rate_hz: float
    acts: list
    net: object  # the configured trial, reusable for more presentations


def _trial_for_iteration(master_seed, iteration):
    # iteration 0 is the conversion-time network; later iterations rewrite
    if iteration == 0:
        return seeds.sequence(master_seed, seeds.CONVERT_TRIAL)
    return seeds.sequence(master_seed, seeds.ITL_TRIAL, iteration)


def itl_step(
    phys,
    cfg,
    weights,
    velocity,
    batch_pixels,
    batch_labels,
    itl: ITLConfig,
    master_seed,
    iteration,
    classes=dataset.REDUCED_CLASSES,
    variation=VariationSpec(),
    threads=1,
    update=True,
):
    """One in-the-loop iteration: present a batch, measure, update, requantize.

    The batch accuracy and label rate describe the state *before* the update.
    With update=False the hardware is only measured.
    """
    trial = _trial_for_iteration(master_seed, iteration)
    net = substrate.configure(phys, cfg, trial, variation)
    acts, _ = forward_hw(
        phys, cfg, batch_pixels, master_seed, trial,
        train_context=BATCH_CONTEXT_BASE + iteration,
        t_on=itl.t_on, t_off=itl.t_off, dt=itl.dt,
        divisor=itl.rate_divisor, variation=variation, threads=threads, net=net,
    )
    picks = substrate.classify_hw(acts[-1], classes)
    batch_acc = float(np.mean(picks == np.asarray(batch_labels)))
    mean_rate = float(acts[-1].mean() * itl.rate_divisor)
    if not update:
        return ItlStepResult(weights, velocity, cfg, batch_acc, mean_rate, acts, net)
    targets_1h = dataset.one_hot(batch_labels, classes)
    # Data term averaged per sample so eta keeps the same meaning at any
    # batch size; the summed form diverges immediately at batch >= 300.
    data_grads = relu_net.backward(weights, acts, targets_1h, lam=0.0, label_scale=1.0)
    n_batch = len(batch_labels)
    grads = [dg / n_batch + itl.lam * w for dg, w in zip(data_grads, weights)]
    new_w, new_v = relu_net.step(weights, velocity, grads, itl.eta, itl.gamma)
    hw, sign = quantize_all(new_w)
    new_cfg = replace(cfg, hw=hw, sign=sign)
    return ItlStepResult(new_w, new_v, new_cfg, batch_acc, mean_rate, acts, net)


@dataclass
class ITLResult:
    """Metrics and state of an in-the-loop run (row 0 = conversion state)."""

    iterations: np.ndarray
    batch_accuracy: np.ndarray
    test_accuracy_subset: np.ndarray
    mean_label_rate_hz: np.ndarray
    weights: list  # final float master copy
    velocity: list
    cfg: HardwareNetworkConfig
    snapshots: list = field(repr=False, default_factory=list)  # per-row weight lists
    eval_indices: np.ndarray = None

    def rows(self):
        for k in range(len(self.iterations)):
            yield (
                int(self.iterations[k]),
                float(self.batch_accuracy[k]),
                float(self.test_accuracy_subset[k]),
                float(self.mean_label_rate_hz[k]),
            )


def eval_subset_indices(split, master_seed, size):
    rng = seeds.generator(master_seed, seeds.EVAL_SUBSET)
    size = min(size, split.n_test)
    return np.sort(rng.choice(split.n_test, size=size, replace=False))


def _eval_on_net(net, eval_trains, eval_labels, itl, classes, threads):
    label = substrate.measure_rates(
        net, eval_trains, t_on=itl.t_on, t_off=itl.t_off, dt=itl.dt,
        layers=("label",), threads=threads,
    )["label"]
    picks = substrate.classify_hw(label, classes)
    return float(np.mean(picks == eval_labels))


def train_itl(
    phys,
    cfg,
    software,
    split,
    itl: ITLConfig,
    master_seed,
    variation=VariationSpec(),
    threads=1,
    progress=None,
):
    """Run the in-the-loop phase starting from a converted configuration.

    Produces iterations+1 metric rows: row 0 measures the conversion-time
    network, each later row the network after another weight update.  The
    test subset, its stimulus realization, and every reconfiguration derive
    from the master seed.
    """
    itl.validate()
    classes = tuple(int(c) for c in software.classes)
    weights = [w.copy() for w in software.weights]
    velocity = [np.zeros_like(w) for w in weights]
    cfg = replace(cfg)  # do not mutate the caller's config

    idx = eval_subset_indices(split, master_seed, itl.eval_size)
    eval_pixels = split.test_pixels[idx]
    eval_labels = split.test_labels[idx]
    eval_rates = substrate.encode_rates(eval_pixels.astype(np.float64))
    eval_trains = [
        substrate.make_spike_trains(
            r, t_on=itl.t_on, t_off=itl.t_off,
            seed=seeds.sequence(master_seed, seeds.INPUT_TRAINS, EVAL_CONTEXT, i),
        )
        for i, r in enumerate(eval_rates)
    ]

    batch_rng = seeds.generator(master_seed, seeds.ITL_BATCHES)
    n_rows = itl.iterations + 1
    out = {
        "iteration": np.arange(n_rows),
        "batch": np.zeros(n_rows),
        "test": np.zeros(n_rows),
        "rate": np.zeros(n_rows),
    }
    snapshots = []
    for it in range(n_rows):
        bidx = batch_rng.choice(split.n_train, size=min(itl.batch_size, split.n_train),
                                replace=False)
        res = itl_step(
            phys, cfg, weights, velocity,
            split.train_pixels[bidx].astype(np.float64), split.train_labels[bidx],
            itl, master_seed, it, classes=classes, variation=variation,
            threads=threads, update=it < itl.iterations,
        )
        out["batch"][it] = res.batch_accuracy
        out["rate"][it] = res.mean_label_rate_hz
        out["test"][it] = _eval_on_net(res.net, eval_trains, eval_labels, itl, classes, threads)
        snapshots.append([w.copy() for w in weights])
        weights, velocity, cfg = res.weights, res.velocity, res.cfg
        if progress is not None:
            progress(it, out["batch"][it], out["test"][it], out["rate"][it])
    return ITLResult(
        iterations=out["iteration"],
        batch_accuracy=out["batch"],
        test_accuracy_subset=out["test"],
        mean_label_rate_hz=out["rate"],
        weights=weights,
        velocity=velocity,
        cfg=cfg,
        snapshots=snapshots,
        eval_indices=idx,
    )


def eval_hw(
    phys,
    cfg,
    pixels,
    labels,
    master_seed,
    trial=None,
    classes=dataset.REDUCED_CLASSES,
    t_on=substrate.DEFAULT_T_ON,
    t_off=substrate.DEFAULT_T_OFF,
    dt=substrate.DEFAULT_DT,
    variation=VariationSpec(),
    threads=1,
):
    """Accuracy of a hardware configuration on a labelled pixel set."""
    if trial is None:
        trial = seeds.sequence(master_seed, seeds.EVAL_TRIAL, 0)
    acts, _ = forward_hw(
        phys, cfg, pixels, master_seed, trial, train_context=EVAL_CONTEXT,
        t_on=t_on, t_off=t_off, dt=dt, variation=variation, threads=threads,
    )
    picks = substrate.classify_hw(acts[-1], classes)
    return float(np.mean(picks == np.asarray(labels))), acts[-1] * RATE_DIVISOR


# --- weight migration ----------------------------------------------------------


@dataclass
class MigrationReport:
    """Joint histogram of signed hardware levels before vs after a phase.

    Levels run -15..15 (index 0..30); pairs where both sides are level 0
    are excluded as uninformative.
    """

    per_projection: list  # (31, 31) int64 each
    combined: np.ndarray
    fraction_within_2: float
    n_pairs: int


def weight_migration(cfg_before: HardwareNetworkConfig, cfg_after: HardwareNetworkConfig):
    if tuple(cfg_before.topology) != tuple(cfg_after.topology):
        raise ConfigError("cannot compare configurations with different topologies")
    hists = []
    combined = np.zeros((31, 31), dtype=np.int64)
    within = 0
    total = 0
    for hb, sb, ha, sa in zip(cfg_before.hw, cfg_before.sign, cfg_after.hw, cfg_after.sign):
        la = (hb.astype(np.int64) * sb) + 15
        lb = (ha.astype(np.int64) * sa) + 15
        keep = (la != 15) | (lb != 15)
        h = np.zeros((31, 31), dtype=np.int64)
        np.add.at(h, (la[keep], lb[keep]), 1)
        hists.append(h)
        combined += h
        within += int((np.abs(la[keep] - lb[keep]) <= 2).sum())
        total += int(keep.sum())
    frac = within / total if total else float("nan")
    return MigrationReport(hists, combined, frac, total)


# --- metrics file ----------------------------------------------------------------

METRIC_FIELDS = ("iteration", "batch_accuracy", "test_accuracy_subset", "mean_label_rate_hz")


def write_metrics(fileobj, result: ITLResult):
    w = csv.writer(fileobj, lineterminator="\r\n")
    w.writerow(METRIC_FIELDS)
    for it, b, t, r in result.rows():
        w.writerow([it, f"{b:.6f}", f"{t:.6f}", f"{r:.6f}"])


def read_metrics(fileobj):
    r = csv.reader(fileobj)
    header = next(r)
    if tuple(header) != METRIC_FIELDS:
        raise ConfigError(f"unexpected metrics header: {header}")
    rows = [(int(a), float(b), float(c), float(d)) for a, b, c, d in r]
    return rows
