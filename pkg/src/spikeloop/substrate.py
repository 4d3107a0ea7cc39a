"""Emulated analog neuromorphic substrate.

The constraint model: conductance-based LIF neurons whose parameters are set
through 10-bit DACs with per-neuron transfer curves (fabrication mismatch),
trial-to-trial write noise on every configuration, and 4-bit paired-sign
synapses scaled by a global conductance unit.  Inputs are Poisson rate-coded
spike sources; hidden and label layers occupy neuron circuits.

Dynamics per neuron (biological domain, mV / ms / nF / uS):

    C_m du/dt = g_l (E_leak - u) + g_e(t) (E_exc - u) + g_i(t) (E_inh - u)

with g_l = C_m / tau_m.  Both synaptic conductances decay exponentially with
the shared tau_syn and jump by the synapse's peak conductance at each
presynaptic spike arrival (uniform 1 ms transmission delay).  Upon u >=
V_thresh the neuron spikes, u <- E_reset, and integration is clamped for
tau_ref.  Integration is exponential Euler at fixed dt with the within-step
conductance handled analytically (exact exponential decay, step-averaged
value driving the membrane), which keeps the membrane inside the reversal
bounds unconditionally.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RuntimeFailure

PARAM_NAMES = ("e_inh", "e_reset", "e_leak", "v_thresh", "e_exc", "tau_syn", "tau_m")
DAC_MAX = 1023

NU_TOT = 2500.0  # Hz, total input rate
DEFAULT_T_ON = 900.0  # ms stimulus
DEFAULT_T_OFF = 100.0  # ms silence
DEFAULT_DT = 0.1  # ms
DELAY_MS = 1.0  # uniform synaptic transmission delay
DEFAULT_G_UNIT = 2.0  # nS per hardware weight step

VOLT_ALPHA = 20.0  # bio -> hardware voltage gain
VOLT_SHIFT = 1800.0  # mV offset


@dataclass(frozen=True)
class NeuronTargets:
    """Calibration targets; defaults are the intended operating point."""

    e_inh: float = -80.0
    e_reset: float = -64.0
    e_leak: float = -40.0
    v_thresh: float = -37.5
    e_exc: float = 0.0
    tau_syn: float = 5.0
    tau_m: float = 20.0
    tau_ref: float = 0.1
    c_m: float = 0.2

    def __post_init__(self):
        if not (self.e_inh < self.e_reset < self.e_leak < self.v_thresh < self.e_exc):
            raise ConfigError("neuron targets must order E_inh < E_reset < E_leak < V_thresh < E_exc")
        if self.tau_syn <= 0 or self.tau_m <= 0 or self.tau_ref <= 0 or self.c_m <= 0:
            raise ConfigError("time constants and capacitance must be positive")

    def as_array(self):
        return np.array([getattr(self, p) for p in PARAM_NAMES])


@dataclass(frozen=True)
class VariationSpec:
    """Relative parameter disturbances at the post-calibration level.

    All entries except e_leak are write-to-write noise: every reconfiguration
    redraws them.  The leak entry scales a per-neuron operating-point bias
    that is fixed at fabrication and only present when the neuron is wired
    into the synaptic array (see configure); across the population it has the
    same spread, but it does not change between writes, so a training loop
    can adapt to it.
    """

    e_inh: float = 0.05
    e_reset: float = 0.02
    e_leak: float = 0.10
    v_thresh: float = 0.005
    e_exc: float = 0.005
    tau_syn: float = 0.10
    tau_m: float = 0.10
    weight: float = 0.10  # per-synapse peak conductance

    def __post_init__(self):
        if any(getattr(self, p) < 0 for p in PARAM_NAMES + ("weight",)):
            raise ConfigError("variation spreads must be >= 0")

    def as_array(self):
        return np.array([getattr(self, p) for p in PARAM_NAMES])

    @classmethod
    def none(cls):
        return cls(**{p: 0.0 for p in PARAM_NAMES + ("weight",)})


def base_ranges(targets: NeuronTargets):
    """Designed DAC->value spans per parameter, centered on the target."""
    return {
        "e_inh": (targets.e_inh - 20.0, targets.e_inh + 20.0),
        "e_reset": (targets.e_reset - 20.0, targets.e_reset + 20.0),
        "e_leak": (targets.e_leak - 20.0, targets.e_leak + 20.0),
        "v_thresh": (targets.v_thresh - 15.0, targets.v_thresh + 15.0),
        "e_exc": (targets.e_exc - 15.0, targets.e_exc + 15.0),
        "tau_syn": (0.1 * targets.tau_syn, 1.9 * targets.tau_syn),
        "tau_m": (0.2 * targets.tau_m, 1.8 * targets.tau_m),
    }


@dataclass
class SubstratePhysiology:
    """Fabricated transfer curves: value(dac) = gain*base(dac) + offset per neuron/param."""

    n_neurons: int
    fab_seed: int
    raw_spread: float
    gains: np.ndarray  # (n_neurons, 7)
    offsets: np.ndarray  # (n_neurons, 7)
    targets: NeuronTargets
    range_lo: np.ndarray = field(repr=False, default=None)  # (7,)
    range_hi: np.ndarray = field(repr=False, default=None)
    # unit draws for the leak operating-point bias; scaled by
    # VariationSpec.e_leak when a network is configured
    leak_bias: np.ndarray = field(repr=False, default=None)  # (n_neurons,)


def fabricate(n_neurons, fab_seed, raw_spread=0.30, targets=NeuronTargets()):
    """Draw per-neuron transfer-curve coefficients (deterministic per fab_seed).

    Coefficient sets that make a curve unusable — non-monotone (gain ~ 0) or
    unable to realize the parameter's target strictly inside the DAC range —
    are redrawn a bounded number of times.
    """
    if raw_spread < 0:
        raise ConfigError("raw_spread must be >= 0")
    ranges = base_ranges(targets)
    lo = np.array([ranges[p][0] for p in PARAM_NAMES])
    hi = np.array([ranges[p][1] for p in PARAM_NAMES])
    tgt = targets.as_array()
    off_sd = raw_spread * (hi - lo) / 4.0

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(fab_seed)))
    gains = 1.0 + rng.normal(0.0, raw_spread, (n_neurons, 7))
    offsets = rng.normal(0.0, 1.0, (n_neurons, 7)) * off_sd

    def usable(g, o):
        v0 = g * lo + o
        v1 = g * hi + o
        margin = 0.02 * (v1 - v0)
        return (g > 0.05) & (tgt > v0 + margin) & (tgt < v1 - margin)

    ok = usable(gains, offsets)
    for _ in range(1000):
        if ok.all():
            break
        n_bad = int((~ok).sum())
        gains[~ok] = 1.0 + rng.normal(0.0, raw_spread, n_bad)
        offsets[~ok] = rng.normal(0.0, 1.0, n_bad) * np.broadcast_to(off_sd, ok.shape)[~ok]
        ok = usable(gains, offsets)
    else:
        bad = np.argwhere(~ok)
        raise RuntimeFailure(
            f"fabrication failed: unusable transfer curves after retries at (neuron, param) {bad[:5].tolist()}"
        )
    return SubstratePhysiology(
        n_neurons=n_neurons,
        fab_seed=fab_seed,
        raw_spread=raw_spread,
        gains=gains,
        offsets=offsets,
        targets=targets,
        range_lo=lo,
        range_hi=hi,
        leak_bias=rng.normal(0.0, 1.0, n_neurons),
    )


def transfer(phys: SubstratePhysiology, param, dacs, neurons=None):
    """Evaluate the fabricated transfer curve(s) of one parameter.

    dacs and neurons broadcast together; neurons=None means all neurons.
    """
    p = PARAM_NAMES.index(param)
    if neurons is None:
        neurons = np.arange(phys.n_neurons)
    dacs = np.asarray(dacs, dtype=np.float64)
    base = phys.range_lo[p] + (phys.range_hi[p] - phys.range_lo[p]) * dacs / DAC_MAX
    return phys.gains[neurons, p] * base + phys.offsets[neurons, p]


def transfer_matrix(phys: SubstratePhysiology, dacs):
    """Evaluate all 7 curves for the first len(dacs) neurons; dacs (m, 7)."""
    dacs = np.asarray(dacs, dtype=np.float64)
    m = dacs.shape[0]
    base = phys.range_lo + (phys.range_hi - phys.range_lo) * dacs / DAC_MAX
    return phys.gains[:m] * base + phys.offsets[:m]


# --- network configuration ----------------------------------------------------


@dataclass(frozen=True)
class SynapseEntry:
    pre: int  # global channel id (inputs first, then neurons)
    post: int  # global neuron channel id
    hw_weight: int
    sign: int  # +1 excitatory, -1 inhibitory
    enabled: bool


@dataclass
class HardwareNetworkConfig:
    """Digital-domain description: DAC words, twin-pair synapse weights, g_unit."""

    topology: tuple
    dacs: np.ndarray  # (n_logical_neurons, 7) uint16
    hw: list  # per projection: (n_post, n_pre) uint8 in 0..15
    sign: list  # per projection: (n_post, n_pre) int8 in {+1,-1}
    g_unit: float  # nS per hw-weight step
    fab_seed: int
    master_seed: int = 0

    @property
    def n_inputs(self):
        return self.topology[0]

    @property
    def n_neurons(self):
        return int(sum(self.topology[1:]))

    def validate(self):
        if len(self.hw) != len(self.topology) - 1 or len(self.sign) != len(self.hw):
            raise ConfigError("projection count does not match topology")
        if self.dacs.shape != (self.n_neurons, len(PARAM_NAMES)):
            raise ConfigError(f"dacs shape {self.dacs.shape} does not match neuron count")
        if self.dacs.min() < 0 or self.dacs.max() > DAC_MAX:
            raise ConfigError("DAC word out of range")
        for n, (h, s) in enumerate(zip(self.hw, self.sign)):
            shape = (self.topology[n + 1], self.topology[n])
            if h.shape != shape or s.shape != shape:
                raise ConfigError(f"projection {n} shape mismatch: {h.shape} vs {shape}")
            if h.min(initial=0) < 0 or h.max(initial=0) > 15:
                raise ConfigError("hw weight outside 0..15")
            if not np.isin(s, (-1, 1)).all():
                raise ConfigError("synapse sign must be +1 or -1")
        if tuple(self.topology) == (100, 15, 15, 5):
            n_twin = 2 * sum(h.size for h in self.hw)
            if n_twin > 3700:
                raise ConfigError(f"synapse budget exceeded: {n_twin} > 3700")
        if not 0 < self.g_unit:
            raise ConfigError("g_unit must be positive")

    def synapse_entries(self):
        """Iterate twin SynapseEntry pairs (active entry first)."""
        offsets = np.concatenate([[0], np.cumsum(self.topology)])
        for n, (h, s) in enumerate(zip(self.hw, self.sign)):
            pre0 = offsets[n]
            post0 = offsets[n + 1]
            for post in range(h.shape[0]):
                for pre in range(h.shape[1]):
                    w = int(h[post, pre])
                    sg = int(s[post, pre])
                    yield SynapseEntry(pre0 + pre, post0 + post, w, sg, True)
                    yield SynapseEntry(pre0 + pre, post0 + post, 0, -sg, False)


def layer_map(topology):
    """[(name, lo, hi)] over global channel ids; inputs first, label layer last."""
    names = ["input"]
    names += [f"hidden{i}" for i in range(1, len(topology) - 1)] + ["label"]
    out = []
    lo = 0
    for name, size in zip(names, topology):
        out.append((name, lo, lo + size))
        lo += size
    return out


@dataclass
class ConfiguredNetwork:
    """Analog-domain realization of a HardwareNetworkConfig for one trial."""

    topology: tuple
    params: dict  # name -> (n_neurons,) realized values
    g_exc: np.ndarray  # (n_neurons, n_channels) uS
    g_inh: np.ndarray  # (n_neurons, n_channels) uS
    tau_ref: float
    c_m: float
    g_unit: float
    trial_seed: int
    delay_ms: float = DELAY_MS

    @property
    def n_inputs(self):
        return self.topology[0]

    @property
    def n_neurons(self):
        return int(sum(self.topology[1:]))

    @property
    def n_channels(self):
        return self.n_inputs + self.n_neurons


def realize_params(phys, dacs, rng, variation=VariationSpec()):
    """One write: realized value = transfer(dac) * (1 + eps), eps ~ N(0, sigma).

    The leak potential's storage cell is stable between writes: its
    disturbance is the fixed operating-point bias applied by configure, not
    write noise, so its per-write sigma is zero here.  Physical guards: time
    constants floored at 0.1 ms; the reset rail cannot undershoot the
    inhibitory rail.  Returns {param: (n,) array} for the first
    dacs.shape[0] neurons.
    """
    values = transfer_matrix(phys, np.asarray(dacs, dtype=np.float64))
    sig = variation.as_array().copy()
    sig[PARAM_NAMES.index("e_leak")] = 0.0
    values = values * (1.0 + rng.normal(0.0, 1.0, values.shape) * sig)
    params = {name: values[:, i].copy() for i, name in enumerate(PARAM_NAMES)}
    params["tau_syn"] = np.maximum(params["tau_syn"], 0.1)
    params["tau_m"] = np.maximum(params["tau_m"], 0.1)
    params["e_reset"] = np.maximum(params["e_reset"], params["e_inh"])
    return params


def configure(phys, cfg: HardwareNetworkConfig, trial_seed, variation=VariationSpec()):
    """Write the configuration onto the substrate, drawing fresh trial noise.

    Neuron parameters go through realize_params; each synapse's peak
    conductance is hw_weight * g_unit * (1 + eps_w), eps_w ~ N(0, sigma_w).
    Wiring a neuron into the synaptic array shifts its leak by the fixed
    per-neuron operating-point bias (scaled by variation.e_leak).  Isolated
    bench fixtures bypass this function, which is why calibration can hit
    the leak target and a wired network still shows the biased value.
    """
    cfg.validate()
    n_logical = cfg.n_neurons
    if n_logical > phys.n_neurons:
        raise ConfigError(
            f"network needs {n_logical} neurons but substrate has {phys.n_neurons}"
        )
    seq = trial_seed if isinstance(trial_seed, np.random.SeedSequence) else np.random.SeedSequence(trial_seed)
    rng = np.random.Generator(np.random.PCG64(seq))
    params = realize_params(phys, cfg.dacs, rng, variation)
    params["e_leak"] = params["e_leak"] * (
        1.0 + phys.leak_bias[:n_logical] * variation.e_leak
    )

    n_channels = cfg.n_inputs + n_logical
    g_exc = np.zeros((n_logical, n_channels))
    g_inh = np.zeros((n_logical, n_channels))
    offsets = np.concatenate([[0], np.cumsum(cfg.topology)])
    for n, (h, s) in enumerate(zip(cfg.hw, cfg.sign)):
        noise = 1.0 + rng.normal(0.0, variation.weight, h.shape)
        g = h.astype(np.float64) * (cfg.g_unit * 1e-3) * noise  # nS -> uS
        pre = slice(offsets[n], offsets[n + 1])
        post = slice(offsets[n + 1] - cfg.n_inputs, offsets[n + 2] - cfg.n_inputs)
        g_exc[post, pre] = np.where(s > 0, g, 0.0)
        g_inh[post, pre] = np.where(s < 0, g, 0.0)
    return ConfiguredNetwork(
        topology=tuple(cfg.topology),
        params=params,
        g_exc=g_exc,
        g_inh=g_inh,
        tau_ref=phys.targets.tau_ref,
        c_m=phys.targets.c_m,
        g_unit=cfg.g_unit,
        trial_seed=int(trial_seed) if isinstance(trial_seed, (int, np.integer)) else -1,
    )


# --- input encoding -----------------------------------------------------------


def encode_rates(pixels, nu_tot=NU_TOT):
    """Eq-style rate code: nu_p = c_p / sum(c) * nu_tot; blank image -> zeros."""
    if nu_tot <= 0:
        raise ConfigError("nu_tot must be > 0")
    p = np.asarray(pixels, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None]
    total = p.sum(axis=1, keepdims=True)
    rates = np.divide(p * nu_tot, total, out=np.zeros_like(p), where=total > 0)
    return rates[0] if single else rates


def make_spike_trains(rates, t_on=DEFAULT_T_ON, t_off=DEFAULT_T_OFF, seed=0):
    """Homogeneous Poisson train per input on [0, t_on); silent during t_off.

    Returns a list of sorted spike-time arrays (ms), deterministic per seed.
    """
    if t_on < 0 or t_off < 0:
        raise ConfigError("t_on and t_off must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    rates = np.asarray(rates, dtype=np.float64)
    counts = rng.poisson(rates * (t_on / 1000.0))
    total = int(counts.sum())
    times = rng.uniform(0.0, t_on, total) if t_on > 0 else np.empty(0)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [np.sort(times[bounds[i] : bounds[i + 1]]) for i in range(len(rates))]


# --- simulation ----------------------------------------------------------------


@dataclass
class RunRecord:
    """Spikes of all channels for a batch of sequentially presented samples.

    Per sample: (channel ids, spike times ms) sorted by time, times relative
    to that sample's presentation window [0, t_on + t_off).
    """

    t_on: float
    t_off: float
    dt: float
    topology: tuple
    samples: list
    u_min: np.ndarray = None  # per-neuron extrema, when bounds tracking is on
    u_max: np.ndarray = None

    @property
    def n_samples(self):
        return len(self.samples)

    def layers(self):
        return layer_map(self.topology)


def _bin_input_events(trains_chunk, n_inputs, dt, delay_steps, n_steps):
    """Flatten per-sample spike trains into step-sorted (step, sample, channel)."""
    steps, samps, chans = [], [], []
    for s, trains in enumerate(trains_chunk):
        if len(trains) != n_inputs:
            raise ConfigError(f"sample {s}: expected {n_inputs} input trains, got {len(trains)}")
        lens = [len(t) for t in trains]
        if sum(lens) == 0:
            continue
        ts = np.concatenate([np.asarray(t, dtype=np.float64) for t in trains])
        ch = np.repeat(np.arange(n_inputs, dtype=np.int32), lens)
        st = (ts / dt).astype(np.int64) + delay_steps
        keep = st < n_steps
        steps.append(st[keep])
        samps.append(np.full(int(keep.sum()), s, dtype=np.int32))
        chans.append(ch[keep])
    if not steps:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.astype(np.int32), empty.astype(np.int32)
    steps = np.concatenate(steps)
    samps = np.concatenate(samps)
    chans = np.concatenate(chans)
    order = np.argsort(steps, kind="stable")
    return steps[order], samps[order], chans[order]


def _simulate_chunk(net: ConfiguredNetwork, trains_chunk, t_on, t_off, dt, track_bounds,
                    counts_only=False, trace=False):
    n_s = len(trains_chunk)
    n_in = net.n_inputs
    n_neu = net.n_neurons
    n_steps = int(round((t_on + t_off) / dt))
    stim_steps = int(round(t_on / dt))
    delay_steps = max(1, int(round(net.delay_ms / dt)))
    refr_steps = max(0, int(np.ceil(net.tau_ref / dt - 1e-9)) - 1)

    p = net.params
    tau_syn = p["tau_syn"]
    g_l = net.c_m / p["tau_m"]
    dec = np.exp(-dt / tau_syn)
    mean_f = tau_syn * (1.0 - dec) / dt  # step-average of the decaying conductance
    gl_el = g_l * p["e_leak"]
    e_exc, e_inh, e_res, v_th = p["e_exc"], p["e_inh"], p["e_reset"], p["v_thresh"]
    # input channels arrive as sparse events; neuron spikes propagate densely
    # through the delay ring, which keeps the per-step cost rate-independent
    ge_in = np.ascontiguousarray(net.g_exc[:, :n_in].T)
    gi_in = np.ascontiguousarray(net.g_inh[:, :n_in].T)
    ge_nn = np.ascontiguousarray(net.g_exc[:, n_in:].T)
    gi_nn = np.ascontiguousarray(net.g_inh[:, n_in:].T)
    any_inh = bool(net.g_inh.any())

    ev_step, ev_samp, ev_chan = _bin_input_events(trains_chunk, n_in, dt, delay_steps, n_steps)
    ptrs = np.searchsorted(ev_step, np.arange(n_steps + 1))

    u = np.tile(p["e_leak"], (n_s, 1))
    g_e = np.zeros((n_s, n_neu))
    g_i = np.zeros((n_s, n_neu))
    refr = np.zeros((n_s, n_neu), dtype=np.int32)
    ring = [np.zeros((n_s, n_neu)) for _ in range(delay_steps)]
    ring_any = [False] * delay_steps
    counts = np.zeros((n_s, n_neu), dtype=np.int64) if counts_only else None
    rec_step, rec_samp, rec_neuron = [], [], []
    u_lo = np.full(n_neu, np.inf) if track_bounds else None
    u_hi = np.full(n_neu, -np.inf) if track_bounds else None
    us = np.empty((n_steps, n_s, n_neu)) if trace else None

    for k in range(n_steps):
        slot = k % delay_steps
        a, b = ptrs[k], ptrs[k + 1]
        if b > a:
            si = ev_samp[a:b]
            ci = ev_chan[a:b]
            np.add.at(g_e, si, ge_in[ci])
            if any_inh:
                np.add.at(g_i, si, gi_in[ci])
        if ring_any[slot]:
            delayed = ring[slot]
            g_e += delayed @ ge_nn
            if any_inh:
                g_i += delayed @ gi_nn

        ge_bar = g_e * mean_f
        gi_bar = g_i * mean_f
        g_tot = g_l + ge_bar + gi_bar
        u_inf = (gl_el + ge_bar * e_exc + gi_bar * e_inh) / g_tot
        u = u_inf + (u - u_inf) * np.exp(g_tot * (-dt / net.c_m))

        clamped = refr > 0
        if clamped.any():
            u = np.where(clamped, e_res, u)
            refr[clamped] -= 1
        fired = (u >= v_th) & ~clamped
        if track_bounds:
            np.minimum(u_lo, u.min(axis=0), out=u_lo)
            np.maximum(u_hi, u.max(axis=0), out=u_hi)
        fired_any = bool(fired.any())
        if fired_any:
            u = np.where(fired, e_res, u)
            if refr_steps:
                refr[fired] = refr_steps
            if counts_only:
                if k < stim_steps:
                    counts += fired
            else:
                fs, fn = np.nonzero(fired)
                rec_step.append(np.full(len(fs), k, dtype=np.int64))
                rec_samp.append(fs.astype(np.int32))
                rec_neuron.append(fn.astype(np.int32))
            np.copyto(ring[slot], fired)
        elif ring_any[slot]:
            ring[slot].fill(0.0)
        ring_any[slot] = fired_any
        if trace:
            us[k] = u
        g_e *= dec
        g_i *= dec

    if not np.isfinite(u).all():
        raise RuntimeFailure("non-finite membrane state (diagnostic; should be unreachable)")

    if counts_only:
        return counts, None, None, u_lo, u_hi
    if rec_step:
        ks = np.concatenate(rec_step)
        ss = np.concatenate(rec_samp)
        ns = np.concatenate(rec_neuron)
    else:
        ks = np.empty(0, np.int64)
        ss = np.empty(0, np.int32)
        ns = np.empty(0, np.int32)
    if trace:
        return ks, ss, ns, u_lo, u_hi, us
    return ks, ss, ns, u_lo, u_hi


def run(
    net: ConfiguredNetwork,
    samples,
    t_on=DEFAULT_T_ON,
    t_off=DEFAULT_T_OFF,
    dt=DEFAULT_DT,
    record_inputs=True,
    track_bounds=False,
    chunk_size=256,
    threads=1,
):
    """Present the encoded samples sequentially and record every spike.

    `samples` is a list of per-sample input spike-train lists (one sorted
    time array per input source).  Samples are independent — each starts
    from rest — so they are simulated in chunks, optionally in parallel;
    results do not depend on chunking or thread count.
    """
    if dt <= 0 or t_on < 0 or t_off < 0:
        raise ConfigError("invalid presentation timing")
    chunks = [samples[i : i + chunk_size] for i in range(0, len(samples), chunk_size)]

    def work(c):
        return _simulate_chunk(net, c, t_on, t_off, dt, track_bounds)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    n_in = net.n_inputs
    out_samples = []
    u_lo = np.full(net.n_neurons, np.inf)
    u_hi = np.full(net.n_neurons, -np.inf)
    for chunk, (ks, ss, ns, lo, hi) in zip(chunks, results):
        if track_bounds:
            np.minimum(u_lo, lo, out=u_lo)
            np.maximum(u_hi, hi, out=u_hi)
        times = (ks + 1) * dt
        ids = ns + n_in
        order = np.lexsort((ids, times, ss))
        ss_s, ids_s, t_s = ss[order], ids[order], times[order]
        bounds = np.searchsorted(ss_s, np.arange(len(chunk) + 1))
        for s in range(len(chunk)):
            sl = slice(bounds[s], bounds[s + 1])
            nid = ids_s[sl].astype(np.uint16)
            nt = t_s[sl]
            if record_inputs:
                trains = chunk[s]
                lens = [len(t) for t in trains]
                iid = np.repeat(np.arange(n_in, dtype=np.uint16), lens)
                it = (
                    np.concatenate([np.asarray(t, np.float64) for t in trains])
                    if sum(lens)
                    else np.empty(0)
                )
                nid = np.concatenate([iid, nid])
                nt = np.concatenate([it, nt])
                order2 = np.lexsort((nid, nt))
                nid, nt = nid[order2], nt[order2]
            out_samples.append((nid, nt))
    return RunRecord(
        t_on=t_on,
        t_off=t_off,
        dt=dt,
        topology=tuple(net.topology),
        samples=out_samples,
        u_min=u_lo if track_bounds else None,
        u_max=u_hi if track_bounds else None,
    )


def membrane_trace(net: ConfiguredNetwork, trains, t_on=DEFAULT_T_ON, t_off=DEFAULT_T_OFF,
                   dt=DEFAULT_DT):
    """Dense membrane record of one presented sample (bench diagnostic).

    Returns (times_ms, u) with u of shape (n_steps, n_neurons): each row is
    the state at the end of that integration step, so spike steps show the
    reset value.  Memory grows with n_steps * n_neurons; intended for short
    single-sample probes, not batch evaluation.
    """
    if dt <= 0 or t_on < 0 or t_off < 0:
        raise ConfigError("invalid presentation timing")
    _, _, _, _, _, us = _simulate_chunk(net, [trains], t_on, t_off, dt, False, trace=True)
    times = (np.arange(us.shape[0]) + 1) * dt
    return times, us[:, 0, :]


def measure_rates(
    net: ConfiguredNetwork,
    samples,
    t_on=DEFAULT_T_ON,
    t_off=DEFAULT_T_OFF,
    dt=DEFAULT_DT,
    layers=None,
    chunk_size=256,
    threads=1,
):
    """Stimulus-window firing rates (Hz) per layer without storing spikes.

    Runs the same integrator as run() but accumulates spike counts only, so
    the cost does not grow with firing rate.  Input-layer rates come from
    the injected trains themselves.
    """
    if dt <= 0 or t_on <= 0 or t_off < 0:
        raise ConfigError("invalid presentation timing")
    chunks = [samples[i : i + chunk_size] for i in range(0, len(samples), chunk_size)]

    def work(c):
        return _simulate_chunk(net, c, t_on, t_off, dt, False, counts_only=True)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    n_in = net.n_inputs
    counts = np.zeros((len(samples), n_in + net.n_neurons))
    row = 0
    for chunk, (c_neu, _, _, _, _) in zip(chunks, results):
        for s, trains in enumerate(chunk):
            counts[row + s, :n_in] = [len(tr) for tr in trains]
        counts[row : row + len(chunk), n_in:] = c_neu
        row += len(chunk)
    scale = 1000.0 / t_on
    lmap = layer_map(net.topology)
    wanted = [l for l in lmap if layers is None or l[0] in layers]
    return {name: counts[:, lo:hi] * scale for name, lo, hi in wanted}


def rates_from_record(rec: RunRecord, layers=None):
    """Per-sample, per-layer firing rates in Hz from the stimulus window.

    Counts spikes with t < t_on (+half a step of tolerance for the on-grid
    threshold crossings) and divides by t_on.
    """
    lmap = rec.layers()
    wanted = [l for l in lmap if layers is None or l[0] in layers]
    n_channels = lmap[-1][2]
    t_limit = rec.t_on + 0.5 * rec.dt
    counts = np.zeros((rec.n_samples, n_channels))
    for s, (ids, times) in enumerate(rec.samples):
        if len(ids):
            within = times < t_limit
            counts[s] = np.bincount(ids[within], minlength=n_channels)
    scale = 1000.0 / rec.t_on if rec.t_on > 0 else 0.0
    return {name: counts[:, lo:hi] * scale for name, lo, hi in wanted}


def classify_hw(label_rates, classes=(0, 1, 4, 6, 7)):
    """Highest-rate label neuron wins; ties go to the lowest class index."""
    r = np.atleast_2d(np.asarray(label_rates))
    picks = np.asarray(classes)[np.argmax(r, axis=1)]
    return picks[0] if np.asarray(label_rates).ndim == 1 else picks


def bio_to_hw_voltage(v, alpha=VOLT_ALPHA, shift=VOLT_SHIFT):
    """Map biological-domain mV onto the hardware voltage domain: v*alpha + shift."""
    return np.asarray(v, dtype=np.float64) * alpha + shift


def export_spikes(rec: RunRecord, fileobj):
    """Columnar spike export: neuron_id, spike_time_ms, sample_index."""
    fileobj.write("neuron_id,spike_time_ms,sample_index\r\n")
    for s, (ids, times) in enumerate(rec.samples):
        for i, t in zip(ids, times):
            fileobj.write(f"{int(i)},{t:.6f},{s}\r\n")
