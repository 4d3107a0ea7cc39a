"""Per-neuron calibration of the substrate's analog parameters.

Each parameter is swept over the DAC range; at every sweep point the neuron
is rewritten (drawing fresh trial noise) and the realized value is measured
through a bench that only uses physically available observables: membrane
samples in the diagnostic mode (spike comparator disabled), spike events,
and held diagnostic conductances.  An inverse curve DAC = f(value) is then
fitted per neuron so that targets can be translated into DAC words.

Measurement benches:

    e_leak    relaxation           settle with no input, read the membrane
    e_inh     reversal-solve       3 held inhibitory conductance levels,
                                   solve the steady-state hyperbola
    v_thresh  slow-crawl crossing  ramp the membrane slowly into the
                                   comparator; threshold bracketed by the
                                   last two samples
    e_exc     reversal-solve       as e_inh, on the excitatory channel
    e_reset   post-spike readout   force a spike, sample inside the
                                   refractory clamp
    tau_m     switch-off decay     charge, release, two timed samples plus
                                   an in-write baseline
    tau_syn   psp two-stage fit    single weak input spike; log-linear fit
                                   of the late tail, peel, fit the residual;
                                   the in-write tau_m disambiguates which
                                   time constant belongs to the synapse

Benches integrate with constant-conductance exponential-Euler steps, which
are exact, so long settles are done in a single step.
"""

from dataclasses import dataclass

import numpy as np

from . import dataset, seeds, substrate
from .errors import CalibrationError, RuntimeFailure
from .substrate import DAC_MAX, PARAM_NAMES, NeuronTargets, VariationSpec

BENCH_KINDS = {
    "e_leak": "relaxation",
    "e_inh": "reversal-solve (inhibitory hold)",
    "v_thresh": "slow-crawl crossing",
    "e_exc": "reversal-solve (excitatory hold)",
    "e_reset": "post-spike readout",
    "tau_m": "switch-off decay",
    "tau_syn": "psp two-stage fit",
}
# e_* and v_thresh benches need only rails; tau benches rely on the voltage
# parameters already sitting near their targets, hence this order.
CALIBRATION_ORDER = ("e_leak", "e_inh", "v_thresh", "e_exc", "e_reset", "tau_m", "tau_syn")

BENCH_DT = 0.02  # ms; fine-grained for crossing/readout benches
HOLD_LEVELS = (0.005, 0.02, 0.08)  # uS, held levels for reversal solves
CRAWL_G = 0.03  # uS excitatory hold for the threshold crawl
RESET_G = 0.05  # uS drive for the forced spike
CHARGE_G = 0.01  # uS drive for the tau_m charge phase
PSP_G = 1e-4  # uS probe jump; small keeps the psp in the linear regime


def _settle(par, u, g_e, g_i, t_ms):
    """Exact constant-conductance relaxation over t_ms (single step)."""
    g_l = par["c_m"] / par["tau_m"]
    g_tot = g_l + g_e + g_i
    u_inf = (g_l * par["e_leak"] + g_e * par["e_exc"] + g_i * par["e_inh"]) / g_tot
    return u_inf + (u - u_inf) * np.exp(g_tot * (-t_ms / par["c_m"]))


def _bench_params(realized, targets):
    par = dict(realized)
    par["c_m"] = targets.c_m
    par["tau_ref"] = targets.tau_ref
    return par


def _relax_leak(par):
    u = _settle(par, par["e_inh"].copy(), 0.0, 0.0, 2000.0)
    return u, np.zeros(u.shape, dtype=bool)


def _reversal_solve(par, channel):
    """Hold three conductance levels, solve a + g*E - u*g_l = u*g for E.

    Steady state obeys g_l*e_leak + g*E = u*(g_l + g); with unknowns
    (a, E, b) = (g_l*e_leak, E_rev, g_l) three levels pin E exactly.
    """
    n = len(par["e_leak"])
    us = []
    for g in HOLD_LEVELS:
        ge, gi = (g, 0.0) if channel == "exc" else (0.0, g)
        us.append(_settle(par, par["e_leak"].copy(), ge, gi, 3000.0))
    mat = np.empty((n, 3, 3))
    rhs = np.empty((n, 3))
    for k, (g, u) in enumerate(zip(HOLD_LEVELS, us)):
        mat[:, k, 0] = 1.0
        mat[:, k, 1] = g
        mat[:, k, 2] = -u
        rhs[:, k] = u * g
    rows = np.linalg.solve(mat, rhs[..., None])[..., 0]
    est = rows[:, 1]
    flag = ~np.isfinite(est)
    return np.where(flag, np.nan, est), flag


def _crawl_threshold(par, dt=BENCH_DT, t_max=400.0):
    """Ramp slowly into the comparator; estimate theta from the bracket.

    Returns the midpoint of [last subthreshold sample, its extrapolation one
    step further]; with a slow crawl the bracket is well under the trial
    noise floor.
    """
    n = len(par["e_leak"])
    u = _settle(par, par["e_leak"].copy(), 0.0, 0.5, 2000.0)  # pin near e_inh
    g_l = par["c_m"] / par["tau_m"]
    g_tot = g_l + CRAWL_G
    u_inf = (g_l * par["e_leak"] + CRAWL_G * par["e_exc"]) / g_tot
    lam = np.exp(g_tot * (-dt / par["c_m"]))
    theta = np.full(n, np.nan)
    crossed = np.zeros(n, dtype=bool)
    u_prev = u.copy()
    inc = np.zeros(n)
    for _ in range(int(t_max / dt)):
        u_new = u_inf + (u - u_inf) * lam
        fired = (u_new >= par["v_thresh"]) & ~crossed
        if fired.any():
            theta[fired] = u[fired] + 0.5 * inc[fired]
            crossed |= fired
        inc = u_new - u
        u = u_new
        if crossed.all():
            break
    return theta, ~crossed


def _forced_reset(par, dt=BENCH_DT, t_max=400.0):
    """Drive a spike; the sample right after reset sits inside the clamp."""
    n = len(par["e_leak"])
    u = par["e_leak"].copy()
    g_l = par["c_m"] / par["tau_m"]
    g_tot = g_l + RESET_G
    u_inf = (g_l * par["e_leak"] + RESET_G * par["e_exc"]) / g_tot
    lam = np.exp(g_tot * (-dt / par["c_m"]))
    val = np.full(n, np.nan)
    done = np.zeros(n, dtype=bool)
    for _ in range(int(t_max / dt)):
        u = u_inf + (u - u_inf) * lam
        fired = (u >= par["v_thresh"]) & ~done
        if fired.any():
            u = np.where(fired, par["e_reset"], u)
            val[fired] = u[fired]
            done |= fired
        if done.all():
            break
    return val, ~done


def _tau_m_inwrite(par, t1=5.0, t2=25.0):
    """Charge, switch off, sample twice, subtract the in-write baseline."""
    u1 = _settle(par, par["e_leak"].copy(), CHARGE_G, 0.0, 3000.0)
    ua = _settle(par, u1, 0.0, 0.0, t1)
    ub = _settle(par, u1, 0.0, 0.0, t1 + (t2 - t1))
    base = _settle(par, u1, 0.0, 0.0, 4000.0)
    num = ua - base
    den = ub - base
    good = (num > 0) & (den > 0) & (num > den)
    ratio = np.where(good, num / np.where(den > 0, den, 1.0), np.nan)
    tau = (t2 - t1) / np.log(ratio)
    flag = ~good | ~np.isfinite(tau)
    return np.where(flag, np.nan, tau), flag


def _masked_line_fit(x, y_log, mask):
    """Per-column least-squares line fit of y_log against x where mask."""
    w = mask.astype(np.float64)
    sw = w.sum(axis=0)
    sx = (w * x[:, None]).sum(axis=0)
    sy = (w * y_log).sum(axis=0)
    sxx = (w * x[:, None] ** 2).sum(axis=0)
    sxy = (w * x[:, None] * y_log).sum(axis=0)
    det = sw * sxx - sx * sx
    ok = (sw >= 8) & (det > 0)
    slope = np.where(ok, (sw * sxy - sx * sy) / np.where(det > 0, det, 1.0), np.nan)
    icept = np.where(ok, (sy - slope * sx) / np.where(sw > 0, sw, 1.0), np.nan)
    return slope, icept, ~ok


def _log_fit(x, delta, mask):
    y = np.log(np.where(mask, np.maximum(delta, 1e-300), 1.0))
    return _masked_line_fit(x, y, mask)


def _psp_tau_syn(par, dt=BENCH_DT, t_total=300.0):
    """Single-spike psp decomposition into its two time constants."""
    n = len(par["e_leak"])
    n_steps = int(t_total / dt)
    g_l = par["c_m"] / par["tau_m"]
    gl_el = g_l * par["e_leak"]
    dec = np.exp(-dt / par["tau_syn"])
    mean_f = par["tau_syn"] * (1.0 - dec) / dt
    base = par["e_leak"].copy()
    u = base.copy()
    g = np.full(n, PSP_G)
    trace = np.empty((n_steps, n))
    for k in range(n_steps):
        ge_bar = g * mean_f
        g_tot = g_l + ge_bar
        u_inf = (gl_el + ge_bar * par["e_exc"]) / g_tot
        u = u_inf + (u - u_inf) * np.exp(g_tot * (-dt / par["c_m"]))
        trace[k] = u
        g *= dec
    delta = trace - base
    t = (np.arange(n_steps) + 1) * dt

    peak = delta.max(axis=0)
    k_peak = delta.argmax(axis=0)
    t_peak = t[k_peak]
    usable = peak > 0
    valid = (delta > peak * 1e-8) & (t[:, None] > t_peak)
    t_last = np.where(valid, t[:, None], 0.0).max(axis=0)
    tail = valid & (t[:, None] >= t_peak + 0.55 * (t_last - t_peak))
    slope, icept, f1 = _log_fit(t, delta, tail)
    tau_slow = -1.0 / slope
    amp = np.exp(icept)

    resid = amp * np.exp(np.outer(t, -1.0 / np.where(tau_slow > 0, tau_slow, 1.0))) - delta
    early = (resid > peak * 1e-5) & (t[:, None] < t_peak + 0.55 * (t_last - t_peak))
    slope2, _, f2 = _log_fit(t, resid, early)
    tau_fast = -1.0 / slope2

    # one refinement: refit the tail where the fast component has died out
    with np.errstate(divide="ignore", invalid="ignore"):
        rate_gap = 1.0 / tau_fast - 1.0 / tau_slow
        t_clean = t_peak + np.where(rate_gap > 0, np.log(1e4) / rate_gap, 0.0)
    tail2 = valid & (t[:, None] >= t_clean)
    slope, icept, f1b = _log_fit(t, delta, tail2)
    better = ~f1b & np.isfinite(slope) & (slope < 0)
    tau_slow = np.where(better, -1.0 / slope, tau_slow)
    amp = np.where(better, np.exp(icept), amp)
    resid = amp * np.exp(np.outer(t, -1.0 / np.where(tau_slow > 0, tau_slow, 1.0))) - delta
    early = (resid > peak * 1e-5) & (t[:, None] < t_peak + 0.55 * (t_last - t_peak))
    slope2, _, f2b = _log_fit(t, resid, early)
    tau_fast = np.where(~f2b & (slope2 < 0), -1.0 / slope2, tau_fast)

    tau_m_hat, fm = _tau_m_inwrite(par)
    pick_fast = np.abs(tau_slow - tau_m_hat) <= np.abs(tau_fast - tau_m_hat)
    est = np.where(pick_fast, tau_fast, tau_slow)
    flag = ~usable | f1 | f2 | fm | ~np.isfinite(est) | (est <= 0)
    return np.where(flag, np.nan, est), flag


_BENCHES = {
    "e_leak": _relax_leak,
    "e_inh": lambda par: _reversal_solve(par, "inh"),
    "v_thresh": _crawl_threshold,
    "e_exc": lambda par: _reversal_solve(par, "exc"),
    "e_reset": _forced_reset,
    "tau_m": _tau_m_inwrite,
    "tau_syn": _psp_tau_syn,
}


def sweep_dacs(n_points=8):
    return np.round(np.linspace(0, DAC_MAX, n_points)).astype(np.uint16)


def measure_parameter(
    phys,
    param,
    companion_dacs,
    master_seed,
    n_points=8,
    repeats=5,
    targets=NeuronTargets(),
    variation=VariationSpec(),
):
    """Sweep one parameter's DAC and measure the realized value per neuron.

    Each (point, repeat) is a fresh full write: companion parameters stay at
    companion_dacs, the swept parameter moves to the sweep point, and new
    trial noise is drawn.  Unmeasurable points come back as NaN.
    Returns (sweep_points, measured[n, n_points, repeats]).
    """
    p_idx = PARAM_NAMES.index(param)
    bench = _BENCHES[param]
    points = sweep_dacs(n_points)
    n = companion_dacs.shape[0]
    measured = np.full((n, n_points, repeats), np.nan)
    for k, dac in enumerate(points):
        dacs = companion_dacs.copy()
        dacs[:, p_idx] = dac
        for r in range(repeats):
            rng = np.random.Generator(
                np.random.PCG64(seeds.sequence(master_seed, seeds.CALIB_TRIAL, p_idx, k, r))
            )
            realized = substrate.realize_params(phys, dacs, rng, variation)
            par = _bench_params(realized, targets)
            est, flag = bench(par)
            measured[:, k, r] = np.where(flag, np.nan, est)
    return points, measured


def fit_curve(points, measured, param="parameter"):
    """Fit per-neuron inverse curves DAC = f(value) from sweep measurements.

    Quadratic by default; if the rms residual exceeds 5% of the DAC span the
    neuron falls back to a cubic.  Returns (coeffs[n, 4] highest power first,
    degrees[n]).  A neuron with fewer than 4 usable sweep points cannot be
    fitted and raises CalibrationError.
    """
    n, n_points, repeats = measured.shape
    dac_rep = np.repeat(points.astype(np.float64), repeats)
    coeffs = np.zeros((n, 4))
    degrees = np.zeros(n, dtype=np.int64)
    max_resid = 0.05 * DAC_MAX
    for i in range(n):
        vals = measured[i].reshape(-1)
        ok = np.isfinite(vals)
        n_pts = int(np.isfinite(measured[i]).any(axis=1).sum())
        if n_pts < 4:
            raise CalibrationError(
                f"insufficient measurements: {param} on neuron {i} has "
                f"{n_pts} usable sweep points (need at least 4)"
            )
        x = vals[ok]
        y = dac_rep[ok]
        c2 = np.polyfit(x, y, 2)
        resid = np.sqrt(np.mean((np.polyval(c2, x) - y) ** 2))
        if resid > max_resid:
            coeffs[i] = np.polyfit(x, y, 3)
            degrees[i] = 3
        else:
            coeffs[i, 1:] = c2
            degrees[i] = 2
    return coeffs, degrees


def dac_for(coeffs, value):
    """Evaluate inverse curves at a target value -> DAC words (rounded, clipped)."""
    coeffs = np.atleast_2d(coeffs)
    v = float(value)
    out = ((coeffs[:, 0] * v + coeffs[:, 1]) * v + coeffs[:, 2]) * v + coeffs[:, 3]
    return np.clip(np.round(out), 0, DAC_MAX).astype(np.uint16)


@dataclass
class CalibrationStore:
    """Calibration products: sweeps, measurements, inverse-curve coefficients."""

    n_neurons: int
    fab_seed: int
    master_seed: int
    points: np.ndarray  # (n_points,) shared sweep DAC grid
    measured: np.ndarray  # (n, 7, n_points, repeats), NaN = unusable
    coeffs: np.ndarray  # (n, 7, 4) highest power first
    degrees: np.ndarray  # (n, 7)
    kinds: tuple = tuple(BENCH_KINDS[p] for p in PARAM_NAMES)

    def dacs_for(self, targets: NeuronTargets):
        """DAC matrix realizing the targets on every calibrated neuron."""
        dacs = np.empty((self.n_neurons, len(PARAM_NAMES)), dtype=np.uint16)
        for j, p in enumerate(PARAM_NAMES):
            dacs[:, j] = dac_for(self.coeffs[:, j], getattr(targets, p))
        return dacs

    def flagged_fraction(self):
        return {
            p: float(np.isnan(self.measured[:, j]).mean())
            for j, p in enumerate(PARAM_NAMES)
        }

    def to_mapping(self):
        return {
            "n_neurons": self.n_neurons,
            "fab_seed": self.fab_seed,
            "master_seed": self.master_seed,
            "points": self.points,
            "measured": self.measured,
            "coeffs": self.coeffs,
            "degrees": self.degrees,
            "kinds": ";".join(self.kinds),
        }

    @classmethod
    def from_mapping(cls, m):
        return cls(
            n_neurons=int(m["n_neurons"]),
            fab_seed=int(m["fab_seed"]),
            master_seed=int(m["master_seed"]),
            points=m["points"],
            measured=m["measured"],
            coeffs=m["coeffs"],
            degrees=m["degrees"],
            kinds=tuple(m["kinds"].split(";")),
        )


def calibrate_all(
    phys,
    master_seed,
    n_points=8,
    repeats=5,
    targets=NeuronTargets(),
    variation=VariationSpec(),
):
    """Calibrate every parameter of every neuron on the substrate.

    Parameters are processed in CALIBRATION_ORDER; once a parameter is
    fitted, later benches run with its DAC already at the target, so each
    bench sees progressively saner companions.
    """
    n = phys.n_neurons
    companions = np.full((n, len(PARAM_NAMES)), (DAC_MAX + 1) // 2, dtype=np.uint16)
    measured_all = np.full((n, len(PARAM_NAMES), n_points, repeats), np.nan)
    coeffs_all = np.zeros((n, len(PARAM_NAMES), 4))
    degrees_all = np.zeros((n, len(PARAM_NAMES)), dtype=np.int64)
    points = sweep_dacs(n_points)
    for param in CALIBRATION_ORDER:
        j = PARAM_NAMES.index(param)
        pts, measured = measure_parameter(
            phys, param, companions, master_seed,
            n_points=n_points, repeats=repeats, targets=targets, variation=variation,
        )
        coeffs, degrees = fit_curve(pts, measured, param=param)
        measured_all[:, j] = measured
        coeffs_all[:, j] = coeffs
        degrees_all[:, j] = degrees
        companions[:, j] = dac_for(coeffs, getattr(targets, param))
    return CalibrationStore(
        n_neurons=n,
        fab_seed=phys.fab_seed,
        master_seed=master_seed,
        points=points,
        measured=measured_all,
        coeffs=coeffs_all,
        degrees=degrees_all,
    )


def spread_report(phys, store, master_seed, n_trials=3,
                  targets=NeuronTargets(), variation=VariationSpec()):
    """Observable parameter spread before vs after calibration.

    'raw' is the relative standard deviation of measured values across
    neurons and trials with every DAC at midscale; 'calibrated' is the same
    statistic with the fitted DAC words applied.  Both include trial noise,
    matching what a user of the substrate actually experiences.
    """
    mid = np.full((phys.n_neurons, len(PARAM_NAMES)), (DAC_MAX + 1) // 2, dtype=np.uint16)
    cal = store.dacs_for(targets)
    report = {}
    samples = {"raw": [], "calibrated": []}
    for t in range(n_trials):
        for label, dacs in (("raw", mid), ("calibrated", cal)):
            rng = np.random.Generator(
                np.random.PCG64(
                    seeds.sequence(master_seed, seeds.SPREAD_TRIAL, 0 if label == "raw" else 1, t)
                )
            )
            par = substrate.realize_params(phys, dacs, rng, variation)
            samples[label].append(np.stack([par[p] for p in PARAM_NAMES], axis=1))
    tgt = targets.as_array()
    scale = np.where(tgt == 0.0, np.abs(substrate.base_ranges(targets)["e_exc"][1]), np.abs(tgt))
    for j, p in enumerate(PARAM_NAMES):
        row = {}
        for label in ("raw", "calibrated"):
            vals = np.concatenate([s[:, j] for s in samples[label]])
            row[label] = float(np.sqrt(np.mean(((vals - tgt[j]) / scale[j]) ** 2)))
        row["ratio"] = row["calibrated"] / row["raw"] if row["raw"] > 0 else float("nan")
        report[p] = row
    return report


def tune_g_unit(
    phys,
    cfg,
    pixels,
    labels,
    master_seed,
    rate_band=(10.0, 60.0),
    bounds=(0.01, 50.0),
    n_probe=50,
    classes=dataset.REDUCED_CLASSES,
    t_on=substrate.DEFAULT_T_ON,
    t_off=substrate.DEFAULT_T_OFF,
    max_iter=20,
    variation=VariationSpec(),
    threads=1,
):
    """Bisect the global synaptic unit until the label layer speaks clearly.

    For each probe sample the monitored quantity is the firing rate of the
    label neuron belonging to that sample's class (the one neuron that is
    supposed to respond); the tuned statistic is the median of that rate over
    the probe samples.  The search bisects geometrically inside bounds
    (conductance acts multiplicatively) and stops at the first g_unit whose
    statistic lands inside rate_band, so it settles near the band's middle
    rather than at an edge.  Raises RuntimeFailure if the band cannot be
    reached inside bounds.
    """
    from dataclasses import replace as _replace

    pix = pixels[:n_probe]
    cls = dataset.class_index(np.asarray(labels[:n_probe]), classes)
    rates = substrate.encode_rates(pix)
    trains = [
        substrate.make_spike_trains(
            r, t_on=t_on, t_off=t_off, seed=seeds.sequence(master_seed, seeds.TUNE_G_UNIT, 0, i)
        )
        for i, r in enumerate(rates)
    ]

    def signal_rate(g_unit, it):
        trial = seeds.sequence(master_seed, seeds.TUNE_G_UNIT, 1, it)
        net = substrate.configure(phys, _replace(cfg, g_unit=float(g_unit)), trial, variation)
        label = substrate.measure_rates(
            net, trains, t_on=t_on, t_off=t_off, layers=("label",), threads=threads
        )["label"]
        return float(np.median(label[np.arange(len(cls)), cls]))

    lo, hi = bounds
    r_lo = signal_rate(lo, 0)
    if r_lo > rate_band[1]:
        raise RuntimeFailure(
            f"unreachable target: signal rate is already {r_lo:.2f} Hz at the "
            f"lower g_unit bound {lo}, above the band {rate_band}"
        )
    r_hi = signal_rate(hi, 1)
    if r_hi < rate_band[0]:
        raise RuntimeFailure(
            f"unreachable target: signal rate is only {r_hi:.2f} Hz at the "
            f"upper g_unit bound {hi}, below the band {rate_band}"
        )
    for it in range(2, max_iter + 2):
        mid = np.sqrt(lo * hi)
        r_mid = signal_rate(mid, it)
        if rate_band[0] <= r_mid <= rate_band[1]:
            return float(mid), r_mid
        if r_mid < rate_band[0]:
            lo = mid
        else:
            hi = mid
    raise RuntimeFailure(
        f"unreachable target: g_unit bisection did not converge in {max_iter} iterations"
    )
