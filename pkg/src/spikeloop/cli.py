"""Command-line pipeline: prepare data, train, calibrate, convert, retrain in the loop.

One master seed drives every random stream (see seeds module); each command
re-derives exactly the streams it needs, so phases can be re-run independently
and reruns produce byte-identical outputs.  Configuration comes from an INI
file whose sections match the module names; any unknown section or key is a
hard error.  Exit codes: 0 success, 1 configuration error, 2 data error,
3 runtime failure.
"""

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import calibration, containers, dataset, loop_trainer, relu_net, seeds, substrate
from .errors import ConfigError, DataError, SpikeloopError

EXPECTED_COUNTS = {dataset.REDUCED_CLASSES: (30690, 5083)}

# --- configuration schema -----------------------------------------------------


def _s(v):
    return v


def _i(v):
    return int(v)


def _f(v):
    return float(v)


def _b(v):
    if isinstance(v, bool):
        return v
    lv = v.strip().lower()
    if lv in ("1", "true", "yes", "on"):
        return True
    if lv in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_i(v):
    return None if v == "" else int(v)


def _opt_f(v):
    return None if v == "" else float(v)


def _opt_s(v):
    return None if v == "" else v


def _int_list(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in v.replace(",", " ").split()]


# section -> key -> (parser, default-as-string)
SCHEMA = {
    "dataset": {
        "mnist_dir": (_s, "data/mnist"),
        "cache": (_opt_s, ""),  # blank: <out_dir>/reduced.bin
        "classes": (_int_list, "0,1,4,6,7"),
    },
    "relu_net": {
        "eta": (_f, "0.05"),
        "gamma": (_f, "0.9"),
        "lam": (_f, "0.001"),
        "batch_size": (_i, "100"),
        "steps": (_i, "15000"),
        "topology": (_int_list, "100,15,15,5"),
    },
    "substrate": {
        "n_neurons": (_i, "35"),
        "fab_seed": (_opt_i, ""),  # blank: use the master seed
        "raw_spread": (_f, "0.30"),
        "trial_spread_scale": (_f, "1.0"),
        "g_unit": (_opt_f, ""),  # blank: tune automatically at conversion
        "t_on": (_f, "900"),
        "t_off": (_f, "100"),
        "dt": (_f, "0.1"),
    },
    "calibration": {
        "n_points": (_i, "8"),
        "repeats": (_i, "5"),
        "probe_samples": (_i, "50"),
        "rate_low": (_f, "10"),
        "rate_high": (_f, "60"),
        "report_trials": (_i, "3"),
    },
    "loop_trainer": {
        "eta": (_f, "0.05"),
        "gamma": (_f, "0.0"),
        "lam": (_f, "0.001"),
        "batch_size": (_i, "1200"),
        "iterations": (_i, "40"),
        "rate_divisor": (_f, "30"),
        "t_on": (_f, "900"),
        "t_off": (_f, "100"),
        "dt": (_f, "0.1"),
        "eval_size": (_i, "1000"),
    },
    "cli": {
        "out_dir": (_s, "runs/latest"),
        "master_seeds": (_int_list, "0"),
        "threads": (_i, "1"),
        "skip_itl": (_b, "false"),
        "per_class": (_i, "5"),
    },
}


def default_config():
    return {
        sec: {key: parse(default) for key, (parse, default) in keys.items()}
        for sec, keys in SCHEMA.items()
    }


def load_config(path):
    """Resolve defaults + INI file; unknown sections or keys are errors."""
    cfg = default_config()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    ini = configparser.ConfigParser(interpolation=None)
    try:
        read = ini.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    if not read:
        raise ConfigError(f"config file not readable: {path}")
    for sec in ini.sections():
        if sec not in SCHEMA:
            raise ConfigError(
                f"{path}: unknown section [{sec}] (known: {', '.join(sorted(SCHEMA))})"
            )
        for key, raw in ini.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(
                    f"{path}: unknown key '{key}' in [{sec}] "
                    f"(known: {', '.join(sorted(SCHEMA[sec]))})"
                )
            parse, _ = SCHEMA[sec][key]
            try:
                cfg[sec][key] = parse(raw)
            except ValueError as e:
                raise ConfigError(f"{path}: [{sec}] {key} = {raw!r}: {e}") from e
    return cfg


def apply_overrides(cfg, args):
    """Command-line flags take precedence over the config file."""
    if getattr(args, "out", None) is not None:
        cfg["cli"]["out_dir"] = args.out
    if getattr(args, "threads", None) is not None:
        cfg["cli"]["threads"] = args.threads
    if getattr(args, "master_seed", None) is not None:
        cfg["cli"]["master_seeds"] = [args.master_seed]
    if getattr(args, "seeds", None) is not None:
        try:
            cfg["cli"]["master_seeds"] = _int_list(args.seeds)
        except ValueError as e:
            raise ConfigError(f"--seeds {args.seeds!r}: {e}") from e
    if getattr(args, "classes", None) is not None:
        try:
            cfg["dataset"]["classes"] = _int_list(args.classes)
        except ValueError as e:
            raise ConfigError(f"--classes {args.classes!r}: {e}") from e
    if getattr(args, "g_unit", None) is not None:
        cfg["substrate"]["g_unit"] = args.g_unit
    if getattr(args, "skip_itl", False):
        cfg["cli"]["skip_itl"] = True
    if getattr(args, "per_class", None) is not None:
        cfg["cli"]["per_class"] = args.per_class
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    relu_net.HyperParams(
        eta=cfg["relu_net"]["eta"],
        gamma=cfg["relu_net"]["gamma"],
        lam=cfg["relu_net"]["lam"],
        batch_size=cfg["relu_net"]["batch_size"],
        steps=cfg["relu_net"]["steps"],
    ).validate()
    itl_config(cfg).validate()
    relu_net.check_topology(cfg["relu_net"]["topology"])
    sub = cfg["substrate"]
    if sub["n_neurons"] < sum(cfg["relu_net"]["topology"][1:]):
        raise ConfigError(
            f"substrate n_neurons {sub['n_neurons']} cannot host topology "
            f"{tuple(cfg['relu_net']['topology'])}"
        )
    if sub["t_on"] <= 0 or sub["t_off"] < 0 or sub["dt"] <= 0:
        raise ConfigError("substrate timing must satisfy t_on > 0, t_off >= 0, dt > 0")
    if sub["raw_spread"] < 0 or sub["trial_spread_scale"] < 0:
        raise ConfigError("spreads must be non-negative")
    if sub["g_unit"] is not None and sub["g_unit"] <= 0:
        raise ConfigError("g_unit must be positive when given")
    cal = cfg["calibration"]
    if not 0 < cal["rate_low"] < cal["rate_high"]:
        raise ConfigError("calibration rate band must satisfy 0 < rate_low < rate_high")
    if cal["n_points"] < 4 or cal["repeats"] < 1 or cal["probe_samples"] < 1:
        raise ConfigError("calibration needs n_points >= 4, repeats >= 1, probe_samples >= 1")
    if cfg["cli"]["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    if cfg["cli"]["per_class"] < 0:
        raise ConfigError("per_class must be >= 0")
    if not cfg["cli"]["master_seeds"]:
        raise ConfigError("at least one master seed is required")
    if len(cfg["dataset"]["classes"]) < 2:
        raise ConfigError("need at least two classes")
    if len(set(cfg["dataset"]["classes"])) != len(cfg["dataset"]["classes"]):
        raise ConfigError("classes must be distinct")


# --- derived objects ------------------------------------------------------------


def hyper_params(cfg):
    r = cfg["relu_net"]
    return relu_net.HyperParams(
        eta=r["eta"], gamma=r["gamma"], lam=r["lam"],
        batch_size=r["batch_size"], steps=r["steps"],
    )


def itl_config(cfg):
    t = cfg["loop_trainer"]
    return loop_trainer.ITLConfig(
        eta=t["eta"], gamma=t["gamma"], lam=t["lam"],
        batch_size=t["batch_size"], iterations=t["iterations"],
        rate_divisor=t["rate_divisor"], t_on=t["t_on"], t_off=t["t_off"],
        dt=t["dt"], eval_size=t["eval_size"],
    )


def variation_spec(cfg):
    scale = cfg["substrate"]["trial_spread_scale"]
    base = substrate.VariationSpec()
    return substrate.VariationSpec(
        **{f.name: getattr(base, f.name) * scale for f in dataclasses.fields(base)}
    )


def cache_path(cfg):
    c = cfg["dataset"]["cache"]
    return c if c is not None else os.path.join(cfg["cli"]["out_dir"], "reduced.bin")


def load_split(cfg):
    path = cache_path(cfg)
    if not os.path.exists(path):
        raise DataError(f"reduced dataset cache not found: {path} (run 'prepare' first)")
    return dataset.load_reduced(path)


def seed_dir(cfg, master_seed):
    d = os.path.join(cfg["cli"]["out_dir"], f"seed{master_seed}")
    os.makedirs(d, exist_ok=True)
    return d


# --- manifest -------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_as_strings(cfg):
    out = {}
    for sec, keys in cfg.items():
        out[sec] = {}
        for key, value in keys.items():
            if isinstance(value, list):
                out[sec][key] = ",".join(str(v) for v in value)
            else:
                out[sec][key] = "" if value is None else str(value)
    return out


def write_manifest(cfg, command, inputs, outputs):
    """Per-command manifest: resolved config plus sha256 of inputs/outputs."""
    out_dir = cfg["cli"]["out_dir"]
    manifest = {
        "command": command,
        "config": config_as_strings(cfg),
        "inputs": {os.path.relpath(p, out_dir) if p.startswith(out_dir) else p: _sha256(p)
                   for p in sorted(set(inputs)) if os.path.exists(p)},
        "outputs": {os.path.relpath(p, out_dir): _sha256(p) for p in sorted(set(outputs))},
    }
    path = os.path.join(out_dir, f"manifest-{command}.json")
    with open(path, "w", newline="") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# --- phase helpers (shared by the individual commands and cmd_pipeline) ---------


def checkpoint_path(cfg, ms, name):
    return os.path.join(seed_dir(cfg, ms), name)


def phase_train_sw(cfg, split, ms):
    sw = relu_net.train_software(
        split, hyper_params(cfg), ms, topology=tuple(cfg["relu_net"]["topology"])
    )
    acc = relu_net.accuracy(sw.weights, split.test_pixels, split.test_labels)
    path = checkpoint_path(cfg, ms, "software.bin")
    containers.save_checkpoint(path, sw)
    print(f"[seed {ms}] software model: test accuracy {acc:.4f} -> {path}")
    return sw, acc, [path]


def phase_calibrate(cfg, ms):
    sub = cfg["substrate"]
    fab_seed = sub["fab_seed"] if sub["fab_seed"] is not None else ms
    phys = substrate.fabricate(sub["n_neurons"], fab_seed, raw_spread=sub["raw_spread"])
    store = calibration.calibrate_all(
        phys, ms,
        n_points=cfg["calibration"]["n_points"],
        repeats=cfg["calibration"]["repeats"],
        variation=variation_spec(cfg),
    )
    path = checkpoint_path(cfg, ms, "calibration.bin")
    containers.write_container(path, [(containers.TAG_CALIBRATION, store.to_mapping())])
    flagged = store.flagged_fraction()
    worst = max(flagged, key=flagged.get)
    print(
        f"[seed {ms}] calibrated {store.n_neurons} neurons (fab seed {fab_seed}); "
        f"worst flagged fraction {flagged[worst]:.3f} ({worst}) -> {path}"
    )
    return phys, store, [path]


def rebuild_physiology(cfg, ms, store):
    sub = cfg["substrate"]
    fab_seed = sub["fab_seed"] if sub["fab_seed"] is not None else ms
    if store.fab_seed != fab_seed:
        raise ConfigError(
            f"calibration store fab seed {store.fab_seed} does not match "
            f"configured fab seed {fab_seed}"
        )
    return substrate.fabricate(sub["n_neurons"], fab_seed, raw_spread=sub["raw_spread"])


def load_store(cfg, ms):
    path = checkpoint_path(cfg, ms, "calibration.bin")
    if not os.path.exists(path):
        raise DataError(f"calibration store not found: {path} (run 'calibrate' first)")
    sections = containers.read_container(path)
    if containers.TAG_CALIBRATION not in sections:
        raise DataError(f"{path}: no calibration section")
    return calibration.CalibrationStore.from_mapping(sections[containers.TAG_CALIBRATION])


def phase_convert(cfg, split, sw, phys, store, ms):
    sub = cfg["substrate"]
    variation = variation_spec(cfg)
    threads = cfg["cli"]["threads"]
    tune_pixels = tune_labels = None
    if sub["g_unit"] is None:
        rng = seeds.generator(ms, seeds.TUNE_G_UNIT, 2)
        pick = rng.choice(
            split.n_train, size=min(cfg["calibration"]["probe_samples"], split.n_train),
            replace=False,
        )
        tune_pixels = split.train_pixels[pick]
        tune_labels = split.train_labels[pick]
    hw_cfg = loop_trainer.convert(
        sw, phys, store, ms,
        g_unit=sub["g_unit"], tune_pixels=tune_pixels, tune_labels=tune_labels,
        variation=variation, threads=threads,
    )
    idx = loop_trainer.eval_subset_indices(split, ms, cfg["loop_trainer"]["eval_size"])
    acc, _ = loop_trainer.eval_hw(
        phys, hw_cfg, split.test_pixels[idx], split.test_labels[idx], ms,
        classes=split.classes, t_on=sub["t_on"], t_off=sub["t_off"], dt=sub["dt"],
        variation=variation, threads=threads,
    )
    path = checkpoint_path(cfg, ms, "converted.bin")
    containers.save_checkpoint(path, sw, containers.hardware_to_mapping(hw_cfg))
    print(
        f"[seed {ms}] converted with g_unit {hw_cfg.g_unit:.4f} nS/step; "
        f"substrate accuracy {acc:.4f} on {len(idx)} test images -> {path}"
    )
    return hw_cfg, acc, [path]


def phase_itl(cfg, split, sw, phys, store, hw_cfg, ms):
    threads = cfg["cli"]["threads"]
    res = loop_trainer.train_itl(
        phys, hw_cfg, sw, split, itl_config(cfg), ms,
        variation=variation_spec(cfg), threads=threads,
        progress=lambda it, b, te, r: print(
            f"[seed {ms}] iteration {it:>3}: batch accuracy {b:.4f}, "
            f"test-subset accuracy {te:.4f}, mean label rate {r:.1f} Hz"
        ),
    )
    sd = seed_dir(cfg, ms)
    metrics_path = os.path.join(sd, "itl_metrics.csv")
    with open(metrics_path, "w", newline="") as f:
        loop_trainer.write_metrics(f, res)
    migration = loop_trainer.weight_migration(hw_cfg, res.cfg)
    migration_path = os.path.join(sd, "migration.csv")
    with open(migration_path, "w", newline="") as f:
        f.write("level_before,level_after,count\r\n")
        for i in range(31):
            for j in range(31):
                c = int(migration.combined[i, j])
                if c:
                    f.write(f"{i - 15},{j - 15},{c}\r\n")
    final = relu_net.SoftwareTrainResult(
        weights=res.weights, velocity=res.velocity, steps=sw.steps,
        master_seed=ms, topology=sw.topology,
        batch_accuracy=res.batch_accuracy, classes=sw.classes,
    )
    final_path = os.path.join(sd, "final.bin")
    containers.save_checkpoint(final_path, final, containers.hardware_to_mapping(res.cfg))
    acc = float(res.test_accuracy_subset[-1])
    print(
        f"[seed {ms}] in-the-loop done: final test-subset accuracy {acc:.4f}; "
        f"{migration.fraction_within_2 * 100:.1f}% of synapse pairs moved "
        f"<= 2 steps -> {final_path}"
    )
    return res, acc, [metrics_path, migration_path, final_path]


# --- commands --------------------------------------------------------------------


def cmd_prepare(cfg, args):
    d = cfg["dataset"]
    names = (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    )

    def find(base):
        for suffix in (".gz", ""):
            p = os.path.join(d["mnist_dir"], base + suffix)
            if os.path.exists(p):
                return p
        raise DataError(f"MNIST file not found: {os.path.join(d['mnist_dir'], base)}[.gz]")

    paths = [find(b) for pair in names for b in pair]
    split = dataset.reduce_dataset(
        dataset.load_idx(paths[0], paths[1]),
        dataset.load_idx(paths[2], paths[3]),
        classes=d["classes"],
    )
    expected = EXPECTED_COUNTS.get(split.classes)
    print(
        f"classes {','.join(str(c) for c in split.classes)}: "
        f"{split.n_train} training / {split.n_test} test images"
    )
    if expected is not None and (split.n_train, split.n_test) != expected:
        raise DataError(
            f"reduced split counts {split.n_train}/{split.n_test} do not match "
            f"the expected {expected[0]}/{expected[1]}"
        )
    path = cache_path(cfg)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    dataset.save_reduced(split, path)
    print(f"cached -> {path}")
    write_manifest(cfg, "prepare", paths, [path])
    return 0


def cmd_train_sw(cfg, args):
    split = load_split(cfg)
    outputs = []
    for ms in cfg["cli"]["master_seeds"]:
        _, _, files = phase_train_sw(cfg, split, ms)
        outputs += files
    write_manifest(cfg, "train-sw", [cache_path(cfg)], outputs)
    return 0


def cmd_calibrate(cfg, args):
    outputs = []
    for ms in cfg["cli"]["master_seeds"]:
        _, _, files = phase_calibrate(cfg, ms)
        outputs += files
    write_manifest(cfg, "calibrate", [], outputs)
    return 0


def cmd_calib_report(cfg, args):
    outputs = []
    for ms in cfg["cli"]["master_seeds"]:
        store = load_store(cfg, ms)
        phys = rebuild_physiology(cfg, ms, store)
        report = calibration.spread_report(
            phys, store, ms,
            n_trials=cfg["calibration"]["report_trials"],
            variation=variation_spec(cfg),
        )
        path = os.path.join(seed_dir(cfg, ms), "calibration_spread.csv")
        with open(path, "w", newline="") as f:
            f.write("parameter,raw_spread,calibrated_spread,ratio\r\n")
            for p, row in report.items():
                f.write(f"{p},{row['raw']:.6f},{row['calibrated']:.6f},{row['ratio']:.6f}\r\n")
        outputs.append(path)
        worst = max(report, key=lambda p: report[p]["ratio"])
        print(
            f"[seed {ms}] calibration spread report -> {path} "
            f"(worst ratio {report[worst]['ratio']:.3f} on {worst})"
        )
    write_manifest(cfg, "calib-report", [], outputs)
    return 0


def load_checkpoint_for(cfg, ms, name, need_hardware):
    path = checkpoint_path(cfg, ms, name)
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    sw, hw_mapping = containers.load_checkpoint(path)
    if need_hardware and hw_mapping is None:
        raise DataError(f"{path}: no hardware configuration section")
    hw_cfg = containers.hardware_from_mapping(hw_mapping) if hw_mapping else None
    return path, sw, hw_cfg


def cmd_convert(cfg, args):
    split = load_split(cfg)
    inputs, outputs = [cache_path(cfg)], []
    for ms in cfg["cli"]["master_seeds"]:
        sw_path, sw, _ = load_checkpoint_for(cfg, ms, "software.bin", need_hardware=False)
        store = load_store(cfg, ms)
        phys = rebuild_physiology(cfg, ms, store)
        inputs += [sw_path, checkpoint_path(cfg, ms, "calibration.bin")]
        _, _, files = phase_convert(cfg, split, sw, phys, store, ms)
        outputs += files
    write_manifest(cfg, "convert", inputs, outputs)
    return 0


def cmd_train_itl(cfg, args):
    split = load_split(cfg)
    inputs, outputs = [cache_path(cfg)], []
    for ms in cfg["cli"]["master_seeds"]:
        conv_path, sw, hw_cfg = load_checkpoint_for(cfg, ms, "converted.bin", need_hardware=True)
        store = load_store(cfg, ms)
        phys = rebuild_physiology(cfg, ms, store)
        inputs += [conv_path, checkpoint_path(cfg, ms, "calibration.bin")]
        _, _, files = phase_itl(cfg, split, sw, phys, store, hw_cfg, ms)
        outputs += files
    write_manifest(cfg, "train-itl", inputs, outputs)
    return 0


def cmd_eval_hw(cfg, args):
    split = load_split(cfg)
    sub = cfg["substrate"]
    inputs, outputs = [cache_path(cfg)], []
    for ms in cfg["cli"]["master_seeds"]:
        name = args.checkpoint
        path, sw, hw_cfg = load_checkpoint_for(cfg, ms, name, need_hardware=True)
        store = load_store(cfg, ms)
        phys = rebuild_physiology(cfg, ms, store)
        inputs += [path, checkpoint_path(cfg, ms, "calibration.bin")]
        idx = loop_trainer.eval_subset_indices(split, ms, cfg["loop_trainer"]["eval_size"])
        acc, _ = loop_trainer.eval_hw(
            phys, hw_cfg, split.test_pixels[idx], split.test_labels[idx], ms,
            classes=split.classes, t_on=sub["t_on"], t_off=sub["t_off"], dt=sub["dt"],
            variation=variation_spec(cfg), threads=cfg["cli"]["threads"],
        )
        out = os.path.join(seed_dir(cfg, ms), f"eval_{os.path.splitext(name)[0]}.csv")
        with open(out, "w", newline="") as f:
            f.write("checkpoint,subset_size,accuracy\r\n")
            f.write(f"{name},{len(idx)},{acc:.6f}\r\n")
        outputs.append(out)
        print(f"[seed {ms}] {name}: substrate accuracy {acc:.4f} on {len(idx)} test images")
    write_manifest(cfg, "eval-hw", inputs, outputs)
    return 0


def cmd_raster(cfg, args):
    split = load_split(cfg)
    sub = cfg["substrate"]
    per_class = cfg["cli"]["per_class"]
    inputs, outputs = [cache_path(cfg)], []
    for ms in cfg["cli"]["master_seeds"]:
        path, sw, hw_cfg = load_checkpoint_for(cfg, ms, args.checkpoint, need_hardware=True)
        store = load_store(cfg, ms)
        phys = rebuild_physiology(cfg, ms, store)
        inputs += [path, checkpoint_path(cfg, ms, "calibration.bin")]
        rng = seeds.generator(ms, seeds.RASTER, 0)
        chosen = []
        for c in split.classes:
            pool = np.flatnonzero(split.test_labels == c)
            take = min(per_class, len(pool))
            chosen += list(rng.choice(pool, size=take, replace=False)) if take else []
        sd = seed_dir(cfg, ms)
        spikes_path = os.path.join(sd, "raster_spikes.csv")
        verdicts_path = os.path.join(sd, "raster_verdicts.csv")
        if chosen:
            rates = substrate.encode_rates(split.test_pixels[np.asarray(chosen)])
            trains = [
                substrate.make_spike_trains(
                    r, t_on=sub["t_on"], t_off=sub["t_off"],
                    seed=seeds.sequence(ms, seeds.RASTER, 2, i),
                )
                for i, r in enumerate(rates)
            ]
            net = substrate.configure(
                phys, hw_cfg, seeds.sequence(ms, seeds.RASTER, 1), variation_spec(cfg)
            )
            rec = substrate.run(
                net, trains, t_on=sub["t_on"], t_off=sub["t_off"], dt=sub["dt"],
                threads=cfg["cli"]["threads"],
            )
            label_rates = substrate.rates_from_record(rec, layers=("label",))["label"]
            picks = substrate.classify_hw(label_rates, split.classes)
        else:
            rec = substrate.RunRecord(
                t_on=sub["t_on"], t_off=sub["t_off"], dt=sub["dt"],
                topology=tuple(hw_cfg.topology), samples=[],
            )
            picks = np.empty(0, dtype=np.int64)
        with open(spikes_path, "w", newline="") as f:
            substrate.export_spikes(rec, f)
        with open(verdicts_path, "w", newline="") as f:
            f.write("sample_index,test_index,digit,predicted,correct\r\n")
            for i, (t_idx, p) in enumerate(zip(chosen, picks)):
                d = int(split.test_labels[t_idx])
                f.write(f"{i},{int(t_idx)},{d},{int(p)},{int(p == d)}\r\n")
        outputs += [spikes_path, verdicts_path]
        n_correct = int(sum(int(p == split.test_labels[t]) for t, p in zip(chosen, picks)))
        print(
            f"[seed {ms}] raster: {len(chosen)} presentation windows "
            f"({n_correct} classified correctly) -> {spikes_path}"
        )
    write_manifest(cfg, "raster", inputs, outputs)
    return 0


def cmd_pipeline(cfg, args):
    split = load_split(cfg)
    skip_itl = cfg["cli"]["skip_itl"]
    inputs = [cache_path(cfg)]
    outputs = []
    rows = []
    for ms in cfg["cli"]["master_seeds"]:
        print(f"=== master seed {ms} ===")
        try:
            sw, sw_acc, f1 = phase_train_sw(cfg, split, ms)
            phys, store, f2 = phase_calibrate(cfg, ms)
            hw_cfg, conv_acc, f3 = phase_convert(cfg, split, sw, phys, store, ms)
            files = f1 + f2 + f3
            if skip_itl:
                itl_acc = None
            else:
                _, itl_acc, f4 = phase_itl(cfg, split, sw, phys, store, hw_cfg, ms)
                files += f4
        except SpikeloopError as e:
            raise type(e)(f"master seed {ms}: {e}") from e
        outputs += files
        rows.append((ms, sw_acc, conv_acc, itl_acc))
    summary_path = os.path.join(cfg["cli"]["out_dir"], "summary.csv")
    with open(summary_path, "w", newline="") as f:
        f.write("master_seed,software_accuracy,conversion_accuracy,itl_accuracy\r\n")
        for ms, a, b, c in rows:
            f.write(f"{ms},{a:.6f},{b:.6f},{'' if c is None else f'{c:.6f}'}\r\n")
    outputs.append(summary_path)
    print("\nmaster seed | software | conversion | in-the-loop")
    for ms, a, b, c in rows:
        print(f"{ms:>11} | {a:8.4f} | {b:10.4f} | {'-' if c is None else f'{c:11.4f}'}")
    print(f"summary -> {summary_path}")
    write_manifest(cfg, "pipeline", inputs, outputs)
    return 0


# --- entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--out", help="run directory (overrides [cli] out_dir)")
    common.add_argument("--master-seed", type=int, help="single master seed")
    common.add_argument("--seeds", help="comma-separated master seeds")
    common.add_argument("--threads", type=int, help="worker thread cap")

    p = _Parser(prog="spikeloop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sp = sub.add_parser("prepare", parents=[common], help="build the reduced dataset cache")
    sp.add_argument("--classes", help="digit classes to keep, e.g. 0,1")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train-sw", parents=[common], help="phase A: software training")
    sp.set_defaults(func=cmd_train_sw)

    sp = sub.add_parser("calibrate", parents=[common], help="fabricate and calibrate a substrate")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("calib-report", parents=[common],
                        help="parameter spread before vs after calibration")
    sp.set_defaults(func=cmd_calib_report)

    sp = sub.add_parser("convert", parents=[common],
                        help="phase B: map the software model onto the substrate")
    sp.add_argument("--g-unit", type=float, help="fixed synaptic unit (skips tuning)")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("train-itl", parents=[common], help="phase C: in-the-loop training")
    sp.set_defaults(func=cmd_train_itl)

    sp = sub.add_parser("eval-hw", parents=[common], help="measure accuracy of a checkpoint")
    sp.add_argument("--checkpoint", default="final.bin",
                    help="checkpoint file name inside the seed directory")
    sp.set_defaults(func=cmd_eval_hw)

    sp = sub.add_parser("raster", parents=[common],
                        help="export spike rasters and classification verdicts")
    sp.add_argument("--checkpoint", default="final.bin",
                    help="checkpoint file name inside the seed directory")
    sp.add_argument("--per-class", type=int, help="samples per class")
    sp.set_defaults(func=cmd_raster)

    sp = sub.add_parser("pipeline", parents=[common], help="run phases A, B, C end to end")
    sp.add_argument("--g-unit", type=float, help="fixed synaptic unit (skips tuning)")
    sp.add_argument("--skip-itl", action="store_true", help="stop after conversion")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = apply_overrides(load_config(args.config), args)
        os.makedirs(cfg["cli"]["out_dir"], exist_ok=True)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except SpikeloopError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
