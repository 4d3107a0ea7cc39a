"""Command-line interface: exit codes, artifacts, reruns, spike exports."""

import json
import os
import subprocess
from types import SimpleNamespace

import numpy as np
import pytest

from spikeloop import cli, containers, dataset, loop_trainer

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist")

SMOKE_INI = """\
[dataset]
mnist_dir = {data}

[relu_net]
steps = 200

[substrate]
g_unit = 0.25
t_on = 300

[calibration]
n_points = 6
repeats = 3

[loop_trainer]
batch_size = 40
iterations = 2
eval_size = 60
t_on = 300

[cli]
per_class = 2
"""

SMALL_INI = """\
[dataset]
mnist_dir = {data}

[relu_net]
steps = 100
topology = 100,8,5

[substrate]
n_neurons = 13
g_unit = 0.25
t_on = 300

[calibration]
n_points = 6
repeats = 2

[loop_trainer]
eval_size = 40
t_on = 300
"""


def require_mnist():
    if not os.path.exists(os.path.join(DATA_DIR, "train-images-idx3-ubyte.gz")):
        pytest.skip(f"MNIST files not present under {DATA_DIR}")


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """Prepare the cache and run the full pipeline once at desk scale."""
    require_mnist()
    root = tmp_path_factory.mktemp("cli_smoke")
    ini = root / "smoke.ini"
    ini.write_text(SMOKE_INI.format(data=DATA_DIR))
    out = root / "run"
    args = ["--config", str(ini), "--out", str(out), "--master-seed", "11"]
    assert cli.main(["prepare", *args]) == 0
    assert cli.main(["pipeline", *args]) == 0
    return SimpleNamespace(root=root, ini=str(ini), out=out, args=args, seed_dir=out / "seed11")


# --- configuration and data errors ----------------------------------------------


def test_unknown_command_exits_1(capsys):
    assert cli.main(["launch-rockets"]) == 1
    assert "configuration error" in capsys.readouterr().err


def test_no_command_exits_1():
    assert cli.main([]) == 1


def test_missing_config_file_exits_1(tmp_path):
    assert cli.main(["train-sw", "--config", str(tmp_path / "absent.ini")]) == 1


@pytest.mark.parametrize(
    "body",
    [
        "[wormhole]\nx = 1\n",
        "[cli]\nwormhole = 1\n",
        "[cli]\nthreads = banana\n",
        "[substrate]\nn_neurons = 10\n",  # cannot host the default topology
        "[loop_trainer]\neta = 0\n",
        "[dataset]\nclasses = 3\n",  # need at least two classes
    ],
)
def test_bad_configuration_exits_1(tmp_path, body):
    ini = tmp_path / "bad.ini"
    ini.write_text(body)
    assert cli.main(["train-sw", "--config", str(ini), "--out", str(tmp_path)]) == 1


def test_bad_seed_list_exits_1(tmp_path):
    assert cli.main(["train-sw", "--out", str(tmp_path), "--seeds", "1,x"]) == 1


def test_missing_cache_exits_2(tmp_path, capsys):
    assert cli.main(["train-sw", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "data error" in err and "prepare" in err


def test_missing_checkpoint_exits_2(smoke):
    assert cli.main(["eval-hw", *smoke.args[:-2], "--master-seed", "99"]) == 2


# --- pipeline artifacts -----------------------------------------------------------


def test_pipeline_writes_all_artifacts(smoke):
    for name in ("software.bin", "calibration.bin", "converted.bin",
                 "final.bin", "itl_metrics.csv", "migration.csv"):
        assert (smoke.seed_dir / name).exists(), name
    assert (smoke.out / "reduced.bin").exists()
    assert (smoke.out / "summary.csv").exists()
    for cmd in ("prepare", "pipeline"):
        assert (smoke.out / f"manifest-{cmd}.json").exists()


def test_summary_row_is_well_formed(smoke):
    lines = (smoke.out / "summary.csv").read_bytes().decode().split("\r\n")
    assert lines[0] == "master_seed,software_accuracy,conversion_accuracy,itl_accuracy"
    ms, sw, conv, itl = lines[1].split(",")
    assert ms == "11"
    for field in (sw, conv, itl):
        assert 0.0 <= float(field) <= 1.0


def test_metrics_file_has_conversion_row_plus_iterations(smoke):
    with open(smoke.seed_dir / "itl_metrics.csv", newline="") as f:
        rows = loop_trainer.read_metrics(f)
    assert [r[0] for r in rows] == [0, 1, 2]
    for _, batch, test, rate in rows:
        assert 0.0 <= batch <= 1.0
        assert 0.0 <= test <= 1.0
        assert rate >= 0.0


def test_manifest_records_hashes_and_config(smoke):
    with open(smoke.out / "manifest-pipeline.json") as f:
        manifest = json.load(f)
    assert manifest["command"] == "pipeline"
    assert manifest["config"]["substrate"]["g_unit"] == "0.25"
    assert manifest["config"]["cli"]["master_seeds"] == "11"
    outputs = manifest["outputs"]
    assert "summary.csv" in outputs
    assert "seed11/itl_metrics.csv" in outputs
    for digest in outputs.values():
        assert len(digest) == 64 and int(digest, 16) >= 0


def test_migration_csv_matches_checkpoints(smoke):
    _, hw_before = containers.load_checkpoint(smoke.seed_dir / "converted.bin")
    _, hw_after = containers.load_checkpoint(smoke.seed_dir / "final.bin")
    report = loop_trainer.weight_migration(
        containers.hardware_from_mapping(hw_before),
        containers.hardware_from_mapping(hw_after),
    )
    lines = (smoke.seed_dir / "migration.csv").read_bytes().decode().split("\r\n")
    assert lines[0] == "level_before,level_after,count"
    seen = np.zeros((31, 31), dtype=np.int64)
    for line in lines[1:]:
        if not line:
            continue
        i, j, c = (int(x) for x in line.split(","))
        assert -15 <= i <= 15 and -15 <= j <= 15 and c > 0
        seen[i + 15, j + 15] = c
    assert np.array_equal(seen, report.combined)


def test_final_checkpoint_matches_quantized_weights(smoke):
    sw, hw_mapping = containers.load_checkpoint(smoke.seed_dir / "final.bin")
    cfg = containers.hardware_from_mapping(hw_mapping)
    hw, sign = loop_trainer.quantize_all(sw.weights)
    assert all(np.array_equal(a, b) for a, b in zip(cfg.hw, hw))
    assert all(np.array_equal(a, b) for a, b in zip(cfg.sign, sign))


# --- reruns and derived commands --------------------------------------------------


def test_rerun_train_itl_is_byte_identical(smoke):
    names = ("itl_metrics.csv", "migration.csv", "final.bin")
    before = {n: (smoke.seed_dir / n).read_bytes() for n in names}
    assert cli.main(["train-itl", *smoke.args]) == 0
    for n in names:
        assert (smoke.seed_dir / n).read_bytes() == before[n], n


def test_eval_hw_reproduces_conversion_accuracy(smoke):
    assert cli.main(["eval-hw", *smoke.args, "--checkpoint", "converted.bin"]) == 0
    out = smoke.seed_dir / "eval_converted.csv"
    lines = out.read_bytes().decode().split("\r\n")
    assert lines[0] == "checkpoint,subset_size,accuracy"
    name, size, acc = lines[1].split(",")
    assert (name, size) == ("converted.bin", "60")
    summary_conv = (smoke.out / "summary.csv").read_bytes().decode().split("\r\n")[1].split(",")[2]
    assert acc == summary_conv


def test_raster_verdicts_recomputable_from_exported_spikes(smoke):
    assert cli.main(["raster", *smoke.args, "--checkpoint", "final.bin"]) == 0
    split = dataset.load_reduced(smoke.out / "reduced.bin")
    classes = np.asarray(split.classes)

    spikes = (smoke.seed_dir / "raster_spikes.csv").read_bytes().decode().split("\r\n")
    assert spikes[0] == "neuron_id,spike_time_ms,sample_index"
    verdicts = (smoke.seed_dir / "raster_verdicts.csv").read_bytes().decode().split("\r\n")
    assert verdicts[0] == "sample_index,test_index,digit,predicted,correct"
    rows = [line.split(",") for line in verdicts[1:] if line]
    assert len(rows) == 2 * len(classes)  # per_class = 2

    # channel ids are global (inputs 0..99 first); the label layer of the
    # 100-15-15-5 net occupies ids 130..134
    counts = np.zeros((len(rows), 5), dtype=np.int64)
    for line in spikes[1:]:
        if not line:
            continue
        nid, t, s = line.split(",")
        if int(nid) >= 130 and float(t) < 300.0 + 0.05:  # stimulus window only
            counts[int(s), int(nid) - 130] += 1
    for s, (_, t_idx, digit, predicted, correct) in enumerate(rows):
        assert int(digit) == int(split.test_labels[int(t_idx)])
        assert int(predicted) == classes[np.argmax(counts[s])]
        assert int(correct) == int(int(predicted) == int(digit))


def test_skip_itl_stops_after_conversion(tmp_path):
    require_mnist()
    ini = tmp_path / "small.ini"
    ini.write_text(SMALL_INI.format(data=DATA_DIR))
    out = tmp_path / "run"
    args = ["--config", str(ini), "--out", str(out), "--master-seed", "3"]
    assert cli.main(["prepare", *args]) == 0
    assert cli.main(["pipeline", *args, "--skip-itl"]) == 0
    lines = (out / "summary.csv").read_bytes().decode().split("\r\n")
    assert lines[1].endswith(",")  # empty in-the-loop column
    assert not (out / "seed3" / "itl_metrics.csv").exists()
    assert not (out / "seed3" / "final.bin").exists()
    assert (out / "seed3" / "converted.bin").exists()


def test_prepare_accepts_class_override(tmp_path):
    require_mnist()
    ini = tmp_path / "data.ini"
    ini.write_text(f"[dataset]\nmnist_dir = {DATA_DIR}\n")
    out = tmp_path / "two"
    assert cli.main(["prepare", "--config", str(ini), "--out", str(out), "--classes", "0,1"]) == 0
    split = dataset.load_reduced(out / "reduced.bin")
    assert split.classes == (0, 1)
    assert set(np.unique(split.train_labels)) == {0, 1}
    assert set(np.unique(split.test_labels)) == {0, 1}


def test_console_script_shows_help():
    res = subprocess.run(
        ["spikeloop", "pipeline", "--help"], capture_output=True, text=True
    )
    assert res.returncode == 0
    assert "--skip-itl" in res.stdout
