import csv
import os
import signal
import socket
import subprocess
import sys

import numpy as np
import pytest

from cortexforge import checkpoint
from cortexforge.cli import main
from cortexforge.config import RunConfig
from cortexforge.data import assemble_eval_set
from cortexforge.evaluate import scan_all_neurons
from cortexforge.netcore import init_network, top_features


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["toy-data", "--out", str(root), "--faces", "60", "--distractors", "110",
                 "--unlabeled", "200", "--per-class", "10", "--seed", "1"]) == 0
    return root


def write_config(path, corpus, **extra):
    lines = {
        "run.seed": 0, "net.stages": 1, "net.input_height": 16, "net.input_width": 16,
        "net.input_maps": 1, "stage1.rf_size": 6, "stage1.stride": 5, "stage1.num_maps": 4,
        "stage1.pool_size": 1, "stage1.lcn_window": 5, "sgd.learning_rate": 2e-3,
        "sgd.minibatch_size": 20, "sgd.max_steps": 12, "async.n_replicas": 1,
        "async.fetch_period": 1, "async.push_period": 1, "async.n_shards": 2,
        "data.train_dir": corpus / "train", "eval.pos_dir": corpus / "pos",
        "eval.neg_dir": corpus / "neg", "eval.rotation_dir": corpus / "rotations",
        "eval.n_filters": 20, "suphead.data_dir": corpus / "classes",
        "suphead.pretrain_steps": 5, "suphead.head_steps": 20, "suphead.finetune_steps": 2,
    }
    lines.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


@pytest.fixture(scope="module")
def cfg_path(corpus, tmp_path_factory):
    return write_config(tmp_path_factory.mktemp("cfg") / "run.cfg", corpus)


@pytest.fixture(scope="module")
def trained(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    return out


def _bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_train_outputs_and_determinism(trained, cfg_path, tmp_path):
    for name in ("checkpoint.lsae", "metrics.csv", "metrics.png", "config.resolved"):
        assert (trained / name).exists()
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == list(range(12))
    assert main(["train", "--config", cfg_path, "--out", str(tmp_path)]) == 0
    assert _bytes(tmp_path / "checkpoint.lsae") == _bytes(trained / "checkpoint.lsae")


def test_zero_steps_is_seeded_init(cfg_path, tmp_path):
    assert main(["train", "--config", cfg_path, "--steps", "0", "--out", str(tmp_path)]) == 0
    net = checkpoint.load(str(tmp_path / "checkpoint.lsae"))
    ref = init_network(RunConfig.load(cfg_path).network_config(), 0)
    for a, b in zip(net.learnable(), ref.learnable()):
        assert np.array_equal(a, b)


def test_single_replica_distributed_equals_local(trained, cfg_path, tmp_path):
    assert main(["train", "--config", cfg_path, "--distributed", "--out", str(tmp_path)]) == 0
    assert _bytes(tmp_path / "checkpoint.lsae") == _bytes(trained / "checkpoint.lsae")


def test_eval_matches_library_scan(trained, cfg_path, corpus, tmp_path, capsys):
    ck = str(trained / "checkpoint.lsae")
    assert main(["eval", "--config", cfg_path, "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "eval_report.csv")))
    net = checkpoint.load(ck)
    from cortexforge.cli import load_dir

    pos = load_dir(str(corpus / "pos"), net.config, label=1)
    neg = load_dir(str(corpus / "neg"), net.config, label=0)
    ev = assemble_eval_set(pos, neg, RunConfig.load(cfg_path)["eval.ratio"], seed=0)
    x = ev.images if net.whitening is None else net.whitening.apply(ev.images)
    best = scan_all_neurons(top_features(x, net), ev.labels).best
    assert float(rows[0]["accuracy"]) == pytest.approx(best.accuracy)
    for axis in ("scale", "translate-x", "translate-y", "rotation-frame"):
        assert (tmp_path / f"invariance_{axis}.csv").exists()
        assert (tmp_path / f"invariance_{axis}.png").exists()
    assert "best neuron" in capsys.readouterr().out


def test_eval_of_constant_network_is_prior(cfg_path, tmp_path):
    net = init_network(RunConfig.load(cfg_path).network_config(), 0)
    for stage in net.stages:
        stage.w1_encode[...] = 0
    ck = str(tmp_path / "zero.lsae")
    checkpoint.save(ck, net)
    assert main(["eval", "--config", cfg_path, "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "eval_report.csv")))
    ratio = RunConfig.load(cfg_path)["eval.ratio"]
    total = int(110 / (1 - ratio))
    n_pos = int(ratio * total)
    assert float(rows[0]["accuracy"]) == pytest.approx((total - n_pos) / total)


def test_visualize_modes(trained, cfg_path, tmp_path, capsys):
    ck = str(trained / "checkpoint.lsae")
    assert main(["visualize", "--config", cfg_path, "--checkpoint", ck, "--k", "5",
                 "--out", str(tmp_path / "top")]) == 0
    assert len(list((tmp_path / "top").glob("top_*.pgm"))) == 5
    assert (tmp_path / "top" / "top_stimuli.png").exists()
    assert main(["visualize", "--config", cfg_path, "--checkpoint", ck, "--mode", "optimal",
                 "--out", str(tmp_path / "opt")]) == 0
    trace = [float(r["response"]) for r in csv.DictReader(open(tmp_path / "opt" / "optimal_trace.csv"))]
    assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))
    assert (tmp_path / "opt" / "optimal_stimulus.pgm").exists()


def test_baseline(trained, cfg_path, tmp_path):
    ck = str(trained / "checkpoint.lsae")
    assert main(["baseline", "--config", cfg_path, "--checkpoint", ck, "--n-filters", "10",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "baseline_report.csv")))
    assert rows[0]["n_filters"] == "10" and 0.5 <= float(rows[0]["accuracy"]) <= 1
    assert (tmp_path / "best_filter.pgm").exists() and (tmp_path / "best_filter.png").exists()


def test_sweep_single_and_empty(cfg_path, tmp_path):
    assert main(["sweep", "--config", cfg_path, "--axis", "num_maps", "--values", "2",
                 "--out", str(tmp_path / "one")]) == 0
    rows = list(csv.reader(open(tmp_path / "one" / "sweep_num_maps.csv")))
    assert len(rows) == 2 and (tmp_path / "one" / "sweep_num_maps.png").exists()
    assert main(["sweep", "--config", cfg_path, "--axis", "rf_size", "--values", ",",
                 "--out", str(tmp_path / "none")]) == 0
    assert len(list(csv.reader(open(tmp_path / "none" / "sweep_rf_size.csv")))) == 1
    assert not (tmp_path / "none" / "sweep_rf_size.png").exists()


def test_suphead_report(cfg_path, tmp_path):
    assert main(["suphead", "--config", cfg_path, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "supervised_report.csv").read_text().splitlines()
    assert lines[0] == "arm,train_acc,val_acc,steps,seed"
    assert [l.split(",")[0] for l in lines[1:]] == ["pretrained", "random"]
    assert (tmp_path / "supervised_report.png").exists()


def test_exit_codes(corpus, tmp_path):
    assert main(["train", "--config", write_config(tmp_path / "u.cfg", corpus, **{"bogus.key": 1}),
                 "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.lsae"),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.lsae").write_bytes(b"LSAE\x00")
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.lsae"),
                 "--out", str(tmp_path / "o")]) == 2
    big = write_config(tmp_path / "g.cfg", corpus, **{"stage1.rf_size": 40})
    assert main(["train", "--config", big, "--out", str(tmp_path / "o")]) in (1, 3)


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_params_answers_fetch_and_stops(cfg_path):
    from cortexforge.distrib.sockets import SocketTransport

    port = _free_port()
    proc = subprocess.Popen([sys.executable, "-m", "cortexforge.cli", "serve-params", "--config",
                             cfg_path, "--shard-id", "0", "--listen", f"127.0.0.1:{port}"],
                            stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stderr.readline()
        assert line.startswith("shard 0 listening on 127.0.0.1:")
        transport = SocketTransport([f"127.0.0.1:{port}"])
        from cortexforge.distrib.partition import partition_parameters

        cfg = RunConfig.load(cfg_path)
        keys = partition_parameters(cfg.network_config(), 2).keys_for(0)
        reply = transport.fetch(0, keys)
        assert reply.version == 0 and sorted(reply.tensors) == sorted(keys)
        transport.close()
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
