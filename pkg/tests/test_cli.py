import json

import pytest
import yaml

from wafl import cli, contact, dataset

from conftest import MNIST_DIR, needs_mnist


def write_config(path, mnist, **over):
    doc = {
        "seed": 1,
        "mnist_dir": str(mnist),
        "partition": {"dominance": 0.9},
        "trace": {"kind": "static_line"},
        "run": {"pretrain_epochs": 2, "total_epochs": 4, "eval_stride": 1},
        "output": "out",
    }
    for k, v in over.items():
        if v is None:
            doc.pop(k, None)
        else:
            doc[k] = v
    path.write_text(yaml.safe_dump(doc))
    return path


# -- generate-trace -------------------------------------------------------------

def test_generate_rwp(tmp_path, capsys):
    out = tmp_path / "t.json"
    assert cli.main(["generate-trace", "--kind", "rwp", "--area", "500", "--seed", "1",
                     "--epochs", "5000", "--out", str(out)]) == 0
    trace = contact.load_trace(out)
    assert trace.n_nodes == 10 and trace.n_epochs == 5000
    assert trace.config["radio_range"] == 100 and trace.config["pause"] == 10
    assert "contacts per epoch" in capsys.readouterr().out


def test_generate_static_line(tmp_path, capsys):
    out = tmp_path / "t.json"
    assert cli.main(["generate-trace", "--kind", "static-line", "--seed", "0", "--epochs", "50",
                     "--out", str(out)]) == 0
    assert all(c == 9 for c in contact.load_trace(out).edge_counts())
    assert "min 9 mean 9.000 max 9" in capsys.readouterr().out


def test_generate_cse_invalid_memberships(capsys):
    code = cli.main(["generate-trace", "--kind", "cse", "--memberships", "11", "--communities", "10",
                     "--seed", "1", "--epochs", "10"])
    assert code != 0
    assert "memberships" in capsys.readouterr().err


def test_generate_flag_for_wrong_model(capsys):
    assert cli.main(["generate-trace", "--kind", "cse", "--area", "300", "--seed", "1"]) != 0


def test_seed_is_mandatory():
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate-trace", "--kind", "rwp"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        cli.main(["partition", "--dominance", "0.9"])


def test_unknown_kind(capsys):
    assert cli.main(["generate-trace", "--kind", "static-star", "--seed", "0"]) != 0
    assert cli.main(["generate-trace", "--kind", "levy", "--seed", "0"]) != 0


# -- partition ------------------------------------------------------------------

def test_partition_fake(fake_mnist, tmp_path, capsys):
    out = tmp_path / "p.json"
    assert cli.main(["partition", "--seed", "2", "--mnist-dir", str(fake_mnist), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split() == ["Node"] + [f"L{i}" for i in range(10)] + ["Summary"]
    assert text.splitlines()[-1].split()[-1] == "400"
    parts, doc = dataset.load_partition(out)
    assert doc["seed"] == 2 and len(parts) == 10


def test_partition_same_seed_identical(fake_mnist, tmp_path):
    for name in ("a", "b"):
        cli.main(["partition", "--seed", "4", "--mnist-dir", str(fake_mnist), "--out", str(tmp_path / name)])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_partition_missing_files(tmp_path, capsys):
    assert cli.main(["partition", "--seed", "0", "--mnist-dir", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err


def test_partition_corrupt_file(fake_mnist, capsys):
    path = fake_mnist / "train-labels-idx1-ubyte"
    path.write_bytes(b"\x00\x00\x08\x03" + path.read_bytes()[4:])
    assert cli.main(["partition", "--seed", "0", "--mnist-dir", str(fake_mnist)]) != 0
    assert "offset" in capsys.readouterr().err


@needs_mnist
@pytest.mark.parametrize("dominance", [0.9, 0.8])
def test_partition_full_mnist_table(dominance, capsys):
    assert cli.main(["partition", "--seed", "0", "--dominance", str(dominance),
                     "--mnist-dir", str(MNIST_DIR)]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()]
    assert rows[-1][-1] == "60000"
    totals = [int(v) for v in rows[-1][1:-1]]
    for node, row in enumerate(rows[1:-1]):
        share = int(row[1 + node]) / totals[node]
        assert abs(share - dominance) < 0.01


# -- run / report ---------------------------------------------------------------

def test_run_writes_outputs(fake_mnist, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist, run={"pretrain_epochs": 2, "total_epochs": 3,
                                                               "snapshot_stride": 3})
    assert cli.main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for name in ("manifest.json", "metrics.csv", "convergence.csv", "node_accuracy.csv",
                 "confusion.json", "timing.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"]["run"] == 1 and manifest["version"]
    assert manifest["config"]["run"]["mode"] == "wafl"
    assert len(list((out / "snapshots").iterdir())) == 2 * 10  # offsets 0 and 3
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,node,class,accuracy,precision,recall,f1,undefined_flag"
    epochs = {int(l.split(",")[0]) for l in (out / "metrics.csv").read_text().splitlines()[1:]}
    assert epochs == {2, 3, 4, 5}


def test_run_zero_protocol_epochs(fake_mnist, tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist,
                       run={"mode": "self_train", "pretrain_epochs": 2, "total_epochs": 0})
    assert cli.main(["run", "--config", str(cfg)]) == 0
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[1:]
    assert {l.split(",")[0] for l in lines} == {"2"}
    assert len(lines) == 10 * 10


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_run_byte_identical_across_workers(fake_mnist, tmp_path, workers):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist, trace={"kind": "rwp", "params": {"area_size": 200}})
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "ref"), "--workers", "1"])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "par"), "--workers", str(workers)])
    for name in ("metrics.csv", "convergence.csv", "node_accuracy.csv", "confusion.json"):
        assert (tmp_path / "ref" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


def test_manifest_reruns_identically(fake_mnist, tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist, trace={"kind": "cse"})
    cli.main(["run", "--config", str(cfg)])
    cli.main(["run", "--config", str(tmp_path / "out" / "manifest.json"), "--out", str(tmp_path / "again")])
    assert (tmp_path / "out" / "metrics.csv").read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes()


def test_sweep_grid(fake_mnist, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist,
                       run={"pretrain_epochs": 1, "total_epochs": 1},
                       sweep={"mode": ["wafl", "self_train", "federated"], "lam": [0.1, 1.0],
                              "learning_rate": [0.001, 0.0001]})
    exps = cli.expand_config(cli.read_document(cfg), tmp_path)
    names = sorted(e.name for e in exps)
    assert len(names) == 2 * 2 + 2 + 2 * 2  # self_train ignores lam
    assert "self_train_lr0.0001" in names and "wafl_static_line_lam0.1_lr0.001" in names
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert cli.main(["report", str(tmp_path / "out"), "--window", "2"]) == 0
    report = capsys.readouterr().out
    assert sum(name in report for name in names) == len(names)


def test_sweep_over_traces(fake_mnist, tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist,
                       sweep={"trace": ["static_line", "static_tree", {"kind": "rwp"}]})
    names = [e.name for e in cli.expand_config(cli.read_document(cfg), tmp_path)]
    assert names == ["wafl_static_line_lam1_lr0.001", "wafl_static_tree_lam1_lr0.001", "wafl_rwp_lam1_lr0.001"]


@pytest.mark.parametrize("over, message", [
    ({"seed": None}, "seed"),
    ({"run": {"mode": "ipls"}}, "not implemented"),
    ({"run": {"lam": 3.0}}, "lam"),
    ({"run": {"epochs": 3}}, "unknown run fields"),
    ({"trace": {"file": "missing.json"}}, "not found"),
    ({"mnist_dir": "/nonexistent"}, "found"),
    ({"partition": {"dominance": 1.0}}, "dominance"),
    ({"trace": {"kind": "static_line", "epochs": 2}}, "trace covers"),
])
def test_run_rejects_bad_config_before_training(fake_mnist, tmp_path, capsys, over, message):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist, **over)
    assert cli.main(["run", "--config", str(cfg)]) != 0
    assert message in capsys.readouterr().err
    assert not (tmp_path / "out" / "metrics.csv").exists()
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_report_constant_window_zero_std(tmp_path, capsys):
    run = tmp_path / "r"
    run.mkdir()
    (run / "manifest.json").write_text(json.dumps({"version": "x", "config": {
        "run": {"mode": "wafl", "lam": 1.0, "learning_rate": 0.001}}}))
    rows = ["epoch,node,class,accuracy,precision,recall,f1,undefined_flag"]
    rows += [f"{e},0,{c},0.5,0.5,0.5,0.5,0" for e in range(1, 11) for c in range(10)]
    (run / "metrics.csv").write_text("\n".join(rows) + "\n")
    (run / "node_accuracy.csv").write_text("epoch,node,accuracy\n" + "".join(f"{e},0,0.25\n" for e in range(1, 11)))
    assert cli.main(["report", str(run), "--window", "5", "--out", str(tmp_path / "s.json")]) == 0
    assert "25.000±0.000" in capsys.readouterr().out
    summary = json.loads((tmp_path / "s.json").read_text())[0]
    assert summary["micro_f1"] == [0.5, 0.0]


def test_report_window_longer_than_run(fake_mnist, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist)
    cli.main(["run", "--config", str(cfg)])
    assert cli.main(["report", str(tmp_path / "out"), "--window", "100"]) != 0
    assert "window" in capsys.readouterr().err


def test_report_missing_inputs(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) != 0
    assert "manifest" in capsys.readouterr().err


def test_sweep_trace_variants_get_distinct_names(fake_mnist, tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist, sweep={"trace": [
        {"kind": "rwp", "params": {"area_size": 500}}, {"kind": "rwp", "params": {"area_size": 1000}}]})
    names = [e.name for e in cli.expand_config(cli.read_document(cfg), tmp_path)]
    assert names == ["wafl_rwp-area_size500_lam1_lr0.001", "wafl_rwp-area_size1000_lam1_lr0.001"]


def test_sweep_name_collision_rejected(fake_mnist, tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml", fake_mnist, sweep={"trace": [
        {"kind": "rwp", "name": "x"}, {"kind": "cse", "name": "x"}]})
    with pytest.raises(cli.ConfigError, match="same run name"):
        cli.expand_config(cli.read_document(cfg), tmp_path)
