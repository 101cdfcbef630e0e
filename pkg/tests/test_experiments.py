import csv
import json
import shutil

import numpy as np
import pytest

from d2no import experiments as ex
from d2no.cli import main
from d2no.operator import load_model, model_params


def mlp_params(dims):
    return sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))


def tiny(name, n_train=30, n_test=10, **train):
    d = ex.builtin_spec(name).to_dict()
    for c in d["clients"]:
        c["n_train"], c["n_test"] = n_train, n_test
        if c["family"]["kind"] == "grf":
            c["family"]["resolution"] = 200
    if d["train"]["mode"] == "periodic_sync":
        d["train"].update(rounds=2, sync_period=2)
    else:
        d["train"].update(iterations=20)
    d["train"].update(train)
    d["replications"] = 2
    return ex.ExperimentSpec.from_dict(d)


@pytest.fixture(scope="module")
def pend(tmp_path_factory):
    root = tmp_path_factory.mktemp("pend")
    spec = tiny("pendulum-frequency")
    bundle = ex.generate_data(spec, root / "data")
    ex.train_all(spec, bundle, root / "runs")
    reports = ex.evaluate_runs(spec, bundle, root / "runs", out_dir=root / "reports")
    return spec, bundle, root, reports


# -- specs ------------------------------------------------------------------


def test_builtin_sample_counts():
    freq = ex.builtin_spec("pendulum-frequency")
    assert [(c.n_train, c.n_test) for c in freq.clients] == [(1000, 100), (1000, 100)]
    assert freq.methods == ["d2no", "deeponet-m100", "deeponet-m10"]
    unb = ex.builtin_spec("pendulum-unbalanced")
    assert [c.n_train for c in unb.clients] == [200, 1800]
    assert freq.replications == 10
    for name in ex.EXPERIMENTS:
        assert ex.builtin_spec(name).experiment == name


def test_regularity_branch_unit_counts():
    spec = ex.builtin_spec("burgers-regularity")
    model = ex.build_model(spec, "d2no", 0, 1)
    _, unshared, per = ex.parameter_counts(model)
    K = spec.model["n_basis"]
    # each of the K stacked units is [75, 100, 1] or [6, 50, 1], plus one output bias
    assert mlp_params([75, 100, 1]) == 7701 and mlp_params([6, 50, 1]) == 401
    assert per == {"hump": K * 7701 + 1, "smooth": K * 401 + 1}
    assert unshared == K * (7701 + 401) + 2


def test_spec_validation_and_json_roundtrip(tmp_path):
    spec = ex.builtin_spec("burgers-peaks")
    ex.save_spec(tmp_path / "s.json", spec)
    back = ex.load_spec(tmp_path / "s.json")
    assert back.to_dict() == spec.to_dict()
    assert ex.config_hash(back) == ex.config_hash(spec)
    d = spec.to_dict()
    with pytest.raises(ValueError):
        ex.ExperimentSpec.from_dict({**d, "experiment": "heat"})
    with pytest.raises(ValueError):
        ex.ExperimentSpec.from_dict({**d, "clients": []})
    with pytest.raises(ValueError):
        ex.ExperimentSpec.from_dict({**d, "replications": 0})
    with pytest.raises(ValueError):
        ex.ExperimentSpec.from_dict({**d, "clients": [d["clients"][0]] * 2})
    with pytest.raises(ValueError):
        ex.builtin_spec("nope")


def test_data_hash_tracks_data_inputs_only():
    spec = tiny("burgers-peaks")
    h = ex.data_hash(spec)
    assert ex.data_hash(spec.replace(replications=7)) == h
    assert ex.data_hash(spec.replace(master_seed=1)) != h
    assert ex.config_hash(spec.replace(replications=7)) != ex.config_hash(spec)


# -- gen-data ---------------------------------------------------------------


def test_gen_data_layout_and_shapes(pend):
    spec, bundle, root, _ = pend
    data = root / "data"
    for c in spec.clients:
        for f in ("train_inputs.csv", "train_labels.csv", "test_inputs.csv", "test_labels.csv"):
            assert (data / c.client_id / f).exists()
        d = bundle.clients[c.client_id]
        assert d.train_labels.shape == (30, 100, 2) and d.test_labels.shape == (10, 100, 2)
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["data_hash"] == ex.data_hash(spec)
    back = ex.load_data(spec, data)
    for cid, d in bundle.clients.items():
        assert np.array_equal(back.clients[cid].train_labels, d.train_labels)
        assert np.array_equal(back.clients[cid].test_inputs.values, d.test_inputs.values)


def test_gen_data_byte_identical(tmp_path):
    spec = tiny("burgers-regularity", n_train=4, n_test=2)
    ex.generate_data(spec, tmp_path / "a")
    ex.generate_data(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 13
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ex.generate_data(spec.replace(master_seed=3), tmp_path / "c")
    assert (tmp_path / "a/hump/train_inputs.csv").read_bytes() != \
        (tmp_path / "c/hump/train_inputs.csv").read_bytes()


def test_train_and_test_splits_differ(pend):
    _, bundle, _, _ = pend
    d = bundle.clients["V1"]
    assert not np.allclose(d.train_inputs.values[:10], d.test_inputs.values)


def test_load_data_refuses_stale_or_tampered(pend, tmp_path):
    spec, _, root, _ = pend
    with pytest.raises(ex.HashMismatch):
        ex.load_data(spec.replace(master_seed=9), root / "data")
    copy = tmp_path / "data"
    shutil.copytree(root / "data", copy)
    lab = copy / "V2" / "test_labels.csv"
    lab.write_text(lab.read_text().replace("0", "1", 1))
    with pytest.raises(ex.HashMismatch):
        ex.load_data(spec, copy)
    with pytest.raises(FileNotFoundError):
        ex.load_data(spec, tmp_path / "missing")


# -- train ------------------------------------------------------------------


def test_one_checkpoint_per_replication(pend):
    spec, _, root, _ = pend
    for method in spec.methods:
        reps = sorted((root / "runs" / method).iterdir())
        assert [p.name for p in reps] == ["rep000", "rep001"]
        for r, rdir in enumerate(reps):
            assert sorted(p.name for p in rdir.iterdir()) == ["log.csv", "model.ckpt", "model.ckpt.json", "run.json"]
            meta = json.loads((rdir / "run.json").read_text())
            assert meta["complete"] and meta["seed"] == spec.master_seed + r
            assert meta["config"]["seed"] == spec.master_seed + r


def test_replication_reproduces_from_its_seed(pend):
    spec, bundle, root, _ = pend
    res = ex.run_method(spec, bundle, "d2no", 1)
    saved, _ = load_model(root / "runs" / "d2no" / "rep001" / "model.ckpt")
    for a, b in zip(model_params(res.model), model_params(saved), strict=True):
        assert np.array_equal(a, b)
    other = ex.run_method(spec, bundle, "d2no", 0)
    assert not np.array_equal(other.model.trunk.params()[0], res.model.trunk.params()[0])


def test_baseline_trains_on_pooled_uniform_grid(pend):
    spec, bundle, _, _ = pend
    res = ex.run_method(spec, bundle, "deeponet-m10", 0)
    assert res.model.client_ids == ["deeponet-m10"]
    assert res.model.view("deeponet-m10").grid.count == 10
    assert sum(res.metrics.samples_seen.values()) == 60 * 2 * 2


def test_aborted_run_is_never_marked_complete(pend, tmp_path, monkeypatch):
    spec, bundle, root, _ = pend
    runs = tmp_path / "runs"
    shutil.copytree(root / "runs", runs)
    res = ex.run_method(spec, bundle, "d2no", 2)

    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(ex, "write_log", boom)
    with pytest.raises(KeyboardInterrupt):
        ex.save_run(runs, spec, bundle, res)
    rdir = runs / "d2no" / "rep002"
    assert (rdir / "model.ckpt").exists() and not (rdir / "run.json").exists()
    # rerunning over a finished run must also drop its old completion marker first
    with pytest.raises(KeyboardInterrupt):
        ex.save_run(runs, spec, bundle, ex.run_method(spec, bundle, "d2no", 1))
    assert not (runs / "d2no" / "rep001" / "run.json").exists()
    monkeypatch.undo()
    reports = ex.evaluate_runs(spec, bundle, runs)
    assert {r.method: r.replications for r in reports}["d2no"] == 1


# -- eval -------------------------------------------------------------------


def test_report_counts_come_from_checkpoints(pend):
    spec, _, _, reports = pend
    rep = {r.method: r for r in reports}
    K, q = spec.model["n_basis"], 2
    assert rep["d2no"].shared_params == mlp_params([1, 100, 100, K * q])
    assert rep["d2no"].unshared_per_client == {
        "V1": mlp_params([100, 100, K * q]) + q,
        "V2": mlp_params([10, 100, K * q]) + q,
    }
    assert rep["deeponet-m100"].unshared_params == mlp_params([100, 100, K * q]) + q
    assert rep["d2no"].config_hash == ex.config_hash(spec)
    assert rep["d2no"].data_hash == ex.data_hash(spec)


def test_report_aggregate_is_mean_of_replications(pend):
    _, _, _, reports = pend
    for r in reports:
        assert r.replications == 2
        for c in r.clients:
            errs = [e[c] for e in r.errors]
            assert abs(r.mean(c) - sum(errs) / len(errs)) < 1e-12
        per_rep = [sum(e.values()) / len(e) for e in r.errors]
        assert abs(r.mean() - sum(per_rep) / len(per_rep)) < 1e-12
        assert abs(r.std() - np.std(per_rep)) < 1e-12


def test_report_matches_in_memory_evaluation(pend):
    spec, bundle, root, reports = pend
    model, _ = load_model(root / "runs" / "d2no" / "rep000" / "model.ckpt")
    d2no = next(r for r in reports if r.method == "d2no")
    assert ex.model_errors(spec, bundle, "d2no", model) == d2no.errors[0]


def test_work_counter_reported(pend):
    spec, _, _, reports = pend
    # 2 rounds x 2 epochs of 30 samples per client
    model = ex.build_model(spec, "d2no", 0, 2)
    per_sample = sum(p.size for p in model.trunk.params())
    d2no = next(r for r in reports if r.method == "d2no")
    expect = sum(120 * (per_sample + d2no.unshared_per_client[c]) for c in ("V1", "V2"))
    assert d2no.work == [expect, expect]


def test_training_split_error_below_test_error(tmp_path):
    spec = tiny("pendulum-frequency", n_train=40, n_test=40, rounds=4, sync_period=50)
    spec = spec.replace(baselines=[], replications=1)
    bundle = ex.generate_data(spec)
    res = ex.run_method(spec, bundle, "d2no", 0)
    train_err = ex.model_errors(spec, bundle, "d2no", res.model, "train")
    test_err = ex.model_errors(spec, bundle, "d2no", res.model, "test")
    for c in ("V1", "V2"):
        assert train_err[c] < test_err[c]


def test_eval_rejects_grid_mismatch(pend):
    spec, bundle, root, _ = pend
    model, _ = load_model(root / "runs" / "d2no" / "rep000" / "model.ckpt")
    d = spec.to_dict()
    d["clients"][1]["sensors"]["m"] = 12
    with pytest.raises(ValueError, match="sensors"):
        ex.model_errors(ex.ExperimentSpec.from_dict(d), bundle, "d2no", model)


def test_eval_rejects_runs_from_other_data(pend, tmp_path):
    spec, bundle, root, _ = pend
    runs = tmp_path / "runs"
    shutil.copytree(root / "runs", runs)
    meta_path = runs / "d2no" / "rep000" / "run.json"
    meta = json.loads(meta_path.read_text())
    meta["data_hash"] = "0" * 64
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(ex.HashMismatch):
        ex.evaluate_runs(spec, bundle, runs)


def test_report_schema_roundtrip(pend, tmp_path):
    _, _, root, reports = pend
    for r in reports:
        back = ex.read_report(root / "reports" / f"report_{r.method}.json")
        assert back.to_dict() == r.to_dict()
    d = reports[0].to_dict()
    d["schema"] = "d2no-report/999"
    with pytest.raises(ValueError, match="schema"):
        ex.RunReport.from_dict(d)


def test_prediction_samples_csv(pend):
    _, _, root, _ = pend
    lines = (root / "reports" / "predictions_d2no.csv").read_text().splitlines()
    assert lines[0] == "# d2no-csv/1"
    assert lines[1] == "method,client,sample,query,component,prediction,label"
    assert len(lines) == 2 + 2 * 3 * 100 * 2


# -- compare ----------------------------------------------------------------


def test_compare_two_reports(pend, tmp_path):
    _, _, _, reports = pend
    rep = {r.method: r for r in reports}
    text = ex.compare_reports([rep["deeponet-m100"], rep["deeponet-m10"]])
    header = text.splitlines()[1].split()
    assert header == ["metric", "deeponet-m100", "deeponet-m10"]


def test_compare_ratio_columns_and_csv(pend, tmp_path):
    _, _, _, reports = pend
    ex.compare_reports(reports, tmp_path)
    with open(tmp_path / "compare.csv", newline="") as fh:
        assert fh.readline().strip() == "# d2no-csv/1"
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "d2no", "deeponet-m100", "deeponet-m10",
                       "ratio_d2no/deeponet-m100", "ratio_d2no/deeponet-m10"]
    table = {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
    d2no, m100 = reports[0], reports[1]
    assert table["mean_error"][0] == d2no.mean()
    assert table["mean_error"][3] == pytest.approx(d2no.mean() / m100.mean(), rel=1e-15)
    assert table["replications"][:3] == [2.0, 2.0, 2.0]
    curves = (tmp_path / "loss_curves.csv").read_text().splitlines()
    assert curves[:2] == ["# d2no-csv/1", "method,replication,client,step,loss"]
    assert len(curves) > 10
    assert (tmp_path / "compare.txt").read_text().startswith("experiment: pendulum-frequency")


def test_compare_burgers_ratio_column(tmp_path):
    spec = tiny("burgers-peaks", n_train=6, n_test=4).replace(replications=1)
    bundle = ex.generate_data(spec, tmp_path / "data")
    ex.train_all(spec, bundle, tmp_path / "runs")
    reports = ex.evaluate_runs(spec, bundle, tmp_path / "runs")
    text = ex.compare_reports(reports)
    assert "ratio_d2no/deeponet-uniform30" in text.splitlines()[1]


def test_compare_rejects_mixed_experiments(pend):
    _, _, _, reports = pend
    other = ex.RunReport.from_dict({**reports[0].to_dict(), "experiment": "burgers-peaks"})
    with pytest.raises(ValueError, match="different experiments"):
        ex.compare_reports([reports[0], other])
    with pytest.raises(ValueError):
        ex.compare_reports([])


# -- CLI --------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    spec = tiny("pendulum-unbalanced", n_train=8, n_test=4)
    ex.save_spec(tmp_path / "spec.json", spec)
    s = str(tmp_path / "spec.json")
    assert main(["gen-data", "--spec", s, "--out", str(tmp_path / "data")]) == 0
    assert main(["train", "--spec", s, "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "runs"), "--replications", "1"]) == 0
    assert [p.name for p in (tmp_path / "runs" / "d2no").iterdir()] == ["rep000"]
    assert main(["eval", "--runs", str(tmp_path / "runs"), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "rep")]) == 0
    assert main(["compare", str(tmp_path / "rep" / "report_d2no.json"),
                 "--out", str(tmp_path / "cmp")]) == 0
    out = capsys.readouterr().out
    assert "d2no: mean error" in out and "experiment: pendulum-unbalanced" in out
    assert (tmp_path / "cmp" / "compare.csv").exists()
    # the saved spec carries the --replications override
    assert ex.load_spec(tmp_path / "runs" / "spec.json").replications == 1


def test_cli_hash_mismatch_exit_code(tmp_path, capsys):
    spec = tiny("pendulum-unbalanced", n_train=4, n_test=2)
    ex.save_spec(tmp_path / "spec.json", spec)
    s = str(tmp_path / "spec.json")
    assert main(["gen-data", "--spec", s, "--out", str(tmp_path / "data"), "--seed", "4"]) == 0
    capsys.readouterr()
    code = main(["train", "--spec", s, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "HashMismatch" and err["command"] == "train"
    assert not (tmp_path / "r").exists()
    # the seed override makes the spec match the data again
    assert main(["train", "--spec", s, "--data", str(tmp_path / "data"), "--out",
                 str(tmp_path / "r"), "--seed", "4", "--replications", "1",
                 "--mode", "lockstep", "--methods", "d2no"]) == 0
    meta = json.loads((tmp_path / "r" / "d2no" / "rep000" / "run.json").read_text())
    assert meta["seed"] == 4 and meta["config"]["mode"] == "lockstep"


def test_cli_error_records(tmp_path, capsys):
    assert main(["gen-data", "--spec", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["command"] == "gen-data"
    spec = tiny("pendulum-unbalanced", n_train=4, n_test=2)
    ex.save_spec(tmp_path / "spec.json", spec)
    main(["gen-data", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "d")])
    capsys.readouterr()
    code = main(["train", "--spec", str(tmp_path / "spec.json"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r"), "--methods", "deeponet-m7"])
    assert code == 1 and "unknown methods" in json.loads(capsys.readouterr().err)["message"]
    with pytest.raises(SystemExit):
        main(["train", "--spec", "x"])
