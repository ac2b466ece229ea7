import csv
import json

import numpy as np
import pytest

from oufactor import io
from oufactor.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, _workers, build_parser, main
from oufactor.selection import count_free_params
from oufactor.simulation import TRUTHS, SimDesign, generate_dataset

SPEC2 = {"outcomes": ["y1", "y2", "y3", "y4"], "factors": ["f1", "f2"],
         "loading_map": {"y1": "f1", "y2": "f1", "y3": "f2", "y4": "f2"}, "sign_anchors": {"f1": "y1", "f2": "y4"}}
SPEC1 = {"outcomes": ["y1", "y2", "y3", "y4"], "factors": ["f1"],
         "loading_map": {"y1": "f1", "y2": "f1", "y3": "f1", "y4": "f1"}, "sign_anchors": {"f1": "y1"}}


@pytest.fixture
def files(tmp_path):
    s1, s2 = tmp_path / "s1.json", tmp_path / "s2.json"
    s1.write_text(json.dumps(SPEC1))
    s2.write_text(json.dumps(SPEC2))
    return tmp_path, s1, s2


@pytest.fixture(scope="module")
def small_fit(tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    (d / "s2.json").write_text(json.dumps(SPEC2))
    assert main(["simulate", "--setting", "2", "--n-subjects", "40", "--seed", "3", "--out", str(d / "d.csv")]) == 0
    rc = main(["fit", "--data", str(d / "d.csv"), "--spec", str(d / "s2.json"), "--out", str(d / "fit.json"),
               "--seed", "1", "--draws", "200"])
    assert rc == EXIT_OK
    return d


def test_simulate_is_byte_identical_and_round_trips(files):
    d, _, _ = files
    for name in ("a.csv", "b.csv"):
        assert main(["simulate", "--setting", "1", "--n-subjects", "25", "--seed", "7", "--out", str(d / name)]) == 0
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()
    assert (d / "a.truth.json").read_bytes() == (d / "b.truth.json").read_bytes()
    parsed = io.read_panel_csv(d / "a.csv")
    direct = generate_dataset(SimDesign(TRUTHS["setting1"].params, N=25, seed=7))
    assert len(parsed) == 25
    for a, b in zip(parsed, direct):
        assert a.subject_id == b.subject_id
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.Y, b.Y)
        assert 10 <= a.n <= 20
    truth = json.loads((d / "a.truth.json").read_text())
    assert set(truth) >= {"generating", "target", "outcomes", "loading_map"}
    assert truth["generating"]["theta"] == [[1.0, 0.6], [4.0, 5.0]]


def test_simulate_minimal_and_truth_file(files):
    d, _, s2 = files
    assert main(["simulate", "--setting", "2", "--n-subjects", "1", "--seed", "1", "--out", str(d / "one.csv")]) == 0
    assert len(io.read_panel_csv(d / "one.csv")) == 1
    doc = dict(SPEC2, truth={"loadings": [1, 1, 1, 1], "var_u": [1] * 4, "var_eps": [1] * 4,
                             "theta": [[1, 0], [0, 1]], "sigma": [1, 1]})
    (d / "t.json").write_text(json.dumps(doc))
    assert main(["simulate", "--truth-file", str(d / "t.json"), "--n-subjects", "3", "--seed", "2",
                 "--out", str(d / "t.csv")]) == 0
    assert len(io.read_panel_csv(d / "t.csv")) == 3


@pytest.mark.parametrize("argv", [
    ["simulate", "--setting", "9", "--out", "x.csv"],
    ["simulate", "--out", "x.csv"],
    ["simulate", "--setting", "1", "--truth-file", "t.json", "--out", "x.csv"],
    ["simulate", "--setting", "1", "--n-subjects", "0", "--out", "x.csv"],
    ["replicate", "recovery", "--setting", "2", "--reps", "0", "--out", "x.csv"],
    ["replicate", "selection", "--setting", "2", "--reps", "-3", "--out", "x.csv"],
    ["frobnicate"],
    [],
])
def test_usage_errors(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_fit_outputs(small_fit):
    doc = json.loads((small_fit / "fit.json").read_text())
    assert doc["reason"] in ("param-tol", "loglik-tol", "max-iters")
    assert len(doc["theta_cov"]) == 4 and doc["sigma_ci"]["draws"] == 200
    assert doc["config"]["seed"] == 1
    with open(small_fit / "fit.decay.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["gap", "factor_i", "factor_j", "correlation", "lower", "upper"]
    assert len(rows) == 200 * 4
    for r in rows:
        if r["gap"] == "0" and r["factor_i"] == r["factor_j"]:
            assert float(r["correlation"]) == 1.0
        assert float(r["lower"]) <= float(r["correlation"]) <= float(r["upper"])


def test_fit_is_deterministic(small_fit):
    d = small_fit
    rc = main(["fit", "--data", str(d / "d.csv"), "--spec", str(d / "s2.json"), "--out", str(d / "again.json"),
               "--seed", "1", "--draws", "200"])
    assert rc == 0
    assert (d / "again.json").read_bytes() == (d / "fit.json").read_bytes()
    assert (d / "again.decay.csv").read_bytes() == (d / "fit.decay.csv").read_bytes()


def test_dense_and_structured_paths_agree(small_fit):
    d = small_fit
    out = {}
    for flag in ([], ["--dense-likelihood"]):
        path = d / f"p{len(flag)}.json"
        assert main(["fit", "--data", str(d / "d.csv"), "--spec", str(d / "s2.json"), "--out", str(path),
                     "--no-bootstrap", "--max-iters", "2", *flag]) == 0
        out[len(flag)] = json.loads(path.read_text())["neg2_loglik"]
    assert out[1] == pytest.approx(out[0], rel=1e-8)


def test_fit_errors(files):
    d, s1, s2 = files
    (d / "empty.csv").write_text("")
    assert main(["fit", "--data", str(d / "empty.csv"), "--spec", str(s2), "--out", str(d / "f.json")]) == EXIT_USAGE
    (d / "k3.csv").write_text("subject_id,time,y1,y2,y3\ns1,0,1,2,3\n")
    assert main(["fit", "--data", str(d / "k3.csv"), "--spec", str(s2), "--out", str(d / "f.json")]) == EXIT_USAGE
    (d / "k5.csv").write_text("subject_id,time,y1,y2,y3,y4,y5\ns1,0,1,2,3,4,5\n")
    assert main(["fit", "--data", str(d / "k5.csv"), "--spec", str(s2), "--out", str(d / "f.json")]) == EXIT_USAGE
    rows = "".join(f"s{i},{t},0,0,0,0\n" for i in range(5) for t in range(3))
    (d / "zero.csv").write_text("subject_id,time,y1,y2,y3,y4\n" + rows)
    assert main(["fit", "--data", str(d / "zero.csv"), "--spec", str(s2), "--out", str(d / "f.json")]) == EXIT_NUMERICAL


def test_empty_file_error_names_file(files, capsys):
    d, _, s2 = files
    (d / "empty.csv").write_text("")
    main(["fit", "--data", str(d / "empty.csv"), "--spec", str(s2), "--out", str(d / "f.json")])
    assert "empty.csv" in capsys.readouterr().err


def test_select(small_fit, files):
    d, s1, _ = files
    s2 = small_fit / "s2.json"
    out = d / "sel.json"
    assert main(["select", "--data", str(small_fit / "d.csv"), "--spec", str(s1), str(s2), "--out", str(out),
                 "--max-iters", "5"]) == 0
    rep = json.loads(out.read_text())
    assert [(c["p"], c["q"]) for c in rep["candidates"]] == [(1, 14), (2, 18)]
    assert (14, 1) == count_free_params(io.read_spec_json(s1).spec)
    csv_out = d / "sel.csv"
    assert main(["select", "--data", str(small_fit / "d.csv"), "--spec", str(s1), "--out", str(csv_out),
                 "--max-iters", "5"]) == 0
    assert csv_out.read_text().splitlines()[0] == "p,q,neg2_loglik,aic,bic,converged,reason"
    other = dict(SPEC1, outcomes=["y1", "y2", "y3", "z"], loading_map={"y1": "f1", "y2": "f1", "y3": "f1", "z": "f1"})
    (d / "other.json").write_text(json.dumps(other))
    assert main(["select", "--data", str(small_fit / "d.csv"), "--spec", str(s1), str(d / "other.json"),
                 "--out", str(out)]) == EXIT_USAGE


def test_autocorr(small_fit, tmp_path, caplog):
    out = tmp_path / "ac.csv"
    assert main(["autocorr", "--fit", str(small_fit / "fit.json"), "--out", str(out), "--max-gap", "4",
                 "--n-gaps", "9", "--draws", "100", "--seed", "0"]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 9 * 4
    assert all(float(r["lower"]) <= float(r["correlation"]) <= float(r["upper"]) for r in rows)

    doc = json.loads((small_fit / "fit.json").read_text())
    doc.update(outcomes=["y1"], factors=["f"], loading_map={"y1": "f"}, sign_anchors={"f": "y1"}, theta_cov=None,
               params={"loadings": [1.0], "var_u": [1.0], "var_eps": [1.0], "theta": [[0.7]], "sigma": [1.4 ** 0.5]})
    (tmp_path / "uni.json").write_text(json.dumps(doc))
    with caplog.at_level("WARNING"):
        assert main(["autocorr", "--fit", str(tmp_path / "uni.json"), "--out", str(out), "--max-gap", "2",
                     "--n-gaps", "5"]) == 0
    assert "without bands" in caplog.text
    rows = list(csv.DictReader(open(out)))
    assert list(rows[0]) == ["gap", "factor_i", "factor_j", "correlation"]
    for r in rows:
        assert float(r["correlation"]) == pytest.approx(np.exp(-0.7 * float(r["gap"])), rel=1e-12)


def test_replicate_recovery_is_reproducible(tmp_path):
    outs = []
    for name in ("r1.csv", "r2.csv"):
        path = tmp_path / name
        assert main(["replicate", "recovery", "--setting", "2", "--reps", "2", "--n-subjects", "15", "--seed", "4",
                     "--max-iters", "3", "--no-bootstrap", "--out", str(path)]) == 0
        outs.append(path.read_text())
    assert outs[0] == outs[1]
    assert outs[0].startswith("parameter,target,mean,bias")


def test_threads(monkeypatch):
    args = build_parser().parse_args(["--threads", "3", "autocorr", "--fit", "f", "--out", "o"])
    assert _workers(args) == 3
    monkeypatch.setenv("OUFACTOR_THREADS", "2")
    assert _workers(build_parser().parse_args(["autocorr", "--fit", "f", "--out", "o"])) == 2
