import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssi_lab.errors import ConfigError, NumericalError
from ssi_lab.harness import (
    SCHEMAS,
    ExperimentSpec,
    RecordStore,
    RunRecord,
    derive_seed,
    emit_plot_data,
    fit_loglog,
    load_spec,
    run_experiment,
    spec_hash,
)
from ssi_lab.harness.experiments import gain_learning_rates, half_crossing

SMALL_SGD = {"d": 60, "L": 2, "t_max": 3000, "replicas": 3, "lr": 0.05, "stop": "none"}
SMALL_GAIN = {"d": 100, "L": [2, 4], "replicas": 2, "t_max": 400_000, "policy": "constant", "gamma0": 0.02}


def _spec(kind, tmp_path, name="out", **params):
    return load_spec(kind, out=tmp_path / name, overrides=params)


# hashing and seeds


def test_spec_hash_ignores_ordering_and_run_options(tmp_path):
    a = ExperimentSpec("ode", load_spec("ode", out=tmp_path / "a").params, tmp_path / "a", seed=3)
    reordered = dict(reversed(list(a.params.items())))
    b = ExperimentSpec("ode", reordered, tmp_path / "b", seed=3, workers=4, format="json")
    assert spec_hash(a) == spec_hash(b)
    c = ExperimentSpec("ode", a.params, tmp_path / "a", seed=4)
    assert spec_hash(a) != spec_hash(c)
    d = load_spec("ode", out=tmp_path / "a", seed=3, overrides={"kappa": 2.0})
    assert spec_hash(a) != spec_hash(d)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 10**6))
def test_derive_seed_is_deterministic_and_bounded(base, index):
    s = derive_seed(base, index)
    assert s == derive_seed(base, index)
    assert 0 <= s < 2**63
    assert s != derive_seed(base, index + 1)


# records and resume


def test_record_round_trip_and_torn_lines(tmp_path):
    store = RecordStore(tmp_path, "h")
    rec = RunRecord("h", "r=0000", 5, {"tau": 12, "m": 0.5}, (), 0.1)
    store.add(rec)
    with pytest.raises(ConfigError):
        store.add(RunRecord("other", "r=0001", 6, {}))
    with pytest.raises(ConfigError):
        store.add(RunRecord("h", "r=0002", 6, {}, ("missing.npz",)))
    with open(tmp_path / "records.jsonl", "a") as fh:
        fh.write('{"spec_hash": "h", "run_id": "r=00')
    again = RecordStore(tmp_path, "h")
    assert len(again) == 1 and again.records["r=0000"] == rec
    assert len(RecordStore(tmp_path, "other")) == 0


def test_resume_reruns_only_missing_runs(tmp_path):
    spec = _spec("sgd-run", tmp_path, **SMALL_SGD)
    first = run_experiment(spec)
    path = spec.out / "records.jsonl"
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    # drop one record and the trajectory of another: both runs are redone
    path.write_text("\n".join(lines[:2]) + "\n")
    rec1 = RunRecord.from_json(lines[1])
    (spec.out / rec1.files[0]).unlink()
    second = run_experiment(spec)
    assert second.tables == first.tables
    assert len(path.read_text().splitlines()) == 4
    third = run_experiment(spec)
    assert third.tables == first.tables
    assert len(path.read_text().splitlines()) == 4


def test_serial_and_parallel_tables_are_identical(tmp_path):
    outs = []
    for workers in (1, 2):
        spec = load_spec("gain", out=tmp_path / f"w{workers}", workers=workers, overrides=SMALL_GAIN)
        res = run_experiment(spec)
        outs.append([emit_plot_data(rows, fig, spec.out).read_bytes() for fig, rows in sorted(res.tables.items())])
    assert outs[0] == outs[1]


# emission


def test_emit_schema_and_idempotence(tmp_path):
    rows = [{"d": 100, "m0": 0.1, "tau": 1.5}, {"d": 1000, "m0": 1 / math.sqrt(1000), "tau": None}]
    p = emit_plot_data(rows, "ode", tmp_path)
    first = p.read_bytes()
    assert first.decode().splitlines()[0] == ",".join(SCHEMAS["ode"])
    assert emit_plot_data(rows, "ode", tmp_path).read_bytes() == first
    assert first.decode().splitlines()[2].endswith(",")
    j = emit_plot_data([dict(rows[0], tau=math.inf)], "ode", tmp_path, "json")
    assert json.loads(j.read_text()) == [{"d": 100, "m0": 0.1, "tau": None}]


def test_emit_errors_write_nothing(tmp_path):
    with pytest.raises(ConfigError):
        emit_plot_data([], "ode", tmp_path)
    with pytest.raises(ConfigError):
        emit_plot_data([{"d": 1}], "ode", tmp_path)
    with pytest.raises(ConfigError):
        emit_plot_data([{"x": 1}], "figure-99", tmp_path)
    with pytest.raises(ConfigError):
        emit_plot_data([{"d": 1, "m0": 0.1, "tau": 1.0}], "ode", tmp_path, "xml")
    assert list(tmp_path.iterdir()) == []


# configuration


def test_load_spec_from_yaml(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("kind: ode\nseed: 9\nformat: json\nparams:\n  d: [100, 200]\n  kappa: 2\n")
    spec = load_spec("ode", cfg, out=tmp_path / "o")
    assert spec.seed == 9 and spec.format == "json" and spec.params["d"] == [100, 200]
    assert spec.params["kappa"] == 2.0 and spec.params["L"] == 2
    flat = tmp_path / "f.yaml"
    flat.write_text("d: 500\nL: [2]\nreplicas: 1\n")
    assert load_spec("gain", flat, out=tmp_path / "g", seed=1).params["d"] == 500


@pytest.mark.parametrize(
    "text",
    [
        "kind: gain\n",
        "bogus: 1\n",
        "d: [}\n",
        "- 1\n- 2\n",
        "d: []\n",
        "kappa: -1\n",
        "target: {type: cubic}\n",
        "eta: 1.5\n",
        "params: {d: [10]}\nextra: 1\n",
    ],
)
def test_config_errors(tmp_path, text):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    with pytest.raises(ConfigError):
        load_spec("ode", cfg, out=tmp_path / "o")


def test_option_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_spec("ode", tmp_path / "missing.yaml", out=tmp_path / "o")
    with pytest.raises(ConfigError):
        load_spec("ode", out=tmp_path / "o", workers=0)
    with pytest.raises(ConfigError):
        load_spec("ode", out=tmp_path / "o", seed=-1)
    with pytest.raises(ConfigError):
        load_spec("figure", out=tmp_path / "o")
    (tmp_path / "file").write_text("")
    with pytest.raises(ConfigError):
        load_spec("ode", out=tmp_path / "file" / "sub")
    with pytest.raises(ConfigError):
        load_spec("gain", out=tmp_path / "o", overrides={"policy": "fastest"})
    with pytest.raises(ConfigError):
        load_spec("phase", out=tmp_path / "o", overrides={"omega": [1.5]})


# drivers


def test_fit_loglog_and_half_crossing():
    x = np.array([2, 4, 8, 16])
    fit = fit_loglog(x, 3 * x**2.0)
    assert fit["slope"] == pytest.approx(2) and fit["stderr"] == pytest.approx(0, abs=1e-12)
    assert fit_loglog(x, [1, math.inf, math.nan, -1])["slope"] is None
    assert half_crossing([0, 1, 2], [1.0, 0.75, 0.25]) == pytest.approx(1.5)
    assert half_crossing([0, 1], [0.4, 0.2]) is None


def test_sie_driver(tmp_path):
    res = run_experiment(_spec("sie", tmp_path))
    assert [r["sie"] for r in res.tables["sie"]] == [1, 2, 4, 5]


def test_landscape_driver(tmp_path):
    res = run_experiment(_spec("landscape", tmp_path, omega=[0.0, 1.0], n_theta=36, transition=False))
    assert [r["label"] for r in res.tables["phase-diagram"]] == ["UniqueSemantic", "UniquePositional"]
    assert len(res.tables["landscape"]) == 72


def test_ode_driver_log_fit(tmp_path):
    res = run_experiment(_spec("ode", tmp_path))
    taus = [r["tau"] for r in res.tables["ode"]]
    assert taus == sorted(taus)
    assert res.summary["log_fit"]["r2"] > 0.98


def test_phase_driver(tmp_path):
    res = run_experiment(_spec("phase", tmp_path, omega=[0.3, 0.9], replicas=4, d=200))
    probs = {r["omega"]: r["p_semantic"] for r in res.tables["phase"]}
    assert probs[0.3] == 1.0 and probs[0.9] == 0.0
    assert {r["label"] for r in res.tables["phase-diagram"]} == {"UniqueSemantic", "UniquePositional"}


def test_gain_learning_rates():
    p = load_spec("gain", out="/tmp/unused-gain").params
    (t2, u2), (t8, u8) = gain_learning_rates(p, 2), gain_learning_rates(p, 8)
    assert t8 / t2 == pytest.approx(4) and u8 == pytest.approx(u2)
    p = dict(p, policy="over-scaled", gamma0=0.2)
    assert gain_learning_rates(p, 32) == (0.2, pytest.approx(6.4))


def test_gain_censoring(tmp_path):
    with pytest.raises(NumericalError):
        run_experiment(_spec("gain", tmp_path, name="a", d=100, L=[2], replicas=2, t_max=10))
    res = run_experiment(_spec("gain", tmp_path, name="b", d=100, L=[2], replicas=2, t_max=10, policy="constant"))
    assert res.tables["gain"][0]["gain"] != res.tables["gain"][0]["gain"]  # nan: tied never recovered
    assert res.summary["censored"] == {"2/tied": 2, "2/untied": 2}


def test_over_scaled_untied_runs_are_censored(tmp_path):
    spec = _spec("gain", tmp_path, L=[2, 32], replicas=2, t_max=300_000, policy="over-scaled", gamma0=0.2,
                 target={"type": "linear"})
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = run_experiment(spec)
    big = res.tables["gain"][1]
    assert math.isfinite(big["tau_tied"]) and math.isinf(big["tau_untied"]) and math.isinf(big["gain"])
    assert res.summary["censored"]["32/untied"] == 2
