from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest

from wignerlab.ensembles import AtomicDistribution
from wignerlab.harness import (
    EXIT_ASSERT,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    all_passed,
    columns_for,
    fit_slope,
    format_rows,
    main,
    make_observable,
    run_experiment,
    run_local_law,
)


def _cfg(**kw):
    base = {"experiment": "local-law", "N_list": [8], "samples": 1, "chain": {"k": 1, "z": ["10j"]}}
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def _data_rows(text: str):
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def test_smoke_one_row_per_grid_point():
    cfg = _cfg(chain={"k": 1, "z": ["10j", "0.5+1j"]})
    rows = run_local_law(cfg)
    data = [r for r in rows if isinstance(r.sample, int)]
    assert len(data) == 2
    assert {r.z for r in data} == {(10j,), (0.5 + 1j,)}


def test_csv_header_and_columns():
    cfg = _cfg()
    text = format_rows(run_experiment(cfg), cfg)
    first, header = text.splitlines()[:2]
    assert first.startswith("# ")
    meta = json.loads(first[2:])
    assert meta["experiment"] == "local-law" and meta["seed"] == 0
    assert tuple(header.split(",")) == columns_for("local-law")
    assert header.startswith("experiment,N,sample,z,ell,ell_hat,rho,hs_prod,raw,normalized,predicted,wall_time_ms,seed")


def test_jsonl_format():
    cfg = _cfg(format="jsonl")
    lines = format_rows(run_experiment(cfg), cfg).splitlines()
    assert "metadata" in json.loads(lines[0])
    assert json.loads(lines[1])["experiment"] == "local-law"


@pytest.mark.parametrize("patch, key", [
    ({"N_list": []}, "N_list"),
    ({"N_list": [16, 8]}, "N_list"),
    ({"samples": 0}, "samples"),
    ({"experiment": "nope"}, "experiment"),
    ({"threads": 0}, "threads"),
    ({"chain": {"k": 9, "z": ["1j"]}}, "k"),
    ({"chain": {"k": 1, "bogus": 1}}, "bogus"),
    ({"chain": {"k": 1, "energies": [0.0], "eta_rule": "eta_of_E", "epsilon": 2}}, "eta_rule"),
])
def test_config_errors_name_the_key(patch, key):
    with pytest.raises(ConfigError, match=key):
        _cfg(**patch)


def test_config_errors_carry_line_numbers():
    text = '{\n  "experiment": "local-law",\n  "N_list": [8],\n  "samples": 0\n}'
    with pytest.raises(ConfigError, match=r"line 4: samples"):
        ExperimentConfig.from_json(text)


def test_observable_recipes():
    rng = np.random.default_rng(0)
    A = make_observable("random-traceless", 32, rng)
    assert A.traceless and A.hs_norm == pytest.approx(1.0)
    P = make_observable("rank-r-projection-traceless", 32, rng, rank=3)
    assert P.traceless
    assert np.allclose(P.data, P.data.conj().T)
    assert make_observable("diagonal-pattern", 32, rng).traceless
    assert not make_observable("random-general", 32, rng).traceless
    with pytest.raises(ConfigError):
        make_observable("unknown", 32, rng)


def test_fit_slope_exact_power():
    Ns = [128, 256, 512, 1024]
    assert fit_slope(Ns, [[n ** -0.5, 2 * n ** -0.5] for n in Ns]) == pytest.approx(-0.5)


def test_cli_exit_codes(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "ward", "N_list": [16], "samples": 2, "chain": {"k": 1, "z": ["0.1+0.05j"]}}))
    assert main(["ward", "--config", str(cfg), "--out", str(tmp_path / "o.csv"), "--acceptance"]) == EXIT_OK
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "ward", "N_list": [16], "samples": -1}')
    assert main(["ward", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["local-law", "--config", str(cfg)]) == EXIT_CONFIG  # wrong experiment tag
    strict = tmp_path / "strict.json"
    strict.write_text(json.dumps({"experiment": "local-law", "N_list": [16], "samples": 4,
                                  "chain": {"k": 1, "z": ["0.1+0.05j"]}, "params": {"xi": -5}}))
    assert main(["local-law", "--config", str(strict), "--out", str(tmp_path / "s.csv"), "--acceptance"]) == EXIT_ASSERT
    axis = tmp_path / "axis.json"
    axis.write_text(json.dumps({"experiment": "flow-drift", "N_list": [16], "samples": 1,
                                "chain": {"k": 2, "imag": "all", "z": ["2+1e-9j"]}, "params": {"T": 0.5}}))
    assert main(["flow", "--config", str(axis), "--out", str(tmp_path / "f.csv")]) == EXIT_NUMERIC


@pytest.mark.parametrize("sub, extra", [
    ("local-law", {"chain": {"k": 2, "imag": "all", "energies": [0.0, 2.0], "eta_rule": "eta_of_E", "epsilon": 0.3, "closing": "adjoint"}}),
    ("eth", {"N_list": [16, 32, 128], "samples": 3}),
    ("gft", {"N_list": [32], "samples": 3, "ensemble": {"atomic": {"m02": 0.3, "m03": 0.4, "m12": 0.2}},
             "chain": {"k": 2, "imag": "all", "energies": [0.0], "eta": 0.2}}),
    ("flow", {"N_list": [32], "samples": 3, "chain": {"k": 2, "imag": "all", "energies": [0.0], "eta": 0.2}, "params": {"T": 0.3}}),
])
def test_output_independent_of_thread_count(tmp_path, sub, extra):
    tag = {"local-law": "local-law", "eth": "eth-scaling", "gft": "gft-compare", "flow": "flow-drift"}[sub]
    cfg = {"experiment": tag, "N_list": [32, 64], "samples": 4, "seed": 7}
    cfg.update(extra)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / f"o{threads}.csv"
        assert main([sub, "--config", str(path), "--out", str(out), "--threads", threads]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_seed_changes_output(tmp_path):
    outs = []
    for seed in ("1", "2"):
        out = tmp_path / f"o{seed}.csv"
        main(["ward", "--seed", seed, "--out", str(out)])
        outs.append(out.read_text())
    assert outs[0] != outs[1]


def test_timing_sidecar(tmp_path):
    out = tmp_path / "o.csv"
    assert main(["ward", "--out", str(out), "--timing"]) == EXIT_OK
    side = (tmp_path / "o.csv.timing.csv").read_text().splitlines()
    assert side[0] == "N,sample,wall_time_ms" and len(side) > 1
    rows = _data_rows(out.read_text())
    assert all(r["wall_time_ms"] == "" for r in rows)


def test_mcalc_command(tmp_path, capsys):
    assert main(["mcalc", "--z", "0.1+0.2j,0.3+0.4j", "--imag", "0,1", "--N", "64"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert complex(out["m_det_avg"].replace("j", "j")) == pytest.approx(complex(out["leading_term"]))
    assert main(["mcalc", "--z", "0.1"]) == EXIT_CONFIG


def test_moments_command(tmp_path):
    out = tmp_path / "law.txt"
    assert main(["moments", "--m02", "0.2", "--m03", "0.1", "--m12", "0.3", "--out", str(out)]) == EXIT_OK
    law = AtomicDistribution.from_text(out.read_text())
    assert abs(law.moment(1, 2) - 0.3) < 1e-10
    assert main(["moments", "--m02", "1.5", "--m03", "0", "--m12", "0"]) == EXIT_CONFIG


def test_quantiles_command(tmp_path):
    out = tmp_path / "q.csv"
    assert main(["quantiles", "--N", "4", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "i,gamma" and len(lines) == 5
    assert float(lines[2].split(",")[1]) == pytest.approx(0.0, abs=1e-14)


def test_global_law_rejects_points_near_spectrum():
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig.from_dict({"experiment": "global-law", "N_list": [16], "samples": 1,
                                                   "chain": {"k": 1, "z": ["0.1+0.01j"]}}))


@pytest.mark.xfail(strict=True, reason="finite-N constant exceeds the N^0.1 slack at N=256")
def test_k1_bulk_local_law_proxy():
    cfg = ExperimentConfig.from_dict({"experiment": "local-law", "N_list": [256], "samples": 50, "seed": 0, "threads": "auto",
                                      "chain": {"k": 1, "energies": [0.0], "eta_rule": "power", "eta_power": 0.6}})
    assert all_passed(run_local_law(cfg))
