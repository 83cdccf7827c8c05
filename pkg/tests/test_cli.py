"""Command-line interface tests: parsing, schema errors, runs, manifests."""

import json
from pathlib import Path

import numpy as np
import pytest

from invariantkit import import_sdpa
from invariantkit.cli import (
    ProblemError,
    _parse_grid,
    bundled_problem_path,
    main,
    parse_problem,
    serialize_problem,
)
from invariantkit.sos import Certificate, certificate_to_json
from invariantkit.polynomials import Polynomial


EX1 = bundled_problem_path("example1")


def load_doc():
    return json.loads(EX1.read_text())


def write_doc(tmp_path, doc, name="prob.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_bundled_problems_parse():
    for name in ("example1", "example2", "example3"):
        system, defaults = parse_problem(bundled_problem_path(name))
        assert system.name == name
        assert defaults["state_box"].shape == (system.state_dim, 2)


def test_serialize_parse_round_trip(tmp_path):
    system, defaults = parse_problem(EX1)
    box = defaults.pop("state_box")
    text = serialize_problem(system, box, defaults)
    p = tmp_path / "round.json"
    p.write_text(text)
    system2, defaults2 = parse_problem(p)
    assert system2.x0_constraints == system.x0_constraints
    assert system2.regions == system.regions
    assert system2.dynamics == system.dynamics
    assert system2.pert_constraints == system.pert_constraints
    np.testing.assert_array_equal(system2.pert_box, system.pert_box)
    np.testing.assert_array_equal(defaults2["state_box"], box)
    # canonical form is stable under a second round trip
    assert serialize_problem(system2, defaults2.pop("state_box"), defaults2) == text


def test_missing_required_field_names_it(tmp_path):
    doc = load_doc()
    del doc["dynamics"]
    with pytest.raises(ProblemError) as err:
        parse_problem(write_doc(tmp_path, doc))
    assert "dynamics" in str(err.value)


def test_schema_error_carries_json_pointer(tmp_path):
    doc = load_doc()
    doc["regions"][0]["constraints"][0]["comparison"] = ">="
    with pytest.raises(ProblemError) as err:
        parse_problem(write_doc(tmp_path, doc))
    assert "/regions/0/constraints/0/comparison" in str(err.value)


def test_unknown_key_rejected(tmp_path):
    doc = load_doc()
    doc["extra"] = 1
    with pytest.raises(ProblemError) as err:
        parse_problem(write_doc(tmp_path, doc))
    assert "extra" in str(err.value)


def test_state_box_length_checked(tmp_path):
    doc = load_doc()
    doc["state_box"] = doc["state_box"][:1]
    with pytest.raises(ProblemError) as err:
        parse_problem(write_doc(tmp_path, doc))
    assert "/state_box" in str(err.value)


def test_invalid_json_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ProblemError) as err:
        parse_problem(p)
    assert "not valid JSON" in str(err.value)


def test_parse_grid_spellings():
    np.testing.assert_array_equal(_parse_grid("100", 2), [100, 100])
    np.testing.assert_array_equal(_parse_grid("30x40", 2), [30, 40])
    np.testing.assert_array_equal(_parse_grid("20^7", 7), [20] * 7)
    with pytest.raises(ValueError):
        _parse_grid("30x40", 3)


def test_missing_problem_file_exits_two(tmp_path, capsys):
    code = main(["simulate", str(tmp_path / "nope.json")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_simulate_outputs_and_determinism(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    argv = ["simulate", str(EX1), "--grid", "9", "--pert-grid", "3",
            "--horizon", "10"]
    assert main(argv + ["-o", str(out1)]) == 0
    assert main(argv + ["-o", str(out2)]) == 0
    mask1 = (out1 / "example1_mask.csv").read_bytes()
    mask2 = (out2 / "example1_mask.csv").read_bytes()
    assert mask1 == mask2  # byte-identical reruns
    manifest = json.loads((out1 / "example1_simulate_manifest.json").read_text())
    assert manifest["parameters"]["grid"] == [9, 9]
    assert "example1_mask.csv" in manifest["outputs"]
    import hashlib

    assert manifest["outputs"]["example1_mask.csv"] == hashlib.sha256(mask1).hexdigest()


def test_value_iter_outputs(tmp_path, capsys):
    out = tmp_path / "vi"
    code = main([
        "value-iter", str(EX1), "-o", str(out),
        "--grid", "21", "--pert-grid", "3",
    ])
    assert code == 0
    assert "converged" in capsys.readouterr().out
    for suffix in ("field", "convergence", "contours"):
        assert (out / f"example1_{suffix}.csv").exists()
    field = (out / "example1_field.csv").read_text().splitlines()
    assert field[0] == "x1,x2,value"
    assert len(field) == 1 + 21 * 21


def test_value_iter_non_convergence_exits_one(tmp_path, capsys):
    out = tmp_path / "vi"
    code = main([
        "value-iter", str(EX1), "-o", str(out),
        "--grid", "21", "--pert-grid", "3", "--alpha", "0.9",
        "--max-iters", "2", "--eps", "1e-16",
    ])
    assert code == 1
    assert "NOT converged" in capsys.readouterr().out


def test_node_budget_refusal_exits_one(tmp_path, capsys):
    ex3 = bundled_problem_path("example3")
    code = main([
        "value-iter", str(ex3), "-o", str(tmp_path / "big"), "--grid", "20^7",
    ])
    assert code == 1
    assert "budget" in capsys.readouterr().err
    # refusal leaves no partial outputs behind
    assert not list((tmp_path / "big").glob("*")) or not (tmp_path / "big").exists()


def test_export_sdpa_round_trips(tmp_path):
    out = tmp_path / "sdpa"
    code = main([
        "export-sdpa", str(EX1), "-o", str(out),
        "--du", "2", "--ds", "2", "--dsp", "2",
    ])
    assert code == 0
    prob = import_sdpa((out / "example1.dat-s").read_text())
    assert prob.m > 0
    manifest = json.loads((out / "example1_export-sdpa_manifest.json").read_text())
    assert manifest["parameters"]["du"] == 2


def test_verify_accepts_positive_certificate(tmp_path, capsys):
    # u == 1 has an empty sublevel set: vacuously invariant, exit 0
    cert = Certificate(
        u=Polynomial.constant(2, 1.0), multipliers={}, alpha=1.0, R=2.541
    )
    cpath = tmp_path / "cert.json"
    cpath.write_text(certificate_to_json(cert))
    code = main([
        "verify", str(EX1), "--certificate", str(cpath), "--samples", "2000",
    ])
    assert code == 0
    assert "set_samples=0" in capsys.readouterr().out


def test_verify_rejects_unsound_certificate(tmp_path, capsys):
    # u == -1 claims the whole ball, which leaves X0: containment fails
    cert = Certificate(
        u=Polynomial.constant(2, -1.0), multipliers={}, alpha=1.0, R=2.541
    )
    cpath = tmp_path / "cert.json"
    cpath.write_text(certificate_to_json(cert))
    code = main([
        "verify", str(EX1), "--certificate", str(cpath), "--samples", "2000",
    ])
    assert code == 1
    assert "passed=False" in capsys.readouterr().out
