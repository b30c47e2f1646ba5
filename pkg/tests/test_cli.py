import json
import math

import pytest

from asdlab import cli

Y_SPHERE = 8 * math.sqrt(6) * math.pi


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def strip_clock(doc):
    doc["manifest"].pop("wall_clock")
    return doc


@pytest.mark.parametrize("chi,tau,Y,code,verdict", [(2, 0, 61.5624, 0, "UNOBSTRUCTED"),
                                                   (3, -1, 10, 0, "UNOBSTRUCTED"),
                                                   (-18, 0, 1, 3, "NOT CERTIFIED")])
def test_certify_examples(capsys, chi, tau, Y, code, verdict):
    got, out, _ = run(capsys, "certify", "--chi", chi, "--tau", tau, "--yamabe", Y)
    assert got == code
    assert out.strip() == verdict


def test_certify_hypothesis_violation(capsys, tmp_path):
    code, out, err = run(capsys, "certify", "--chi", 2, "--tau", 0, "--yamabe", -1, "--out", tmp_path)
    assert code == 2 and "hypothesis" in err
    assert out == "" and list(tmp_path.iterdir()) == []


def test_certify_missing_arguments(capsys):
    assert run(capsys, "certify", "--chi", 2)[0] == 2


def test_usage_errors(capsys):
    assert run(capsys, "decompose", "--geometry", "klein_bottle")[0] == 2
    assert run(capsys, "decompose", "--sites", "3,3")[0] == 2
    assert run(capsys, "nonsense")[0] == 2
    assert run(capsys, "decompose", "--threads", 0)[0] == 2


def test_decompose_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "decompose", "--geometry", "flat_t4", "--sites", 3, "--dump", "R", "--dump", "P",
                       "--out", tmp_path, "--seed", 4)
    assert code == 0 and out == ""
    doc = json.loads((tmp_path / "decompose.json").read_text())
    man = doc["manifest"]
    assert man["command"] == "decompose" and man["seed"] == 4
    assert set(man) >= {"config_path", "lattice", "tolerances", "version", "wall_clock"}
    assert man["wall_clock"]["elapsed_s"] >= 0
    assert doc["W_sup"] < 1e-12 and abs(doc["R"]["max"]) < 1e-9
    lines = (tmp_path / "decompose_P.csv").read_text().splitlines()
    assert lines[0] == "i0,i1,i2,i3,component,value"
    assert len(lines) == 1 + 3 ** 4 * 16
    assert (tmp_path / "decompose_R.csv").read_text().splitlines()[1].startswith("0,0,0,0,0,")


def test_decompose_bad_dump_writes_nothing(capsys, tmp_path):
    code, _, err = run(capsys, "decompose", "--geometry", "flat_t4", "--sites", 2, "--dump", "Q", "--out", tmp_path)
    assert code == 2 and "dump" in err
    assert list(tmp_path.iterdir()) == []


def test_config_file_with_flag_override(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ngeometry = perturbed_flat\nsites = 2\nseed = 5\nepsilon = 0.01\n")
    code, out, _ = run(capsys, "decompose", "--config", cfg, "--seed", 9)
    assert code == 0
    man = json.loads(out)["manifest"]
    assert man["seed"] == 9
    assert man["config_path"] == str(cfg)
    assert man["lattice"] == {"geometry": "perturbed_flat", "sites": [2, 2, 2, 2]}


@pytest.mark.parametrize("text", ["colour = red\n", "sites\n", "seed = many\n"])
def test_bad_config(capsys, tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    code, out, _ = run(capsys, "decompose", "--config", cfg)
    assert code == 2 and out == ""


def test_verify_quick_pass(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "tractor", "--geometry", "flat_t4", "--samples", 3,
                       "--no-quadrature", "--seed", 1)
    assert code == 0
    doc = json.loads(out)
    assert doc["pass"] and doc["failed"] == []
    assert all(rec["seed"] == 1 for rec in doc["checks"])


def test_verify_injected_nan(capsys, tmp_path):
    code, out, err = run(capsys, "verify", "--suite", "geometry", "--geometry", "s3xs1", "--seed", 3,
                         "--inject-nan", 2, "--out", tmp_path)
    assert code == 1
    assert "non-finite metric at lattice site (" in err
    assert out == "" and list(tmp_path.iterdir()) == []


def test_verify_inject_nan_range(capsys):
    assert run(capsys, "verify", "--samples", 2, "--inject-nan", 5)[0] == 2


def test_functional_is_reproducible(capsys):
    args = ("functional", "--geometry", "perturbed_flat", "--sites", 4, "--seed", 11)
    a = strip_clock(json.loads(run(capsys, *args)[1]))
    b = strip_clock(json.loads(run(capsys, *args, "--threads", 3)[1]))
    assert a == b
    assert a["report"]["notes"]["quadratic_term_measure"].startswith("dv")


def test_solve_default(capsys, tmp_path):
    code, _, _ = run(capsys, "solve", "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "solve.json").read_text())
    assert all(doc["pass"].values())
    assert doc["four_d_cross_check"]["rel_diff"] < 1e-6
    trace = (tmp_path / "solve_trace.csv").read_text().splitlines()
    assert trace[0] == "iter,phi,grad_norm,step"
    assert (tmp_path / "solve_w.csv").read_text().splitlines()[0] == "i0,i1,i2,i3,component,value"


def test_solve_iteration_limit(capsys, tmp_path):
    code, _, _ = run(capsys, "solve", "--max-iters", 1, "--no-cross-check", "--out", tmp_path)
    assert code == 5
    assert json.loads((tmp_path / "solve.json").read_text())["result"]["converged"] is False


def test_solve_refuses_sphere(capsys, tmp_path):
    code, out, err = run(capsys, "solve", "--geometry", "round_s4", "--reduction", "full-4d", "--out", tmp_path)
    assert code == 2 and "kappa" in err
    assert out == "" and list(tmp_path.iterdir()) == []


def test_solve_bad_reduction(capsys):
    assert run(capsys, "solve", "--geometry", "perturbed_flat")[0] == 2


def test_invariants_product(capsys):
    code, out, _ = run(capsys, "invariants", "--geometry", "s3xs1", "--sites", "6,6,6,4", "--no-eigen")
    assert code == 0
    doc = json.loads(out)
    assert abs(doc["invariants"]["totalQ"]) < 1e-6
    assert doc["adams"]["ok"] and doc["expected"]["chi"] == 0
