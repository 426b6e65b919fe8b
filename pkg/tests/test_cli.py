import json

import numpy as np
import pytest

from hjbfem.cli import main, run


def read_csv(path):
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,ndofs,error_T,eta,effectivity,newton_iters,h_max"
    rows = [line.split(",") for line in lines[1:]]
    return lines, rows


def test_square_laplace_uniform_rate(tmp_path):
    out = tmp_path / "laplace.csv"
    records = run({"experiment": "square-laplace", "p": 2, "s": 1,
                   "uniform_steps": 5, "out": str(out)})
    lines, rows = read_csv(out)
    hs = np.array([r.h_max for r in records])
    es = np.array([r.error for r in records])
    slope = np.polyfit(np.log(hs[-3:]), np.log(es[-3:]), 1)[0]
    assert abs(slope - 1.0) <= 0.1


def test_deterministic_csv(tmp_path):
    cfg = {"experiment": "pentagon", "p": 2, "s": 1, "max_dofs": 300,
           "n_alpha": 4, "n_beta": 6}
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    run(dict(cfg, out=str(out1)))
    run(dict(cfg, out=str(out2)))
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_main_with_config_and_flags(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"experiment": "pentagon", "max_dofs": 4000,
                                    "n_alpha": 4, "n_beta": 6}))
    out = tmp_path / "run.csv"
    mesh_out = tmp_path / "final_mesh.txt"
    eta_out = tmp_path / "eta.csv"
    code = main(["--config", str(cfg_path), "--max-dofs", "200",
                 "--p", "2", "--s", "0", "--theta", "0.0",
                 "--out", str(out), "--export-mesh", str(mesh_out),
                 "--export-eta", str(eta_out)])
    assert code == 0
    lines, rows = read_csv(out)
    assert len(rows) >= 1
    assert int(rows[-1][1]) >= 200  # flag overrode config's max_dofs
    from hjbfem.mesh import read_mesh
    mesh = read_mesh(mesh_out)
    assert mesh.n_elements == len(eta_out.read_text().strip().splitlines()) - 1


def test_unknown_experiment_rejected():
    with pytest.raises(ValueError):
        run({"experiment": "nonsense"})
