import json

import numpy as np
import pytest

from pidimt.cli import main
from pidimt.scenarios import load_scenarios

SMALL = ["--desk", "--d=12", "--n_heads=2", "--n_blocks=1", "--future=12", "--history=8", "--lane_points=5",
         "--neighbors=2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scen = root / "scen.json"
    assert main(["gen-scenarios", "--out", str(scen), "--n", "4", *SMALL]) == 0
    run = root / "run"
    assert main(["train", "--out-dir", str(run), "--scenarios", str(scen), "--steps", "2", *SMALL,
                 "--batch_size=2", "--checkpoint_every=1"]) == 0
    return root, scen, run


def test_gen_scenarios_writes_pool(workspace):
    _, scen, _ = workspace
    pool = load_scenarios(scen)
    assert len(pool) == 4 and pool[0].future.shape[1] == 12


def test_train_writes_checkpoints(workspace, capsys):
    _, _, run = workspace
    assert sorted(p.name for p in run.iterdir()) == ["final.ckpt", "step_000001.ckpt", "step_000002.ckpt"]


def test_sample_outputs_json_arrays(workspace):
    root, scen, run = workspace
    out = root / "traj.json"
    rc = main(["sample", "--checkpoint", str(run / "final.ckpt"), "--scenarios", str(scen), "--index", "0",
               "--steps", "3", "--temperature", "0.2", "--phnn", "off", "--frame", "world", "--out", str(out)])
    assert rc == 0
    data = json.loads(out.read_text())
    assert data["sample"]["steps"] == 3 and data["sample"]["phnn"] is False
    ego = np.array(data["scenes"][0]["agents"][0]["trajectory"])
    assert ego.shape == (13, 4)
    now = load_scenarios(scen)[0].scene.ego.frames[-1][[0, 1, 4, 5]]
    np.testing.assert_allclose(ego[0], now, atol=1e-4)


def test_sample_is_deterministic_per_seed(workspace, capsys):
    _, scen, run = workspace
    args = ["sample", "--checkpoint", str(run / "final.ckpt"), "--scenarios", str(scen), "--steps", "2",
            "--ph-steps", "4", "--ph-anchor", "3", "--ph-dt", "0.1", "--ph-impulse", "literal"]
    main(args + ["--seed", "1"])
    a = capsys.readouterr().out
    main(args + ["--seed", "1"])
    b = capsys.readouterr().out
    main(args + ["--seed", "2"])
    c = capsys.readouterr().out
    assert a == b and a != c


def test_eval_report_and_csv(workspace, capsys):
    root, scen, run = workspace
    rc = main(["eval", "--checkpoint", str(run / "final.ckpt"), "--scenarios", str(scen), "--steps", "2",
               "--report", str(root / "r.json"), "--csv", str(root / "r.csv")])
    assert rc == 0
    assert "anchor" in capsys.readouterr().out
    rep = json.loads((root / "r.json").read_text())
    assert rep["summary"]["n"] == 4 and rep["summary"]["anchor_violations"] == 0
    assert len((root / "r.csv").read_text().splitlines()) == 5


def test_eval_strict_mismatch_is_load_error(workspace, capsys):
    _, scen, run = workspace
    rc = main(["eval", "--checkpoint", str(run / "final.ckpt"), "--scenarios", str(scen), "--strict", "--desk"])
    assert rc == 2 and "architecture" in capsys.readouterr().err


def test_config_file_env_and_bad_keys(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[train]\nn_scenarios = 3\n")
    monkeypatch.setenv("DIMT_SEED", "9")
    out = tmp_path / "s.json"
    assert main(["gen-scenarios", "--config", str(cfg), "--out", str(out), *SMALL]) == 0
    pool = load_scenarios(out)
    assert len(pool) == 3
    monkeypatch.setenv("DIMT_SEED", "10")
    assert main(["gen-scenarios", "--config", str(cfg), "--out", str(tmp_path / "t.json"), *SMALL]) == 0
    assert load_scenarios(tmp_path / "t.json")[0].seed != pool[0].seed
    assert main(["gen-scenarios", "--out", str(out), "--colour=red"]) == 2
    assert "colour" in capsys.readouterr().err
    assert main(["gen-scenarios", "--out", str(out), "--kinds", "roundabout"]) == 2


def test_check_command(capsys):
    assert main(["check", "--only", "variance_preservation", "energy_identities"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
