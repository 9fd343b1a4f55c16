import json

import pytest

from smartmc.cli import DEFAULTS, config_digest, load_config, main

SMALL = {"n_paths": 256, "grid": {"n_fixings": 2, "n_strikes": 5, "n_fwd_ratios": 3},
         "market": {"n_paths": 4096}}


def write_cfg(tmp_path, extra=None, name="cfg.json"):
    doc = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        doc[k] = {**doc.get(k, {}), **v} if isinstance(v, dict) else v
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run(tmp_path, *args, out="out"):
    return main([*args, "--out", str(tmp_path / out)])


def test_native_calibrate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"market": {"source": "native"}})
    assert run(tmp_path, "calibrate", "--config", cfg) == 0
    js = [p for p in (tmp_path / "out").iterdir() if p.suffix == ".json"]
    doc = json.loads(js[0].read_text())
    assert doc["max_weight_deviation"] <= 1e-9 and doc["converged"]
    assert js[0].name == f"calibrate-{doc['config_digest']}.json"
    assert str(js[0]) in capsys.readouterr().out


def test_reruns_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run(tmp_path, "calibrate", "--config", cfg, out="a") == 0
    assert run(tmp_path, "calibrate", "--config", cfg, out="b") == 0
    a = sorted((tmp_path / "a").iterdir())
    b = sorted((tmp_path / "b").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    first = a[0].read_text().splitlines()[0]
    assert a[0].suffix != ".csv" or first.startswith("# calibrate digest=")


def test_seed_changes_digest():
    base = load_config()
    other = load_config(seed=6)
    assert config_digest("band", base) != config_digest("band", other)
    assert config_digest("band", base) == config_digest("band", load_config(out="elsewhere", threads=4))
    assert config_digest("band", base) != config_digest("calibrate", base)


def test_missing_surface(tmp_path, capsys):
    missing = str(tmp_path / "nope.csv")
    assert run(tmp_path, "calibrate", "--surface", missing) == 2
    assert "nope.csv" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"schema": 99}, {"n_paths": 1}, {"grid": {"n_fixings": 0}},
                                 {"calibration": {"alpha": -1.0}}, {"generator": "lognormal"}])
def test_bad_configs(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert run(tmp_path, "calibrate", "--config", str(p)) == 2


def test_convergence_exit(tmp_path):
    cfg = write_cfg(tmp_path, {"calibration": {"max_sweeps": 1}})
    assert run(tmp_path, "calibrate", "--config", cfg) == 4


def test_infeasible_exit(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"n_paths": 8})
    assert run(tmp_path, "calibrate", "--config", cfg) == 3
    assert "infeasible" in capsys.readouterr().err


def test_surface_round_trip_and_band(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run(tmp_path, "gen-surface", "--config", cfg, out="s") == 0
    surf = next(p for p in (tmp_path / "s").iterdir() if p.name.endswith(".surface.csv"))
    assert run(tmp_path, "band", "--config", cfg, "--regime", "raw", "--surface", str(surf), out="b") == 0
    bands = next(p for p in (tmp_path / "b").iterdir() if p.name.endswith(".bands.csv"))
    rows = bands.read_text().splitlines()
    assert rows[1] == "generator,l,regime,D_min,D_max,mid,S_intra_rel"
    assert rows[2].startswith("heston2,2,raw,")


def test_fwd_surface_and_diagnose(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run(tmp_path, "fwd-surface", "--config", cfg, out="f") == 0
    fwd = next(p for p in (tmp_path / "f").iterdir() if p.name.endswith(".fwd.csv"))
    assert len(fwd.read_text().splitlines()) == 2 + 2 * 3
    assert run(tmp_path, "diagnose", "--config", cfg, out="d") == 0
    doc = json.loads(next(p for p in (tmp_path / "d").iterdir() if p.suffix == ".json").read_text())
    assert doc["projector"]["threshold"] == 0.05


def test_bench_rmse(tmp_path):
    cfg = write_cfg(tmp_path, {"bench": {"study": "rmse", "seeds": 4, "n_grid": [64, 256]}})
    assert run(tmp_path, "bench", "--config", cfg) == 0


def test_defaults_are_valid():
    assert load_config()["schema"] == DEFAULTS["schema"]
