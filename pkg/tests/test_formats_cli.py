import filecmp
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficfill.cli import main
from trafficfill.field import PatchGrid
from trafficfill.formats import (SchemaError, load_config, read_counters, read_eval,
                                 read_inflow, read_patches, read_pgm, read_posterior,
                                 write_counters, write_eval, write_heatmap, write_inflow,
                                 write_patches)
from trafficfill.imputation import CI_GRID, CounterTable, EvalReport
from trafficfill.snfs import InflowSchedule

REPO = Path(__file__).resolve().parents[1]

TINY_INI = """\
[road]
length_km = 3
lanes = 2
fast_limit_kmh = 100
slow_limit_kmh = 80
bottleneck_start_km = 2.2
bottleneck_end_km = 2.7
counters_km = 1.2

[grid]
p_bn = 0.3, 0.5, 0.2
p = 0.1, 0.1, 0
q = 0.1, 0.2, 0.1
r = 0.9, 0.96, 0.06

[pipeline]
window = 10
warmup = 5
seed = 4

[twin]
theta = 0.5, 0.1, 0.1, 0.9
minutes = 25
observe_from = 5
demand_base_vpm = 30
demand_peak_vpm = 48
ramp_minutes = 20
mask_prob_below = 0.7
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_shipped_config_parses():
    cfg = load_config(REPO / "configs" / "keno.ini")
    assert cfg.road.length_cells == 1000
    assert cfg.road.speed_limit_per_lane == (4, 5)
    assert cfg.road.counter_positions_km == (2.27, 3.86, 5.89, 9.63)
    assert cfg.grid == CI_GRID
    assert cfg.pipeline.prior_counters_km == [2.27, 3.86, 9.63]
    assert cfg.twin.theta.as_tuple() == (0.54, 0.15, 0.15, 0.96)


def test_grid_triples_parse(tiny):
    cfg = load_config(tiny)
    assert cfg.grid.q.values() == [0.1, 0.2]
    assert cfg.pipeline.window_minutes == 10


def test_bad_config_raises_schema_error(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[road]\nlength_km = ten\nlanes = 2\nfast_limit_kmh = 100\n")
    with pytest.raises(SchemaError):
        load_config(bad)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(1, 130)), min_size=6, max_size=6),
       st.integers(0, 500))
def test_patches_round_trip(tmp_path_factory, cells, start):
    path = tmp_path_factory.mktemp("p") / "patches.csv"
    vals = np.array([np.nan if c is None else round(c, 4) for c in cells]).reshape(3, 2)
    grid = PatchGrid(vals, start)
    write_patches(path, grid, imputed=np.isnan(vals))
    back, flags = read_patches(path, 3)
    assert back.start_minute == start
    assert np.allclose(back.values, vals, equal_nan=True, atol=5e-5)
    assert np.array_equal(flags, np.isnan(vals))


def test_counter_inflow_eval_round_trips(tmp_path):
    table = CounterTable([0.0, 5.89], [3, 3], [40, 12], [80.0, 15.5])
    write_counters(tmp_path / "c.csv", table)
    back = read_counters(tmp_path / "c.csv")
    assert back.position_km.tolist() == [0.0, 5.89] and back.speed_kmh.tolist() == [80.0, 15.5]
    inflow = InflowSchedule([0, 1], [30, 31], [80.0, 79.5])
    write_inflow(tmp_path / "i.csv", inflow)
    assert read_inflow(tmp_path / "i.csv").count.tolist() == [30, 31]
    rep = EvalReport(4.25, 2.5, 10, 90)
    write_eval(tmp_path / "e.csv", rep)
    assert read_eval(tmp_path / "e.csv") == rep


def test_heatmap_orientation_and_mask(tmp_path):
    grid = PatchGrid(np.array([[100.0, np.nan], [50.0, 25.0]]))
    mask = write_heatmap(tmp_path / "h.pgm", grid, 100.0)
    assert read_pgm(tmp_path / "h.pgm").tolist() == [[128, 64], [255, 0]]
    assert read_pgm(mask).tolist() == [[0, 0], [0, 255]]


def test_negative_counter_speed_names_row(tmp_path, capsys):
    path = tmp_path / "c.csv"
    path.write_text("minute,position_km,count,speed_kmh\n0,0.0,30,80\n1,0.0,30,-5\n")
    with pytest.raises(SchemaError, match=r"c\.csv:3: negative speed"):
        read_counters(path)


def test_bad_header_rejected(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("minute,seg,v\n0,0,10\n")
    with pytest.raises(SchemaError, match="header"):
        read_patches(path)


# --- CLI -----------------------------------------------------------------------

def test_missing_config_is_usage_error(tmp_path, capsys):
    rc = main(["simulate", "--config", str(tmp_path / "nope.ini"), "--theta", "0.3,0.1,0.1,0.9",
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "config file not found" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert main(["simulate", "--bogus"]) == 1
    assert capsys.readouterr().err


def test_simulate_writes_outputs(tiny, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(tiny), "--theta", "0.5,0.1,0.1,0.9", "--minutes", "8",
                 "--out", str(out)]) == 0
    grid, _ = read_patches(out / "patches.csv", 6)
    assert grid.shape == (6, 8)
    assert (out / "patches.pgm").is_file() and (out / "summary.txt").is_file()


def test_strict_grid_rejects_off_lattice_theta(tiny, tmp_path, capsys):
    rc = main(["simulate", "--config", str(tiny), "--theta", "0.41,0.1,0.1,0.9", "--strict-grid",
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "lattice" in capsys.readouterr().err


def test_impute_with_negative_counter_speed_exits_2(tiny, tmp_path, capsys):
    tw = tmp_path / "tw"
    assert main(["twin", "--config", str(tiny), "--out", str(tw)]) == 0
    bad = tmp_path / "bad.csv"
    lines = (tw / "counters.csv").read_text().splitlines()
    fields = lines[5].split(",")
    fields[3] = "-1.0"
    lines[5] = ",".join(fields)
    bad.write_text("\n".join(lines) + "\n")
    rc = main(["impute", "--config", str(tiny), "--obs", str(tw / "obs.csv"),
               "--counters", str(bad), "--out", str(tmp_path / "imp")])
    assert rc == 2
    assert "bad.csv:6" in capsys.readouterr().err


def test_eval_with_disjoint_sets(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    write_patches(a, PatchGrid(np.array([[10.0, 20.0]]), 0), imputed=np.array([[True, False]]))
    write_patches(b, PatchGrid(np.array([[30.0, 40.0]]), 5))
    rc = main(["eval", "--imputed", str(a), "--reference", str(b), "--out", str(tmp_path / "e")])
    assert rc == 2
    assert "empty evaluation set" in capsys.readouterr().err


def _round_trip(ini, root):
    assert main(["twin", "--config", str(ini), "--out", str(root / "twin")]) == 0
    assert main(["impute", "--config", str(ini), "--obs", str(root / "twin" / "obs.csv"),
                 "--counters", str(root / "twin" / "counters.csv"),
                 "--out", str(root / "imp")]) == 0
    assert main(["eval", "--imputed", str(root / "imp" / "imputed.csv"),
                 "--reference", str(root / "twin" / "truth.csv"), "--out", str(root / "eval")]) == 0


def test_round_trip_outputs_reparse_and_repeat_exactly(tiny, tmp_path, capsys):
    _round_trip(tiny, tmp_path / "a")
    _round_trip(tiny, tmp_path / "b")
    assert "MAE missing" in capsys.readouterr().out
    for sub in ("twin", "imp", "eval"):
        names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub,
                                                   names, shallow=False)
        assert not mismatch and not errors
    obs, _ = read_patches(tmp_path / "a" / "twin" / "obs.csv", 6)
    imputed, flags = read_patches(tmp_path / "a" / "imp" / "imputed.csv", 6)
    assert np.array_equal(flags, obs.missing)
    assert not imputed.missing.any()
    hist, maps = read_posterior(tmp_path / "a" / "imp" / "posterior.csv")
    assert len(maps) == 20 - 10 + 1
    assert read_eval(tmp_path / "a" / "eval" / "eval.csv").n_missing == int(obs.missing.sum())


def test_seed_override_changes_twin(tiny, tmp_path):
    assert main(["twin", "--config", str(tiny), "--out", str(tmp_path / "a")]) == 0
    assert main(["twin", "--config", str(tiny), "--seed", "99", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "truth.csv").read_bytes() != (tmp_path / "b" / "truth.csv").read_bytes()
