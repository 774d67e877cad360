import json

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import C0, D0, KAPPA, P_REF
from karma_routing.cli import main
from karma_routing.config import (csv_text, emit_csv, emit_json, format_value, load_scenario,
                                  parse_scenario, read_csv, read_text, stream_int, stream_rng)
from karma_routing.errors import ValidationError
from karma_routing.simulation import SimTrace

MINIMAL = """
network:
  d0: [1.0, 1.5]
  kappa: [0.5, 0.5]
  c0: [1.0, 1.0]
prices: [2, -2]
"""


def test_bundled_scenario_constants():
    sc = load_scenario("five_arc_commuters")
    np.testing.assert_array_equal(sc.network.d0, D0)
    np.testing.assert_array_equal(sc.network.kappa, KAPPA)
    np.testing.assert_array_equal(sc.network.c0, C0)
    assert sc.network.alpha == 0.15 and sc.network.beta == 4
    assert sc.population.p_home == 0.05 and sc.population.horizon == 4
    assert sc.population.sensitivity.low == 0.0 and sc.population.sensitivity.high == 2.0
    assert sc.sim.M == 1000 and sc.sim.days == 600
    assert sc.design.price_bound == 100
    assert sc.prices == tuple(int(v) for v in P_REF)


def test_minimal_scenario_uses_defaults():
    sc = parse_scenario(MINIMAL)
    assert sc.network.n == 2
    assert sc.population.p_home == 0.05
    assert sc.sim.convention == "unilateral"


def test_empty_file():
    with pytest.raises(ValidationError, match="empty"):
        parse_scenario("")


def test_yaml_error_has_location():
    with pytest.raises(ValidationError, match="line 3, column 8"):
        parse_scenario("network:\n  d0: [1, 2\n  kappa: {\n")


def test_all_violations_reported():
    text = MINIMAL.replace("d0: [1.0, 1.5]", "d0: [1.0, 1.5, 2.0]")
    with pytest.raises(ValidationError) as exc:
        parse_scenario(text)
    assert len(exc.value.violations) == 3  # kappa, c0, prices


def test_schema_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ValidationError) as exc:
        parse_scenario(MINIMAL + "colour: red\npopulation: {p_home: 1.5}\n")
    assert len(exc.value.violations) == 2


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        read_text(tmp_path / "nope.yaml")


def test_seed_streams_are_independent_and_stable():
    a = stream_rng(7, "design").random(4)
    b = stream_rng(7, "simulate").random(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, stream_rng(7, "design").random(4))
    assert stream_int(7, "design") == stream_int(7, "design") != stream_int(8, "design")


def test_format_value():
    assert format_value(3) == "3"
    assert format_value(np.int64(-4)) == "-4"
    assert format_value(True) == "1"
    assert format_value(1 / 3) == "0.3333333333"
    assert format_value(float("nan")) == "nan"
    assert format_value(float("-inf")) == "-inf"


def test_csv_uses_crlf():
    assert csv_text(["a", "b"], [[1, 0.5]]) == "a,b\r\n1,0.5\r\n"


def test_empty_trace_is_header_only(tmp_path):
    path = emit_csv(SimTrace(n=2), tmp_path / "t.csv")
    assert path.read_bytes().count(b"\r\n") == 1
    header, rows = read_csv(path)
    assert header[0] == "day" and rows == []


def test_trace_round_trip(net, population, optimum, tmp_path):
    from karma_routing.simulation import run_simulation
    trace = run_simulation(net, population, P_REF, optimum.x_star, 1, M=30, seed=3)
    path = emit_csv(trace, tmp_path / "t.csv")
    assert len(path.read_bytes().split(b"\r\n")) == 3  # header, one row, trailing empty
    header, rows = read_csv(path)
    assert header == trace.columns()
    expected = list(trace.rows())[0]
    np.testing.assert_allclose(rows[0], [float(v) for v in expected], rtol=1e-9, equal_nan=True)


def test_json_is_sorted(tmp_path):
    path = emit_json({"b": 1, "a": [1.5]}, tmp_path / "x.json")
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
    assert json.loads(path.read_text()) == {"a": [1.5], "b": 1}


@pytest.fixture
def runner():
    return CliRunner()


def test_cli_optimum(runner, tmp_path):
    res = runner.invoke(main, ["optimum", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    data = json.loads((tmp_path / "optimum.json").read_text())
    assert len(data["x_star"]) == 5


def test_cli_missing_scenario_exit_code(runner, tmp_path):
    res = runner.invoke(main, ["optimum", "--scenario", str(tmp_path / "none.yaml"), "--out", str(tmp_path)])
    assert res.exit_code == 4


def test_cli_invalid_scenario_exit_code(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL.replace("kappa: [0.5, 0.5]", "kappa: [0.5, -1.0]"))
    res = runner.invoke(main, ["optimum", "--scenario", str(bad), "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert "kappa" in res.output


def test_cli_bad_prices(runner, tmp_path):
    res = runner.invoke(main, ["aggregate", "--prices", "1,x", "--out", str(tmp_path)])
    assert res.exit_code == 2
    res = runner.invoke(main, ["aggregate", "--prices", "3,-1", "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_cli_simulate_chain_landscape(runner, tmp_path):
    res = runner.invoke(main, ["simulate", "--days", "2", "--M", "50", "--seed", "1", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    header, rows = read_csv(tmp_path / "sim_trace.csv")
    assert len(rows) == 2
    res = runner.invoke(main, ["chain", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "chain.json").read_text())["column_sum_error"] < 1e-12
    res = runner.invoke(main, ["landscape", "--grid", "5", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    _, rows = read_csv(tmp_path / "landscape.csv")
    assert len(rows) == 25 and all(1 <= r[2] <= 5 for r in rows)
