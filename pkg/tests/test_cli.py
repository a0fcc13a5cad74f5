import math

import pytest

from latticemac import cli
from latticemac import experiments as ex
from latticemac.config import ConfigError

DEFAULT = "t_frame = 0.005\nsigma = 3360\nbeta = 7\ns_max = 15\ndistance_km = 1\n"
SMALL = ("n_stations = 4\nn_groups = 1\nchannels_per_group = 2\npayload_bits = 2400\n"
         "p_bit = 1e-5\nlambda = 40\n")


@pytest.fixture
def cfgfile(tmp_path):
    def make(text, name="run.cfg"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return make


def test_default_config_echoed(cfgfile, capsys):
    assert cli.main(["model", "--config", cfgfile(DEFAULT)]) == 0
    out = capsys.readouterr().out
    for line in ("# t_frame = 0.005", "# sigma = 3360.0", "# beta = 7", "# s_max = 15"):
        assert line in out


def test_model_csv(cfgfile, tmp_path):
    out = tmp_path / "model.csv"
    assert cli.main(["model", "--config", cfgfile(SMALL), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("station,lambda,p_succ")
    assert len(lines) == 5


def test_verify_pairs_model_and_sim(cfgfile, tmp_path):
    out = tmp_path / "verify.csv"
    rc = cli.main(["verify", "--config", cfgfile(SMALL), "--seeds", "2", "--duration", "2",
                   "--out", str(out), "--jobs", "1"])
    assert rc == 0
    header, row = out.read_text().splitlines()
    assert header.split(",") == list(ex.VERIFY_COLUMNS)
    vals = row.split(",")
    assert float(vals[0]) == pytest.approx(4 * 40 * 2400)
    assert vals[5] == "stable"


def test_sweep_columns_and_order(cfgfile, tmp_path):
    out = tmp_path / "sweep.csv"
    rc = cli.main(["sweep", "--config", cfgfile(SMALL), "--seeds", "0,1", "--duration", "1",
                   "--sweep-load", "1e5:3e5:1e5", "--out", str(out), "--jobs", "2"])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(ex.SWEEP_COLUMNS)
    loads = [float(l.split(",")[0]) for l in lines[1:]]
    assert loads == [1e5, 2e5, 3e5]


def test_sweep_reproducible_bytes(cfgfile, tmp_path):
    args = ["sweep", "--config", cfgfile(SMALL), "--seeds", "2", "--duration", "1",
            "--sweep-load", "1e5:2e5:1e5"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(args + ["--out", str(a), "--jobs", "1"]) == 0
    assert cli.main(args + ["--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_unstable_point_flagged_not_fatal(cfgfile, tmp_path):
    out = tmp_path / "sweep.csv"
    rc = cli.main(["sweep", "--config", cfgfile(SMALL), "--seeds", "1", "--duration", "0.5",
                   "--sweep-load", "2e6:2e6:1", "--out", str(out), "--jobs", "1"])
    assert rc == 0
    assert out.read_text().splitlines()[1].endswith("unstable")


def test_compare(cfgfile, capsys):
    rc = cli.main(["compare", "--config", cfgfile(SMALL), "--seeds", "1", "--duration", "1",
                   "--sweep-load", "1e5:2e5:1e5", "--jobs", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert ",".join(ex.COMPARE_COLUMNS) in out
    assert "baseline max throughput" in out


@pytest.mark.parametrize("mode", ["sim", "baseline"])
def test_replicas(cfgfile, tmp_path, mode):
    out = tmp_path / "runs.csv"
    assert cli.main([mode, "--config", cfgfile(SMALL), "--seeds", "2", "--duration", "1",
                     "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_empty_grid_is_usage_error(cfgfile):
    assert cli.main(["sweep", "--config", cfgfile(SMALL), "--sweep-load", "5e6:1e6:1e6"]) == 2
    assert cli.main(["sweep", "--config", cfgfile(SMALL)]) == 2


@pytest.mark.parametrize("text", ["beta = 6\n", "p_bit = 2\n", "nonsense = 1\n", "profile = meter\n",
                                  "n_stations = 10\nn_groups = 3\n"])
def test_bad_config_exit_two(cfgfile, text, capsys):
    assert cli.main(["model", "--config", cfgfile(text)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_flags(tmp_path):
    assert cli.main(["model", "--config", str(tmp_path / "nope.cfg")]) == 2
    with pytest.raises(SystemExit) as err:
        cli.main(["teleport"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        cli.main(["sim", "--duration", "abc"])
    assert err.value.code == 2


def test_parse_helpers():
    assert ex.parse_grid("1:3:1") == (1.0, 2.0, 3.0)
    assert ex.parse_grid("16e6:17e6:0.5e6") == (16e6, 16.5e6, 17e6)
    assert ex.parse_grid("3:1:1") == ()
    assert ex.parse_seeds("3") == (0, 1, 2)
    assert ex.parse_seeds("4,7") == (4, 7)
    with pytest.raises(ConfigError):
        ex.parse_seeds("0")
    with pytest.raises(ConfigError):
        ex.parse_grid("1:2")


def test_ci95():
    mean, half = ex.mean_ci95([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert half == pytest.approx(4.302652729749464 * 1.0 / math.sqrt(3))
    assert math.isnan(ex.mean_ci95([1.0])[1])


def test_max_throughput_rules():
    thr = lambda x: 1.0
    rows = [{"offered_bps": x, "d": d} for x, d in [(1, 0.1), (2, 0.5), (3, 2.0), (4, 5.0)]]
    assert ex.max_throughput(rows, thr, "d") == (2, None)
    value, warn = ex.max_throughput(rows[:2], thr, "d")
    assert value == 2 and "never violated" in warn
    value, warn = ex.max_throughput(rows[2:], thr, "d")
    assert value == 0.0 and "never met" in warn


def test_csv_formatting():
    rows = [{"a": 2.0, "b": 1 / 3}, {"a": 1.0, "b": math.nan}]
    assert ex.format_csv(rows, ("a", "b")) == "a,b\n1,nan\n2,0.333333333\n"
