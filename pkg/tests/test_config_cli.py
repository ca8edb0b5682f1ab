import json
import subprocess
import sys
from pathlib import Path

import pytest

from vacantlab import cli
from vacantlab.config import ExperimentConfig
from vacantlab.errors import ConfigError, EpsilonOutOfRange

PHASE = """\
# small phase sweep
experiment = phase-sweep
d = 3
N = 8
u_grid = 0.0, 1.0, 3.0
replicas = 6
seed = 7
"""

PIPELINE = """\
experiment = coupling-pipeline
d = 3
N = 20
gamma = 0.501
chi = 0.05
u = 1.0
epsilon = 0.25, 0.5
regime_c = 0.02
replicas = 4
seed = 3
"""

BOUND = """\
experiment = bound-check
epsilon = 0.25
n_grid = 50, 200
replicas = 10
chains = 3
tail_replicas = 100
seed = 2
"""

TABLE = """\
experiment = tabulate-potential
d = 3
N = 20
gamma = 0.501
chi = 0.05
"""


def test_config_roundtrip():
    cfg = ExperimentConfig.from_text(PIPELINE)
    assert cfg.epsilon == (0.25, 0.5) and cfg.kill_radius is None
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    other = cfg.replace(kill_radius=12.5, sizes=(20, 28), out="x.csv")
    assert ExperimentConfig.from_text(other.to_text()) == other


@pytest.mark.parametrize("text", ["bogus = 1\n", "experiment phase-sweep\n", "N = twenty\n"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text, validate=False)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("experiment = phase-sweep\nu_grid = 2.0, 1.0\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("experiment = coupling-pipeline\nN = 14\n")
    # the default regime constant puts the epsilon floor near 1 at N = 20
    with pytest.raises(EpsilonOutOfRange):
        ExperimentConfig.from_text(PIPELINE.replace("regime_c = 0.02\n", ""))


def test_regime_floor():
    cfg = ExperimentConfig.from_text(PIPELINE)
    kappa = 0.501 * 2 - 1
    assert cfg.regime_floor() == pytest.approx((0.02 * 20 ** (-kappa / 2)) ** 0.5)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("text", [PHASE, PIPELINE, BOUND, TABLE], ids=["phase", "pipeline", "bound", "table"])
def test_cli_csv_is_deterministic(tmp_path, text):
    cfgfile = write(tmp_path, "run.cfg", text)
    cmd = ExperimentConfig.from_text(text).experiment
    outs = []
    for threads in (1, 3, 1):
        out = tmp_path / f"t{threads}-{len(outs)}.csv"
        code = cli.main([cmd, "--config", str(cfgfile), "--threads", str(threads), "--out", str(out)])
        assert code in (0, 2)
        outs.append(out.read_bytes())
        report = json.loads(out.with_suffix(".json").read_text())
        assert report["experiment"] == cmd and "wall_clock_s" in report
    assert outs[0] == outs[1] == outs[2]
    assert b"\r\n" in outs[0] and b"np.float64" not in outs[0]


def test_cli_phase_sweep_passes(tmp_path):
    cfgfile = write(tmp_path, "ps.cfg", PHASE)
    assert cli.main(["phase-sweep", "--config", str(cfgfile), "--out", str(tmp_path / "ps.csv")]) == 0
    lines = (tmp_path / "ps.csv").read_text().splitlines()
    assert lines[0] == "d,N,u,replicas,etaHat,stderr,meanLargestComponent,seed"
    assert len(lines) == 4


def test_cli_seed_override_changes_output(tmp_path, capsysbinary):
    cfgfile = write(tmp_path, "ps.cfg", PHASE.replace("u_grid = 0.0, 1.0, 3.0", "u_grid = 0.5, 1.0"))
    cli.main(["phase-sweep", "--config", str(cfgfile), "--seed", "1"])
    a = capsysbinary.readouterr().out
    cli.main(["phase-sweep", "--config", str(cfgfile), "--seed", "2"])
    b = capsysbinary.readouterr().out
    assert a != b


def test_cli_assertion_failure_exit_code(tmp_path):
    # demanding an impossible sandwich frequency fails the assertion, not the run
    text = PIPELINE + "sandwich_min = 1.01\ntarget_epsilon = 0.25\n"
    cfgfile = write(tmp_path, "cp.cfg", text)
    code = cli.main(["coupling-pipeline", "--config", str(cfgfile), "--out", str(tmp_path / "cp.csv")])
    assert code == 2
    report = json.loads((tmp_path / "cp.json").read_text())
    assert report["assertions"]["sandwich_frequency_min"] is False


def test_cli_error_exit_code(tmp_path, capsys):
    cfgfile = write(tmp_path, "bad.cfg", "experiment = coupling-pipeline\nN = 14\n")
    assert cli.main(["coupling-pipeline", "--config", str(cfgfile)]) == 1
    assert "error:" in capsys.readouterr().err
    assert cli.main(["phase-sweep", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_module_entry_point(tmp_path):
    cfgfile = write(tmp_path, "ps.cfg", PHASE)
    proc = subprocess.run([sys.executable, "-m", "vacantlab", "phase-sweep", "--config", str(cfgfile)],
                          capture_output=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.startswith(b"d,N,u,replicas")


GOLDEN = Path(__file__).parent / "golden"


@pytest.mark.parametrize("experiment", ["phase-sweep", "bound-check"])
def test_cli_golden_files(tmp_path, experiment):
    out = tmp_path / "run.csv"
    code = cli.main([experiment, "--config", str(GOLDEN / f"{experiment}.cfg"), "--out", str(out)])
    assert code == 0
    assert out.read_bytes() == (GOLDEN / f"{experiment}.csv").read_bytes()


def test_phase_sweep_at_zero_only():
    cfg = ExperimentConfig.from_text("experiment = phase-sweep\nN = 8\nu_grid = 0.0\nreplicas = 3\n")
    report, table = cli.run(cfg)
    rows = table.split("\r\n")
    assert len([r for r in rows if r]) == 2
    assert report["metrics"]["eta"]["8"] == [1.0]


def test_pipeline_at_zero_level():
    cfg = ExperimentConfig.from_text(PIPELINE.replace("u = 1.0", "u = 0.0"))
    report, table = cli.run(cfg)
    assert report["passed"]
    assert all(v == 1.0 for v in report["metrics"]["sandwich_frequency"].values())
    body = [r.split(",") for r in table.split("\r\n")[1:] if r]
    header = cli.PIPELINE_FIELDS
    col = {k: i for i, k in enumerate(header)}
    for r in body:
        assert r[col["walkVacant"]] == r[col["riVacantLow"]] == r[col["riVacantHigh"]] == "7"
