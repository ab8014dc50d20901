import json
from pathlib import Path

import numpy as np
import pytest

from wfdetect import cli
from wfdetect.config import ConfigError, load_config, substream_seed
from wfdetect.table import DataTable

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.ini"


def write_ini(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def short_ini(tmp_path):
    return write_ini(tmp_path, "[cycle]\nlength = 400\n[method]\nepochs = 50\nmax_latent_dim = 2\n")


def test_example_config_loads_with_defaults():
    cfg = load_config(EXAMPLE)
    assert cfg.method == "nodyn" and cfg.segment_length == 20
    assert cfg.weights().p_term == {1: 0.02, 2: 0.04}
    assert cfg.workflow().perturbed_modules() == ["Battery", "Motor"]


@pytest.mark.parametrize("text", [
    "[method]\nmode = magic\n",
    "[method]\nnorm = l3\n",
    "[method]\np_a = 0.5\n",
    "[method]\np_term = 0.04, 0.02\n",
    "[doe]\nordering = shuffled\n",
    "[cycle]\nsource = missing.csv\n",
    "[perturbations]\nBattery.voltage_boost = 0.1\n",
    "[perturbations]\nTurbo.boost = 0.1\n",
    "[method]\nalpha = 2\n",
    "[bogus]\nx = 1\n",
    "[method]\nlatent_dim = three\n",
])
def test_invalid_configs_are_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path, text))


def test_empty_perturbation_section_means_no_change(tmp_path):
    cfg = load_config(write_ini(tmp_path, "[perturbations]\n"))
    assert cfg.workflow().perturbed_modules() == []


def test_substreams_are_named_and_stable():
    assert substream_seed(3, "schedule") == substream_seed(3, "schedule")
    assert substream_seed(3, "schedule") != substream_seed(3, "embedding-init")
    assert substream_seed(3, "schedule") != substream_seed(4, "schedule")


def test_simulate_writes_four_tables_and_manifest(short_ini, tmp_path):
    out = tmp_path / "a"
    assert cli.main(["--config", str(short_ini), "--out", str(out), "simulate"]) == 0
    for name in ("T0", "T1", "T0_DoE", "T1_DoEbar"):
        assert (out / f"{name}.csv").is_file()
    man = json.loads((out / "manifest_simulate.json").read_text())
    assert {"config_hash", "substream_seeds", "versions", "durations", "config"} <= set(man)
    assert "T0.csv" in man["outputs"]
    t0 = DataTable.from_csv(out / "T0.csv")
    assert np.all(t0.matrix(t0.columns_of("boolean")) == 0)


@pytest.mark.prop
def test_simulate_is_reproducible(short_ini, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["--config", str(short_ini), "--out", str(out), "--seed", "5",
                         "simulate"]) == 0
    for name in ("T0", "T1", "T0_DoE", "T1_DoEbar"):
        assert (a / f"{name}.csv").read_bytes() == (b / f"{name}.csv").read_bytes()
    ma = json.loads((a / "manifest_simulate.json").read_text())
    mb = json.loads((b / "manifest_simulate.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]


@pytest.mark.prop
def test_random_schedule_depends_on_seed_only(tmp_path):
    ini = write_ini(tmp_path, "[cycle]\nlength = 400\n[doe]\nordering = random\n")
    outs = []
    for k, seed in enumerate((1, 1, 2)):
        out = tmp_path / f"s{k}"
        assert cli.main(["--config", str(ini), "--out", str(out), "--seed", str(seed), "doe"]) == 0
        outs.append((out / "schedule.csv").read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]


@pytest.mark.prop
def test_embedding_is_reproducible_through_the_cli(tmp_path):
    ini = write_ini(tmp_path, "[cycle]\nlength = 400\n[method]\nepochs = 30\nlatent_dim = 2\n"
                              "subset_size = 4\n")
    texts = []
    for k in range(2):
        out = tmp_path / f"m{k}"
        assert cli.main(["--config", str(ini), "--out", str(out), "--seed", "9", "mixed"]) == 0
        texts.append((out / "embedding.json").read_text())
    assert texts[0] == texts[1]


def test_dmdc_then_report_renders_only_dmdc(short_ini, tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["--config", str(short_ini), "--out", str(out), "dmdc"]) == 0
    rep = json.loads((out / "dmdc_report.json").read_text())
    assert rep["spectral_radius"] > 0
    assert (out / "dmdc_quality.csv").is_file()
    text, missing = cli.cmd_report(out)
    assert "== dmdc ==" in text and "== mixed ==" not in text
    assert set(missing) == {"mixed_report.json", "nodyn_summary.json", "sensitivity_manifest.json"}
    assert cli.cmd_report(out)[0] == text


def test_nodyn_and_detect_dispatch(short_ini, tmp_path):
    out = tmp_path / "n"
    assert cli.main(["--config", str(short_ini), "--out", str(out), "--threads", "2", "detect"]) == 0
    summary = json.loads((out / "nodyn_summary.json").read_text())
    assert summary["alpha"] == 0.1
    assert (out / "manifest_nodyn.json").is_file()


def test_report_floor_rule():
    d = {"state_cols": ["a", "b"], "A": [[0.004, 0.5], [0.0, 1.0]], "spectral_radius": 1.0,
         "r2": {"a": 1.0, "b": 1.0}, "matrix_floor": 5e-3}
    lines = cli.render_dmdc(d, Path(".")).splitlines()
    row_a = lines[3].split()
    assert row_a[1] == "[-]" and row_a[2] == "0.500"


def test_exit_codes(tmp_path, short_ini):
    bad = write_ini(tmp_path, "[method]\nnorm = l3\n", "bad.ini")
    assert cli.main(["--config", str(bad), "--out", str(tmp_path / "x"), "simulate"]) == 2
    assert cli.main(["--config", str(tmp_path / "nope.ini"), "simulate"]) == 2
    # a file where the output directory should be
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert cli.main(["--config", str(short_ini), "--out", str(blocker / "sub"), "doe"]) == 4
    assert cli.main(["--out", str(tmp_path / "missing_run"), "report"]) == 4
    flat = tmp_path / "flat.csv"
    DataTable(["speed_setpoint"], np.zeros((400, 1))).to_csv(flat)
    ini = write_ini(tmp_path, f"[cycle]\nsource = {flat}\nlength = 400\n", "flat.ini")
    assert cli.main(["--config", str(ini), "--out", str(tmp_path / "f"), "dmdc"]) == 3
