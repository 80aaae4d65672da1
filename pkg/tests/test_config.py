import numpy as np
import pytest

from nemelec.cli import execute
from nemelec.config import ParseError, load_config, parse_config
from nemelec.experiments import UnknownExperiment, experiment_catalogue, experiment_names
from nemelec.state import ValidationError

MINIMAL = """
[experiment]
name = custom

[mesh]
n = 4

[time]
k = 0.002
T = 0.01
"""


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    p = cfg.params
    assert (p.eps_perp, p.eps_a, p.A, p.mu_phi, p.nu_el, p.nu) == (0.1, 10.0, 0.01, 0.25, 1.0, 1.0)
    assert (p.k, p.T, cfg.n, cfg.dim) == (0.002, 0.01, 4, 2)
    assert cfg.fixed_point.relaxation == 1.0 and cfg.fixed_point.anderson_depth == 0


def test_errors_name_the_offending_key(tmp_path):
    cases = {
        MINIMAL + "\n[physics]\nbogus = 1\n": "bogus",
        MINIMAL + "\n[plot]\nx = 1\n": "plot",
        MINIMAL.replace("name = custom", "name = bogus"): "experiment",
        MINIMAL.replace("n = 4", "n = 0"): "n",
        MINIMAL + "\n[physics]\nnu = -1\n": "nu",
        MINIMAL + "\n[physics]\nstabilization = maybe\n": "stabilization",
        MINIMAL + "\n[solver]\nrelaxation = 2\n": "relaxation",
        MINIMAL + "\n[solver]\nfreeze = nothing\n": "freeze",
        MINIMAL.replace("[mesh]\nn = 4", "[mesh]\npattern = tet_split\nn = 4"): "pattern",
    }
    for text, key in cases.items():
        with pytest.raises(ValidationError) as info:
            parse_config(text)
        assert info.value.key == key, text
    empty = tmp_path / "empty.ini"
    empty.write_text("")
    with pytest.raises(ValidationError) as info:
        load_config(empty)
    assert info.value.key == "experiment"
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.ini")


def test_malformed_lines_report_line_numbers():
    with pytest.raises(ParseError) as info:
        parse_config("n = 3\n")
    assert info.value.line == 1
    with pytest.raises(ParseError) as info:
        parse_config("[mesh]\nn = 3\nn = 4\n")
    assert info.value.line == 3


def test_initial_data_only_for_custom():
    with pytest.raises(ValidationError):
        parse_config(MINIMAL.replace("custom", "defect_flow") + "\n[initial]\nd0 = 1, 0, 0\n")
    cfg = parse_config(MINIMAL + "\n[initial]\nd0 = 1, 0, 0\nn_plus0 = 0.5\nn_minus0 = 0.5\n")
    x = np.zeros((2, 2))
    assert np.allclose(cfg.experiment.initial.d0(x), [1.0, 0.0, 0.0])


def test_echo_reload_reproduces_the_run(tmp_path):
    text = MINIMAL + """
[physics]
E0 = 0.5, 0.0, 0.0
omega = 2.0

[initial]
d0 = 1, 1, 0
n_plus0 = 0.5
n_minus0 = 0.5

[solver]
anderson_depth = 2
relaxation = 0.9
"""
    cfg = parse_config(text)
    again = parse_config(cfg.echo())
    assert again.echo() == cfg.echo()
    outs = []
    for i, c in enumerate((cfg, again)):
        c.output_dir = str(tmp_path / f"run{i}")
        assert execute(c, log=lambda *a: None) == 0
        outs.append((tmp_path / f"run{i}" / "timeseries.csv").read_bytes())
    assert outs[0] == outs[1]


def test_presets_carry_the_published_parameters():
    d = experiment_catalogue("defect_flow").params
    assert (d.A, d.nu_el, d.k, d.nu) == (1.0, 0.25, 5e-4, 1.0)
    assert d.lambda_npp == d.eps_a == d.eps_perp == 0.0
    s = experiment_catalogue("dipole_static").params
    assert (s.eps_a, s.lambda_npp, s.mu_phi) == (100.0, 100.0, 0.25)
    o = experiment_catalogue("oscillating_field").params
    assert o.applied_field.omega == pytest.approx(35 * np.pi)
    assert np.allclose(o.applied_field(0.0), [1.0, 0.0, 0.0])
    u = experiment_catalogue("uniform_field")
    assert np.allclose(u.params.applied_field(0.3), [0.4, 0.0, 0.0]) and u.dim == 3
    v = experiment_catalogue("velocity_flow")
    x = np.array([[0.1, 0.2]])
    assert np.allclose(v.initial.v0(x), [[-2.0, 1.0]])
    assert (v.params.A, v.params.nu_el) == (0.1, 1.0)


def test_every_preset_is_valid_and_unknown_names_fail():
    for name in experiment_names():
        exp = experiment_catalogue(name)
        exp.params.validate(exp.dim)
        assert exp.box == ((-0.5, 0.5),) * exp.dim
    with pytest.raises(UnknownExperiment) as info:
        experiment_catalogue("bogus")
    assert "defect_flow" in str(info.value)
