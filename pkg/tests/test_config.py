from pathlib import Path

import pytest

from jointflow.config import ConfigError, RunConfig, default_stages, dump_config, load_config, parse_config
from jointflow.densities import Checkerboard

REPO = Path(__file__).resolve().parents[1]
SHIPPED = REPO / "configs" / "checkerboard.yaml"


def test_empty_document_uses_defaults():
    cfg = parse_config("")
    assert cfg.seed == 0
    assert [s.name for s in cfg.stages] == ["teacher", "distill", "f2d2"]
    assert cfg.model.width == 256 and cfg.model.depth == 4
    assert cfg.evaluation.ks == (1, 2, 4, 8)
    assert isinstance(cfg.make_density(), Checkerboard)


def test_shipped_config_mirrors_defaults():
    cfg = load_config(SHIPPED)
    base = RunConfig(stages=default_stages())
    assert [s.to_dict() for s in cfg.stages] == [s.to_dict() for s in base.stages]
    assert cfg.model == base.model and cfg.evaluation == base.evaluation
    assert cfg.density == base.density and cfg.seed == base.seed


def test_unknown_key_reports_line():
    text = "seed: 3\nmodel:\n  width: 64\n  wdth: 2\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.yaml")
    assert info.value.line == 4
    assert str(info.value).startswith("run.yaml:4:")
    assert "model.wdth" in str(info.value)


def test_type_error_reports_line():
    text = "seed: 1\nstages:\n  - name: a\n    iterations: many\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 4 and "integer" in info.value.message


def test_stage_contract_violation_reports_stage():
    text = "stages:\n  - name: a\n    losses: [fm, nope]\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 2 and "unknown losses" in info.value.message


def test_later_stage_reference_rejected():
    text = "stages:\n  - name: a\n    warm_start: b\n  - name: b\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 3


def test_missing_checkpoint_path_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("stages:\n  - name: a\n    warm_start: missing/model.ckpt\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert "checkpoint not found" in info.value.message and info.value.line == 3


def test_relative_checkpoint_resolved_against_config(tmp_path):
    (tmp_path / "w").mkdir()
    (tmp_path / "w" / "m.ckpt").write_bytes(b"")
    path = tmp_path / "c.yaml"
    path.write_text("out_dir: out\nstages:\n  - name: a\n    warm_start: w/m.ckpt\n")
    cfg = load_config(path)
    assert cfg.stages[0].warm_start == str(tmp_path / "w" / "m.ckpt")
    assert cfg.out_path() == tmp_path / "out"


def test_invalid_density_and_model():
    with pytest.raises(ConfigError, match="density"):
        parse_config("density:\n  kind: moons\n")
    with pytest.raises(ConfigError, match="activation"):
        parse_config("model:\n  activation: swish9\n")


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as info:
        parse_config("seed: 1\nmodel: [\n", "bad.yaml")
    assert info.value.line is not None and "syntax" in info.value.message


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")


def test_dump_round_trip():
    cfg = parse_config("seed: 5\nevaluation:\n  ks: [1, 3]\n")
    again = parse_config(dump_config(cfg))
    assert again.seed == 5 and again.evaluation.ks == (1, 3)
    assert [s.to_dict() for s in again.stages] == [s.to_dict() for s in cfg.stages]


def test_early_stopping_block():
    text = "stages:\n  - name: a\n    early_stopping:\n      every: 10\n      ks: [1, 2]\n"
    st = parse_config(text).stages[0]
    assert st.early_stopping.every == 10 and st.early_stopping.ks == (1, 2)
