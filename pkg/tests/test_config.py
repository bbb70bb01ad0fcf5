"""Tests for the flat key = value experiment config."""

import math
from pathlib import Path

import pytest
from pydantic import ValidationError

from dpvger.config import (
    BnnConfig,
    ClippingMode,
    ExperimentConfig,
    MethodKind,
    TaskConfig,
    parse_config_lines,
)
from dpvger.env import MNIST_DIR_ENV, ConfigurationError, mnist_dir_from_env

SAMPLE = """
# desk-scale run
method = dp-vger-public
seed = 3
out_dir = runs/a   # trailing comment
task_pairs = 0-1, 2-3
per_class_cap = none
bnn.hidden_widths = 50,50
gan.epochs = 4
dp.clip_norm = inf
dp.clipping_mode = per_layer
"""


def test_parse_lines_into_sections() -> None:
    data = parse_config_lines(SAMPLE)
    assert data["method"] == "dp-vger-public"
    assert data["tasks"]["task_pairs"] == [(0, 1), (2, 3)]
    assert data["tasks"]["per_class_cap"] is None
    assert data["bnn"]["hidden_widths"] == [50, 50]
    assert data["gan"]["epochs"] == "4"


def test_from_text_validates() -> None:
    cfg = ExperimentConfig.from_text(SAMPLE)
    assert cfg.method is MethodKind.DP_VGER_PUBLIC
    assert cfg.seed == 3
    assert cfg.out_dir == "runs/a"
    assert cfg.tasks.per_class_cap is None
    assert cfg.gan.epochs == 4
    assert math.isinf(cfg.dp.clip_norm)
    assert cfg.dp.clipping_mode is ClippingMode.PER_LAYER


def test_unknown_key_is_an_error() -> None:
    with pytest.raises(ConfigurationError, match="unknown key 'bnn.depth'"):
        parse_config_lines("method = vcl\nbnn.depth = 3\n")


def test_duplicate_key_is_an_error() -> None:
    with pytest.raises(ConfigurationError, match="duplicate key"):
        parse_config_lines("seed = 1\nseed = 2\n")


def test_line_without_equals_is_an_error() -> None:
    with pytest.raises(ConfigurationError, match=":2:"):
        parse_config_lines("seed = 1\njust words\n", source="cfg")


def test_bad_task_pair_syntax() -> None:
    with pytest.raises(ConfigurationError):
        parse_config_lines("task_pairs = 0:1\n")


def test_invalid_value_raises_configuration_error() -> None:
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_text("method = vcl\nbnn.epochs = 0\n")


def test_unknown_method() -> None:
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_text("method = ewc\n")


class TestBudgetDefaults:
    def test_public_variant(self) -> None:
        cfg = ExperimentConfig.from_dict({"method": "dp-vger-public"})
        assert cfg.dp.target_epsilon == 1.0
        assert cfg.dp.target_delta == 1e-8

    def test_nopublic_variant(self) -> None:
        cfg = ExperimentConfig.from_dict({"method": "dp-vger-nopublic"})
        assert cfg.dp.target_epsilon == 5.0
        assert cfg.dp.target_delta == 1e-4

    def test_explicit_budget_wins(self) -> None:
        cfg = ExperimentConfig.from_dict(
            {"method": "dp-vger-public", "dp": {"target_epsilon": 2.0}}
        )
        assert cfg.dp.target_epsilon == 2.0
        assert cfg.dp.target_delta == 1e-8

    def test_non_private_methods_have_no_budget(self) -> None:
        cfg = ExperimentConfig.from_dict({"method": "vger"})
        assert cfg.dp.target_epsilon is None
        assert cfg.dp.delta == 1e-8


class TestTaskPairs:
    def test_overlapping_pairs_rejected(self) -> None:
        with pytest.raises(ValidationError):
            TaskConfig(task_pairs=[(0, 1), (1, 2)])

    def test_repeated_digit_rejected(self) -> None:
        with pytest.raises(ValidationError):
            TaskConfig(task_pairs=[(3, 3)])

    def test_digit_out_of_range(self) -> None:
        with pytest.raises(ValidationError):
            TaskConfig(task_pairs=[(9, 10)])


def test_method_flags() -> None:
    assert MethodKind.VGER.is_vger and not MethodKind.VGER.uses_dp
    assert MethodKind.DP_VGER_PUBLIC.uses_public
    assert not MethodKind.DP_VGER_NOPUBLIC.uses_public
    assert MethodKind.CORESET_ONLY.uses_public and not MethodKind.CORESET_ONLY.is_vger


def test_hidden_widths_must_be_positive() -> None:
    with pytest.raises(ValidationError):
        BnnConfig(hidden_widths=[10, 0])


def test_to_lines_round_trips() -> None:
    cfg = ExperimentConfig.from_text(SAMPLE)
    again = ExperimentConfig.from_text("\n".join(cfg.to_lines()))
    assert again == cfg


def test_env_var_expansion(monkeypatch) -> None:
    monkeypatch.setenv("DPVGER_TEST_DATA", "/data/mnist")
    cfg = ExperimentConfig.from_text("method = vcl\ndata_dir = ${DPVGER_TEST_DATA}\n")
    assert cfg.tasks.data_dir == "/data/mnist"


def test_missing_env_var(monkeypatch) -> None:
    monkeypatch.delenv("DPVGER_UNSET_VAR", raising=False)
    with pytest.raises((ConfigurationError, ValidationError)):
        ExperimentConfig.from_text("method = vcl\nout_dir = ${DPVGER_UNSET_VAR}/x\n")


def test_home_prefix_expanded(monkeypatch, tmp_path) -> None:
    monkeypatch.setenv("HOME", str(tmp_path))
    cfg = ExperimentConfig.from_text("method = vcl\nout_dir = ~/runs/a\n")
    assert cfg.out_dir == f"{tmp_path}/runs/a"


def test_mnist_dir_from_env(monkeypatch) -> None:
    monkeypatch.delenv(MNIST_DIR_ENV, raising=False)
    assert mnist_dir_from_env() is None
    monkeypatch.setenv("DPVGER_TEST_ROOT", "/srv")
    monkeypatch.setenv(MNIST_DIR_ENV, "${DPVGER_TEST_ROOT}/mnist")
    assert mnist_dir_from_env() == Path("/srv/mnist")


def test_from_file(tmp_path) -> None:
    path = tmp_path / "run.cfg"
    path.write_text("method = plain-sgd\nseed = 9\n", encoding="utf-8")
    assert ExperimentConfig.from_file(path).seed == 9
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(tmp_path / "absent.cfg")
