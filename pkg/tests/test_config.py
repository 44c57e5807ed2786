import logging
from pathlib import Path

import numpy as np
import pytest

from hscrf.utils.config import (
    ComponentSources,
    ExperimentConfig,
    Source,
    load_config,
    load_experiment_config,
    load_generator_config,
    load_grid,
    load_sequence,
)
from hscrf.utils.errors import ConfigError
from hscrf.utils.logger import setup_logger
from hscrf.utils.session import RunSession, create_session, derive_rng

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def clean_env(monkeypatch):
    for name in ("HSCRF_SEED", "HSCRF_JOBS", "HSCRF_OUTPUT_DIR", "HSCRF_DEBUG", "HSCRF_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr("hscrf.utils.config.load_dotenv", lambda: False)
    return monkeypatch


def test_environment_defaults(clean_env):
    config = load_config()
    assert config["run"] == {"seed": 0, "jobs": 1, "output_dir": "results"}
    assert config["app"]["debug"] is False


def test_environment_overrides(clean_env):
    clean_env.setenv("HSCRF_SEED", "42")
    clean_env.setenv("HSCRF_JOBS", "3")
    clean_env.setenv("HSCRF_DEBUG", "TRUE")
    config = load_config()
    assert config["run"]["seed"] == 42
    assert config["run"]["jobs"] == 3
    assert config["app"]["debug"] is True


@pytest.mark.parametrize("raw", ["many", "0", "-2"])
def test_invalid_job_counts_fall_back_to_one(clean_env, raw):
    clean_env.setenv("HSCRF_JOBS", raw)
    assert load_config()["run"]["jobs"] == 1


def test_flags_take_precedence_over_the_environment(clean_env):
    clean_env.setenv("HSCRF_SEED", "9")
    config = load_config()
    assert create_session(config).seed == 9
    session = create_session(config, seed=3, jobs=2, quiet=True)
    assert (session.seed, session.jobs, session.quiet) == (3, 2, True)


def test_experiment_file_parses(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        'label = "mixed"\nshape_prior = "naive"\n[components]\nseg_unary = "HUMAN"\npn = "remove"\n'
        "[learn]\nepochs = 4\n",
        encoding="utf-8",
    )
    cfg = load_experiment_config(path)
    assert cfg.components.seg_unary is Source.HUMAN
    assert cfg.components.removed() == ["seg_unary_aux", "pn"]
    assert cfg.learn.epochs == 4


def test_unknown_keys_name_the_file_and_location(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('[components]\nsegment_unary = "human"\n', encoding="utf-8")
    with pytest.raises(ConfigError, match=r"exp\.toml: components\.segment_unary"):
        load_experiment_config(path)


@pytest.mark.parametrize("body", ['[components]\nseg_unary = "oracle"\n', '[components]\npn = "human"\n'])
def test_bad_sources_are_rejected(tmp_path, body):
    path = tmp_path / "exp.toml"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment_config(path)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        load_generator_config(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("seed = = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="broken.toml"):
        load_generator_config(broken)


def test_grid_sweep_must_name_components(tmp_path):
    path = tmp_path / "grid.toml"
    path.write_text('sweep = ["seg_unary", "wings"]\n', encoding="utf-8")
    with pytest.raises(ConfigError, match="wings"):
        load_grid(path)


def test_sequence_needs_a_step(tmp_path):
    path = tmp_path / "journey.toml"
    path.write_text('output_dir = "out"\n', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_sequence(path)


def test_shipped_configs_parse():
    assert load_grid(CONFIGS / "grid.toml").sweep == ["seg_unary", "supseg_unary"]
    assert len(load_sequence(CONFIGS / "journey.toml").step) == 5
    assert load_experiment_config(CONFIGS / "exp.toml").is_all_machine()
    assert load_generator_config(CONFIGS / "gen.toml").n_test == 200


def test_canonical_hash_ignores_label_and_output():
    base = ExperimentConfig()
    assert base.canonical_hash() == ExperimentConfig(label="other", output_dir="x").canonical_hash()
    assert base.canonical_hash() != base.with_components(seg_unary=Source.HUMAN).canonical_hash()
    assert base.canonical_hash() != ExperimentConfig(min_area=0).canonical_hash()


def test_with_components_validates_names():
    cfg = ExperimentConfig().with_components(label="gt seg", seg_unary=Source.GT)
    assert cfg.label == "gt seg"
    assert not cfg.is_all_machine()
    with pytest.raises(ConfigError):
        ExperimentConfig().with_components(tail=Source.GT)


def test_clamps_make_a_config_non_baseline():
    assert ExperimentConfig().is_all_machine()
    assert not ExperimentConfig(clamp_scene=True).is_all_machine()
    assert ComponentSources(seg_unary="MACHINE") == ComponentSources()


def test_derived_streams_are_stable_and_independent():
    a = derive_rng(7, "train-0001").random(4)
    assert np.array_equal(a, derive_rng(7, "train-0001").random(4))
    assert not np.array_equal(a, derive_rng(7, "train-0002").random(4))
    assert not np.array_equal(a, derive_rng(8, "train-0001").random(4))
    assert np.array_equal(RunSession(seed=7).rng_for("train-0001").random(4), a)


def test_parallel_map_keeps_input_order():
    assert RunSession(jobs=2).parallel_map(abs, [-3, 1, -2, 5]) == [3, 1, 2, 5]
    assert RunSession(jobs=4).serial().jobs == 1


def test_quiet_logging_only_shows_warnings(clean_env):
    assert setup_logger(quiet=True).level == logging.WARNING
    assert setup_logger(level=logging.DEBUG).level == logging.DEBUG
    clean_env.setenv("HSCRF_LOG_LEVEL", "error")
    assert setup_logger().level == logging.ERROR
