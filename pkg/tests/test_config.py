from pathlib import Path

import pytest

from ssopd.config import ConfigError, ExperimentConfig, load_config, parse_config

TINY = Path(__file__).parent / "data" / "tiny.ini"


def test_defaults_validate_and_roundtrip():
    cfg = ExperimentConfig()
    again = parse_config(cfg.to_ini())
    assert again == cfg and again.digest() == cfg.digest()


def test_parse_overrides_types():
    cfg = load_config(TINY)
    assert cfg.env.vocab_size == 3 and cfg.train.seeds == (0, 1)
    assert cfg.ablation.lambda0_values == (0.4, 0.5, 0.6, 0.7)
    cfg = parse_config("[ssopd]\ndynamic_weight = no\ntau_clip = 0.1\n")
    assert cfg.ssopd.dynamic_weight is False and cfg.ssopd.tau_clip == 0.1
    assert cfg.ssopd_config().dynamic_weight is False


def test_digest_tracks_content():
    a = parse_config("[train]\nsteps = 10\n")
    b = parse_config("[train]\nsteps = 11\n")
    assert a.digest() != b.digest()
    assert a.digest() == parse_config("[train]\nsteps=10\n").digest()
    assert len(a.digest()) == 16


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[train]\nstepz = 3\n",
    "[train]\nmethod = ppo\n",
    "[train]\nsteps = many\n",
    "[train]\nsteps = 0\n",
    "[train]\nseeds =\n",
    "[ssopd]\ndynamic_weight = perhaps\n",
    "[ssopd]\ncorrect_rule = Len_median\n",
    "[suite]\nfamily = sudoku\n",
    "[grpo]\ngroup_size = 1\n",
    "not an ini",
])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
