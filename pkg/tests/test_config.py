"""Config parsing, validation, and override precedence."""

import pytest

from cmt.config import (
    ConfigError,
    FULL_SCALE_PRESET,
    ModelConfig,
    TrainConfig,
    format_config,
    load_config,
    parse_config,
)


def test_defaults_are_desk_scale():
    m = ModelConfig()
    assert (m.d_model, m.n_layers, m.n_heads, m.k) == (32, 2, 4, 8)
    assert m.vocab_size == 75 and m.head_dim == 8


def test_model_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)  # not divisible
    with pytest.raises(ConfigError):
        ModelConfig(d_model=6, n_heads=2)  # odd head dim breaks rotation pairs
    with pytest.raises(ConfigError):
        ModelConfig(k=0)
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(context=4, k=8)  # no room for content tokens


def test_train_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(window=-1)
    with pytest.raises(ConfigError):
        TrainConfig(window=16, batch_size=8)  # more than in-batch candidates
    TrainConfig(window=0)  # 0 = no filtering


def test_parse_roundtrip_and_comments():
    m0, t0 = ModelConfig(d_model=64, n_heads=8), TrainConfig(lr=5e-4, epochs=3)
    text = format_config(m0, t0) + "\n# trailing comment\n"
    m1, t1 = parse_config(text)
    assert m1 == m0 and t1 == t0


def test_parse_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("not_a_field=1\n")


def test_parse_bad_value_types():
    with pytest.raises(ConfigError):
        parse_config("d_model=abc\n")
    with pytest.raises(ConfigError):
        parse_config("memory_aware=maybe\n")


def test_overrides_win(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr=0.001\nepochs=9\n")
    _, t = load_config(str(p), {"lr": 0.05})
    assert t.lr == 0.05 and t.epochs == 9


def test_full_scale_preset_sane():
    assert FULL_SCALE_PRESET["lr"] == 1e-6 and FULL_SCALE_PRESET["alpha"] == 0.5


def test_demote_set():
    assert TrainConfig(demote_doc_ids="3, 5,9").demote_set() == frozenset({3, 5, 9})
    assert TrainConfig().demote_set() == frozenset()
