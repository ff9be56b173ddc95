import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsemoe.core import (
    PRESETS,
    LayerKind,
    ModelConfig,
    fixture_values,
    generate_fixture,
    layer_kind,
    rms_norm,
    validate_config,
)
from sparsemoe.errors import ConfigError, RangeError

# First verified run of the generator; the raw tensor stream is platform independent.
GOLDEN_EXPERT_SHA256 = "e4eb74f4163f576cd33e1331eabc4303aea30352ccf14477b4f967bf23ad50f7"
# Whole tiny container (seed 7). Includes the LAPACK-derived predictor factors.
GOLDEN_TINY_CHECKSUM = 0x8B5CD7E4008D4551

SHAPE_4B = ModelConfig(num_layers=32, hidden_dim=1536, head_dim=128, ffn_dim=768,
                        num_q_heads=12, num_kv_heads=2, num_experts=32, top_k=4)
SHAPE_21B = ModelConfig(num_layers=52, hidden_dim=2560, head_dim=128, ffn_dim=768,
                         num_q_heads=28, num_kv_heads=4, num_experts=64, top_k=6)


def test_layer_kind_examples(tiny_config):
    cfg = SHAPE_4B
    assert layer_kind(0, cfg) is LayerKind.NopeGlobal
    assert layer_kind(3, cfg) is LayerKind.SwaRope
    nope = [i for i in range(cfg.num_layers) if layer_kind(i, cfg) is LayerKind.NopeGlobal]
    assert nope == list(range(0, 32, 4))
    assert len(nope) == 8


def test_layer_kind_out_of_range(tiny_config):
    with pytest.raises(RangeError):
        layer_kind(tiny_config.num_layers, tiny_config)
    with pytest.raises(RangeError):
        layer_kind(-1, tiny_config)


@given(st.integers(1, 80), st.integers(1, 9))
def test_nope_count_is_ceiling(num_layers, period):
    cfg = SHAPE_4B.replace(num_layers=num_layers, attn_pattern_period=period)
    kinds = [layer_kind(i, cfg) for i in range(num_layers)]
    assert kinds.count(LayerKind.NopeGlobal) == math.ceil(num_layers / period) == cfg.num_nope_layers


def test_large_shapes_validate():
    assert validate_config(SHAPE_4B) == []
    assert validate_config(SHAPE_21B) == []
    assert validate_config(PRESETS["4b-shape"]) == []
    assert validate_config(PRESETS["21b-shape"]) == []


def test_preset_window_and_pattern_defaults():
    for name in ("4b-shape", "21b-shape"):
        assert PRESETS[name].window_size == 4096
        assert PRESETS[name].attn_pattern_period == 4
        assert PRESETS[name].rope_base == 1e5


def test_attention_width_may_differ_from_hidden():
    # the 21B shape has 28 heads of 128 (3584 wide) on a 2560 hidden state
    assert SHAPE_21B.num_q_heads * SHAPE_21B.head_dim != SHAPE_21B.hidden_dim
    assert validate_config(SHAPE_4B.replace(head_dim=100)) == []
    assert validate_config(SHAPE_4B.replace(head_dim=101)) == ["head_dim 101 must be even for rotary embedding"]


def test_every_violation_listed():
    bad = SHAPE_4B.replace(num_kv_heads=5, top_k=40, window_size=0, attn_pattern_period=0)
    problems = validate_config(bad)
    assert len(problems) == 4


def test_config_text_round_trip():
    for cfg in PRESETS.values():
        assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_config_text_rejects_unknown_key():
    with pytest.raises(ConfigError):
        ModelConfig.from_text(SHAPE_4B.to_text() + "bogus=1\n")


def test_fixture_deterministic(tiny_config):
    a = generate_fixture(tiny_config, 42)
    b = generate_fixture(tiny_config, 42)
    assert a.checksum == b.checksum
    assert a.source.read_at(0, a.source.size) == b.source.read_at(0, b.source.size)


def test_fixture_seed_sensitive(tiny_config):
    assert generate_fixture(tiny_config, 42).checksum != generate_fixture(tiny_config, 43).checksum


def test_fixture_golden(tiny_container):
    raw = fixture_values(7, "layer.0.expert.0.gate", 128, 64, 64)
    assert hashlib.sha256(raw.tobytes()).hexdigest() == GOLDEN_EXPERT_SHA256
    assert tiny_container.checksum == GOLDEN_TINY_CHECKSUM


def test_fixture_values_keyed_by_name():
    a = fixture_values(1, "a", 4, 8, 8)
    assert np.array_equal(a, fixture_values(1, "a", 4, 8, 8))
    assert not np.array_equal(a, fixture_values(1, "b", 4, 8, 8))
    # a longer draw is a prefix-extension: more tensors never perturb existing values
    assert np.array_equal(fixture_values(1, "a", 8, 8, 8)[:4], a)


def test_fixture_values_scaled_by_fan_in():
    v = fixture_values(3, "w", 256, 256, 256).astype(np.float64)
    assert abs(v.mean()) < 3 * math.sqrt(1 / 256 / v.size)
    assert v.var() * 256 == pytest.approx(1.0, rel=0.02)


def test_rms_norm_examples():
    ones = np.ones(8, np.float32)
    np.testing.assert_allclose(rms_norm(ones, ones, 0.0), ones)
    out = rms_norm(np.array([3.0, 4.0], np.float32), np.ones(2, np.float32), 0.0)
    np.testing.assert_allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], atol=1e-6)
    np.testing.assert_allclose(out, [0.8485, 1.1314], atol=1e-4)
    zeros = np.zeros(8, np.float32)
    np.testing.assert_array_equal(rms_norm(zeros, ones, 1e-6), zeros)


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100, allow_nan=False, width=32), min_size=1, max_size=64))
def test_rms_norm_unit_rms(values):
    x = np.array(values, np.float32)
    if np.sqrt(np.mean(x.astype(np.float64) ** 2)) < 1e-3:
        return
    y = rms_norm(x, np.ones_like(x), 1e-6)
    assert np.sqrt(np.mean(y.astype(np.float64) ** 2)) == pytest.approx(1.0, rel=1e-3)
