import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nm_ast.config import MODES, RunConfig, normalize_mode
from nm_ast.errors import ConfigError
from nm_ast.optim import AnnealingSchedule, ConstantDecay


def test_defaults_are_desk_constants():
    c = RunConfig()
    assert (c.steps, c.refresh_interval, c.max_decay, c.lr) == (3000, 10, 6e-5, 1e-3)
    assert (c.batch_size, c.seq_len, c.pattern) == (16, 128, "2:4")
    assert c.alpha == pytest.approx(2 / 3)
    sched = c.decay_schedule()
    assert isinstance(sched, AnnealingSchedule) and sched.ramp_steps == 750
    assert sched(750) == pytest.approx(6e-5) and sched(0) == 0


def test_json_roundtrip_is_identity():
    c = RunConfig(mode="static_srste", seed=3, d_model=32, alpha=0.5)
    text = c.to_json()
    assert RunConfig.from_json(text) == c
    assert RunConfig.from_json(text).to_json() == text


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(MODES), st.integers(0, 10**6), st.sampled_from([0.0, 0.25, 1.0]), st.integers(0, 50))
def test_roundtrip_property(mode, seed, alpha, refresh):
    c = RunConfig(mode=mode, seed=seed, alpha=alpha, refresh_interval=refresh)
    assert RunConfig.from_json(c.to_json()) == c


def test_partial_files_fill_defaults_and_int_for_float():
    c = RunConfig.from_json('{"steps": 40, "lr": 1}')
    assert c.steps == 40 and c.lr == 1.0 and isinstance(c.lr, float)


@pytest.mark.parametrize(
    "text",
    ['{"stepz": 4}', '{"steps": 4.5}', '{"steps": true}', '{"tie_embeddings": 1}', '[]', '{oops',
     '{"mode": "static-srste"}', '{"mode": "gradual"}', '{"pattern": "3:2"}', '{"alpha": 2}',
     '{"seq_len": 512}', '{"slorb_k": 5}', '{"distill_variant": "kd"}'],
)
def test_rejects_bad_files(text):
    with pytest.raises(ConfigError):
        RunConfig.from_json(text)


def test_unknown_key_named_in_message():
    with pytest.raises(ConfigError, match="stepz"):
        RunConfig.from_dict({"stepz": 1})


def test_mode_effects():
    base = RunConfig(steps=100)
    assert normalize_mode("no-distill") == "no_distill"
    assert base.replace(mode="no_distill").effective_steps() == 133
    assert base.replace(mode="naive").effective_alpha() == 0
    assert base.replace(mode="one_shot").effective_steps() == 0
    assert base.replace(mode="fixed_mask").effective_refresh() == math.inf
    assert base.replace(refresh_interval=0).effective_refresh() == math.inf
    assert base.effective_refresh() == 10
    assert base.replace(mode="ast_boosted").effective_slorb() and not base.effective_slorb()
    naive = base.replace(mode="naive").decay_schedule()
    assert isinstance(naive, ConstantDecay) and naive(0) == 0 and naive(133) == 0
    static = base.replace(mode="static_srste").decay_schedule()
    assert static(0) == static(100) == 6e-5
    assert base.replace(ramp_steps=10).decay_schedule()(10) == pytest.approx(6e-5)
    assert base.distill_config().alpha == pytest.approx(2 / 3)


def test_to_dict_is_flat_json():
    d = RunConfig().to_dict()
    assert all(not isinstance(v, (dict, list)) for v in d.values())
    json.dumps(d)
