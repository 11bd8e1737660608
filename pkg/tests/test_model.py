import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

import oracle
from tdmvolt.errors import ConfigError, InfeasibleTiming, InvalidTopology, NegativeParameter
from tdmvolt.model import (
    CrosstalkMatrix,
    DacSpec,
    DemuxStage,
    DynamicRouting,
    SwitchSpec,
    config_from_dict,
    config_to_dict,
    config_violations,
    derive_timing,
    intermediate_capacitance_f,
    load_config,
    routing_line_count,
    select_line_count,
    share_ratio,
    slots_per_refresh,
    validate_config,
)
from tdmvolt.presets import dynamic_config, dynamic_crosstalk, static_config


# --- DAC codes ---------------------------------------------------------------


def test_dac_codes_hit_zero_and_both_rails():
    dac = DacSpec(1.5e6, 16, 10.0)
    assert dac.max_code == 32767
    assert dac.dequantize(dac.quantize(0.0)) == 0.0
    assert dac.dequantize(dac.quantize(10.0)) == 10.0
    assert dac.dequantize(dac.quantize(-10.0)) == -10.0


def test_half_lsb_of_14_bit_dac():
    dac = DacSpec(4e6, 14, 10.0)
    assert dac.lsb_v / 2 == pytest.approx(0.61e-3, rel=1e-3)


@given(st.floats(-10, 10), st.integers(8, 20))
def test_quantize_within_half_lsb(v, bits):
    dac = DacSpec(1e6, bits, 10.0)
    assert abs(dac.dequantize(dac.quantize(v)) - v) <= dac.lsb_v / 2 * (1 + 1e-9)


@given(st.floats(-20, 20))
def test_quantize_clamps(v):
    dac = DacSpec(1e6, 12, 10.0)
    assert abs(dac.quantize(v)) <= dac.max_code


# --- derived structure -------------------------------------------------------


def test_static_slots(static_cfg):
    assert slots_per_refresh(static_cfg) == 40
    assert slots_per_refresh(static_cfg, two_step=False) == 32


def test_dynamic_slots(dynamic_cfg):
    assert slots_per_refresh(dynamic_cfg) == 4


def test_select_lines_static(static_cfg):
    assert select_line_count(static_cfg.topology) == oracle.feedthroughs([8, 8]) - 1 == 7


def test_select_lines_decoderless(dynamic_cfg):
    assert select_line_count(dynamic_cfg.topology) == 4


def test_routing_lines():
    assert routing_line_count(None) == 0
    assert routing_line_count(DynamicRouting(4, 1)) == 0
    assert routing_line_count(DynamicRouting(4, 2)) == 1
    assert routing_line_count(DynamicRouting(4, 5)) == 3


def test_share_ratio_with_and_without_c1():
    c_on, c2 = 185e-12, 470e-12
    with_c1 = share_ratio(static_config())
    without = share_ratio(static_config(c1_f=0.0))
    assert with_c1 == pytest.approx(oracle.residual_fraction(2.7e-9 + c_on, c2), rel=1e-12)
    assert without == pytest.approx(oracle.residual_fraction(c_on, c2), rel=1e-12)
    assert with_c1 == pytest.approx(0.1401, abs=1e-4)
    assert without == pytest.approx(0.7176, abs=1e-4)


def test_derive_timing_static(static_cfg):
    t = derive_timing(static_cfg)
    ca = intermediate_capacitance_f(static_cfg)
    assert t.slot_duration == Fraction(1, 1_500_000)
    assert t.per_node_tau["stage1_charge"] == pytest.approx(10 * ca)
    assert t.per_node_tau["stage2_deliver"] == pytest.approx(10 * oracle.series(ca, 470e-12))
    assert t.per_node_tau["direct"] == pytest.approx(10 * (ca + 470e-12) + 10 * 470e-12)
    assert t.available_s["stage2_deliver"] == pytest.approx(1 / 1.5e6)
    assert t.t_charge_s == pytest.approx(1 / 1.5e6 - 5 * 20e-9)


def test_derive_timing_dynamic(dynamic_cfg):
    t = derive_timing(dynamic_cfg)
    assert t.per_node_tau == {"direct": pytest.approx(100 * 120e-12)}
    assert t.settle_fraction["direct"] == pytest.approx(math.exp(-(250e-9 - 25e-9) / 12e-9))


def test_derive_timing_infeasible(static_cfg):
    slow = static_cfg.with_(dac=DacSpec(1.5e6, 16, 10.0, settle_time_constant_s=1e-6))
    with pytest.raises(InfeasibleTiming):
        derive_timing(slow)


# --- validation --------------------------------------------------------------


def test_presets_are_valid(static_cfg, dynamic_cfg):
    assert validate_config(static_cfg) is static_cfg
    assert validate_config(dynamic_cfg) is dynamic_cfg


def test_negative_capacitance_is_reported():
    cfg = static_config(c1_f=-1e-9)
    kinds = {type(v) for v in config_violations(cfg)}
    assert NegativeParameter in kinds
    with pytest.raises(ConfigError) as err:
        validate_config(cfg)
    assert any(v.field == "topology.stages.0.hold_capacitance_f" for v in err.value.violations)


def test_rate_above_dac_budget_is_infeasible(static_cfg):
    cfg = static_cfg.with_(per_channel_rate_hz=40_000.0)
    (v,) = config_violations(cfg)
    assert isinstance(v, InfeasibleTiming)


def test_full_stage1_cannot_park():
    cfg = static_config(stage1_outputs=8)
    assert any(isinstance(v, InvalidTopology) for v in config_violations(cfg))
    # the same 64-channel tree is fine in single-step mode
    validate_config(static_config(stage1_outputs=8, two_step=False))


def test_zero_intermediate_node_rejected():
    cfg = static_config(c1_f=0.0, c_on_f=0.0)
    assert any(v.field == "topology.stages.0.hold_capacitance_f" for v in config_violations(cfg))


def test_electrode_count_is_derived(static_cfg):
    assert static_cfg.electrode_count == 32
    assert static_cfg.with_(electrode_count=31).electrode_count == 31
    assert config_violations(static_cfg.with_(electrode_count=31))


def test_crosstalk_checks(dynamic_cfg):
    bad = dynamic_cfg.with_(crosstalk=CrosstalkMatrix.from_pairs(4, {(0, 0): 0.1}))
    assert config_violations(bad)
    assert config_violations(dynamic_cfg.with_(crosstalk=CrosstalkMatrix.zeros(3)))
    assert not config_violations(dynamic_cfg.with_(crosstalk=dynamic_crosstalk()))


def test_routing_must_match_outputs(dynamic_cfg):
    assert not config_violations(dynamic_cfg.with_(routing=DynamicRouting(4, 3, 2)))
    assert config_violations(dynamic_cfg.with_(routing=DynamicRouting(4, 3, 3)))
    assert config_violations(dynamic_cfg.with_(routing=DynamicRouting(2, 3)))


def test_violations_are_all_collected():
    cfg = static_config(c1_f=-1.0, r_on_ohm=-5.0)
    assert len(config_violations(cfg)) >= 3


switches = st.builds(SwitchSpec, r_on_ohm=st.floats(0.1, 1e3), c_on_f=st.floats(0, 1e-9))


@given(st.floats(0, 1e-8), st.floats(1e-12, 1e-9), st.floats(0.1, 100), st.integers(1, 7),
       st.integers(1, 8), st.booleans())
def test_validate_idempotent(c1, c_on, r_on, s1, s2, two_step):
    cfg = static_config(c1_f=c1, c_on_f=c_on, r_on_ohm=r_on, stage1_outputs=s1,
                        stage2_outputs=s2, two_step=two_step)
    first = config_violations(cfg)
    assert config_violations(cfg) == first
    if not first:
        assert validate_config(validate_config(cfg)) == cfg


# --- serialization -----------------------------------------------------------


@given(st.floats(0, 1e-8), st.floats(0, 1e-9), st.floats(0.1, 100), st.integers(1, 7),
       st.booleans(), st.floats(-1, 1))
def test_dict_roundtrip(c1, c_on, r_on, s1, two_step, droop):
    from tdmvolt.model import LeakageSpec

    cfg = static_config(c1_f=c1, c_on_f=c_on, r_on_ohm=r_on, stage1_outputs=s1, two_step=two_step,
                        leakage=LeakageSpec(droop, 10.0))
    d = json.loads(json.dumps(config_to_dict(cfg)))
    assert config_from_dict(d) == cfg


def test_roundtrip_with_crosstalk_and_routing(dynamic_cfg):
    cfg = dynamic_cfg.with_(crosstalk=dynamic_crosstalk(), routing=DynamicRouting(4, 1))
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


def test_sparse_crosstalk_form(dynamic_cfg):
    d = config_to_dict(dynamic_cfg)
    d["crosstalk"] = {"n": 4, "pairs": [[1, 0, 0.0355], [2, 0, 0.0398], [3, 0, 0.0178]]}
    d["notes"] = "ignored"
    assert config_from_dict(d).crosstalk == dynamic_crosstalk()


def test_golden_configs_match_presets(configs_dir):
    assert load_config(configs_dir / "static_32ch.json") == static_config()
    assert load_config(configs_dir / "dynamic_4ch.json") == dynamic_config()
    assert load_config(configs_dir / "static_32ch_no_c1.json") == static_config(c1_f=0.0)


def test_stage_address_bits():
    sw = SwitchSpec(1.0)
    assert DemuxStage(8, 8, sw, 1e-9).address_bits == 3
    assert DemuxStage(5, 5, sw, 1e-9).address_bits == 3
    assert DemuxStage(1, 1, sw, 1e-9).address_bits == 0
