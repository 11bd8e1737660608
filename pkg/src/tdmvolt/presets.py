"""The two reference boards: a 32-channel static tree and a 4-channel dynamic demux.

Values not published for these boards are marked ASSUMED; they are ordinary
inputs and every derived check reports against them.
"""

from __future__ import annotations

from .model import (
    CrosstalkMatrix,
    DacSpec,
    DemuxStage,
    DemuxTopology,
    DynamicRouting,
    LeakageSpec,
    SwitchSpec,
    SystemConfig,
)

C_ON_8TO1_F = 185e-12
C1_F = 2.7e-9
C2_F = 470e-12
C_HOLD_DYNAMIC_F = 120e-12

STATIC_R_ON_OHM = 10.0  # ASSUMED
STATIC_DAC_TAU_S = 20e-9  # ASSUMED
DYNAMIC_R_ON_OHM = 100.0  # ASSUMED
DYNAMIC_DAC_TAU_S = 5e-9  # ASSUMED

DROOP_V_PER_S = -19.2e-3
DROOP_REFERENCE_V = 10.0

STATIC_WORST_CROSSTALK = 0.2512  # -12 dB, channel 2 driven by channel 1
DYNAMIC_CROSSTALK = (0.0355, 0.0398, 0.0178)  # -29, -28, -35 dB on channels 2..4


def static_config(c1_f: float = C1_F, c_on_f: float = C_ON_8TO1_F, *,
                  r_on_ohm: float = STATIC_R_ON_OHM, stage1_outputs: int = 4,
                  stage2_outputs: int = 8, two_step: bool = True,
                  crosstalk: CrosstalkMatrix | None = None,
                  leakage: LeakageSpec | None = None) -> SystemConfig:
    sw = SwitchSpec(r_on_ohm=r_on_ohm, c_on_f=c_on_f)
    topo = DemuxTopology((
        DemuxStage(fanout=8, outputs_used=stage1_outputs, switch=sw, hold_capacitance_f=c1_f),
        DemuxStage(fanout=8, outputs_used=stage2_outputs, switch=sw, hold_capacitance_f=C2_F),
    ))
    slots = (stage1_outputs + 1 if two_step else stage1_outputs) * stage2_outputs
    return SystemConfig(
        name="static-32ch",
        dac=DacSpec(update_rate_hz=1.5e6, resolution_bits=16, full_scale_v=10.0,
                    settle_time_constant_s=STATIC_DAC_TAU_S),
        topology=topo,
        per_channel_rate_hz=1.5e6 / slots,
        leakage=leakage or LeakageSpec(DROOP_V_PER_S, DROOP_REFERENCE_V),
        crosstalk=crosstalk,
        two_step_charging=two_step,
    )


def dynamic_config(*, r_on_ohm: float = DYNAMIC_R_ON_OHM,
                   crosstalk: CrosstalkMatrix | None = None,
                   routing: DynamicRouting | None = None) -> SystemConfig:
    sw = SwitchSpec(r_on_ohm=r_on_ohm)
    topo = DemuxTopology((
        DemuxStage(fanout=4, outputs_used=4, switch=sw, hold_capacitance_f=C_HOLD_DYNAMIC_F,
                   has_decoder=False),
    ))
    return SystemConfig(
        name="dynamic-4ch",
        dac=DacSpec(update_rate_hz=4e6, resolution_bits=14, full_scale_v=10.0,
                    settle_time_constant_s=DYNAMIC_DAC_TAU_S),
        topology=topo,
        per_channel_rate_hz=1e6,
        leakage=LeakageSpec(0.0, DROOP_REFERENCE_V),
        crosstalk=crosstalk,
        routing=routing,
    )


def static_worst_crosstalk(n: int = 32) -> CrosstalkMatrix:
    return CrosstalkMatrix.from_pairs(n, {(1, 0): STATIC_WORST_CROSSTALK})


def dynamic_crosstalk() -> CrosstalkMatrix:
    return CrosstalkMatrix.from_pairs(4, {(k + 1, 0): c for k, c in enumerate(DYNAMIC_CROSSTALK)})
