import numpy as np
import pytest
from hypothesis import given, strategies as st

from tdmvolt.errors import AmplitudeExceedsFullScale
from tdmvolt.scheduler import VoltageProgram
from tdmvolt.waveforms import (
    DC,
    PiecewiseLinear,
    Sine,
    WaveformSpec,
    programs_from_dict,
    read_programs_csv,
    reconstruction_error,
    sample,
    sine_bank,
    spec_from_dict,
    spec_to_dict,
    write_programs_csv,
    zoh_reference,
)


def test_sine_samples():
    p = sample(WaveformSpec(Sine(2.0, 250e3), 4e-6), 1e6)
    np.testing.assert_allclose(p.samples, [0, 2, 0, -2], atol=1e-12)
    assert p.rate_hz == 1e6


def test_dc_gives_dc_program():
    p = sample(WaveformSpec(DC(3.3), 0.0), 1e3, channel_id=5)
    assert p.is_dc and p.value == 3.3 and p.channel_id == 5


def test_pwl():
    spec = WaveformSpec(PiecewiseLinear(((0, 0), (2e-6, 4))), 4e-6)
    np.testing.assert_allclose(sample(spec, 1e6).samples, [0, 2, 4, 4])
    with pytest.raises(ValueError):
        PiecewiseLinear(((0, 0), (0, 1)))


def test_full_scale_guard():
    with pytest.raises(AmplitudeExceedsFullScale):
        sample(WaveformSpec(Sine(8, 1e3, offset_v=3), 1e-3), 1e6, full_scale_v=10)
    sample(WaveformSpec(Sine(10, 1e3), 1e-3), 1e6, full_scale_v=10)


def test_duration_must_fit_rate():
    with pytest.raises(ValueError):
        sample(WaveformSpec(Sine(1, 1e3), 2.5e-6), 1e6)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(1e3, 1e7))
def test_zoh_reference_holds_each_sample(samples, rate):
    p = VoltageProgram.waveform(0, samples, rate)
    ref = zoh_reference(p)
    k = np.arange(len(samples))
    np.testing.assert_array_equal(ref(k / rate), samples)
    np.testing.assert_array_equal(ref((k + 0.5) / rate), samples)


def test_reconstruction_error_zero_for_reference():
    p = VoltageProgram.waveform(0, [1.0, -1.0, 0.5], 1e6)
    t = np.arange(30) / 10e6
    err = reconstruction_error(t, zoh_reference(p)(t), zoh_reference(p))
    assert err.max_span_v == 0 and err.rms_boundary_v == 0


def test_reconstruction_error_with_delay():
    p = VoltageProgram.waveform(0, [1.0, 2.0], 1e6)
    t = np.array([0.5e-6, 1.5e-6])
    err = reconstruction_error(t, np.array([1.0, 2.0]), zoh_reference(p), delay_s=0.25e-6)
    assert err.max_boundary_v == 0


@given(st.sampled_from(["dc", "sine", "pwl"]), st.floats(-5, 5))
def test_spec_dict_roundtrip(kind, x):
    spec = {"dc": WaveformSpec(DC(x), 1e-3),
            "sine": WaveformSpec(Sine(abs(x), 1e3, 0.1, 0.2), 1e-3),
            "pwl": WaveformSpec(PiecewiseLinear(((0, x), (1e-3, -x))), 1e-3)}[kind]
    assert spec_from_dict(spec_to_dict(spec)) == spec


def test_programs_csv_roundtrip(tmp_path):
    progs = [VoltageProgram.dc(0, 1.5, 1e6), VoltageProgram.waveform(1, [0.1, 0.2, 0.3], 1e6)]
    write_programs_csv(progs, tmp_path / "p.csv")
    assert read_programs_csv(tmp_path / "p.csv", 1e6) == progs


def test_programs_from_dict():
    assert [p.value for p in programs_from_dict({"dc_v": [1, 2]}, 1e3)] == [1.0, 2.0]
    d = {"channels": [{"channel": 2, "waveform": {"kind": "sine", "amplitude_v": 1,
                                                  "frequency_hz": 1e5, "duration_s": 1e-5}}]}
    (p,) = programs_from_dict(d, 1e6, 10.0)
    assert p.channel_id == 2 and len(p) == 10


def test_sine_bank():
    bank = sine_bank([50e3, 100e3], 1.0, 20e-6, 1e6)
    assert [p.channel_id for p in bank] == [0, 1]
    assert all(len(p) == 20 for p in bank)
