import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magloc.dsp import (AdcConfig, SampleFrame, extract_amplitudes, parabolic_interp, read_frames,
                        synthesize_frame, write_frames)
from magloc.errors import ConfigError, ContractViolation
from magloc.geometry import ANCHOR_FREQUENCIES

ADC = AdcConfig()
FREQS = np.array(ANCHOR_FREQUENCIES)
BIN = ADC.bin_width


def tone_frame(amp, f, phase=0.3, noise=0.0, seed=0):
    amps = np.zeros(4)
    amps[0] = amp
    freqs = FREQS.copy()
    freqs[0] = f
    return synthesize_frame(amps, freqs, [phase, 0, 0, 0], ADC, noise, seed), freqs


def test_adc_defaults():
    assert ADC.sample_rate == 518e3 and ADC.bits == 12 and ADC.frame_length == 4096
    assert np.isclose(BIN, 126.46484375)
    assert np.isclose(ADC.v_sat_thresh, 0.95 * 1.5)


def test_silence_is_mid_scale():
    fr = synthesize_frame(np.zeros(4), FREQS, np.zeros(4), ADC)
    assert np.all(fr.samples == 2048) and fr.clipped_count == 0


def test_bin_centre_tone_round_trip():
    f = 1600 * BIN
    fr, freqs = tone_frame(0.1, f)
    amp = extract_amplitudes(fr, freqs, ADC).amplitudes[0]
    assert abs(amp / 0.1 - 1) < 0.002


def test_half_bin_tone_round_trip():
    f = 1600.5 * BIN
    fr, freqs = tone_frame(0.1, f)
    amp = extract_amplitudes(fr, freqs, ADC).amplitudes[0]
    assert abs(amp / 0.1 - 1) < 0.002


def test_four_tone_noiseless_round_trip():
    amps = np.array([0.3, 0.05, 0.12, 0.8])
    fr = synthesize_frame(amps, FREQS, [0.1, 1.2, 2.3, 3.4], ADC)
    got = extract_amplitudes(fr, FREQS, ADC)
    assert np.allclose(got.amplitudes / amps, 1, atol=0.002)
    assert not got.saturated.any()


def test_over_range_clips_and_flags():
    fr, freqs = tone_frame(1.6, 1600 * BIN)
    assert fr.clipped_count > 0
    assert extract_amplitudes(fr, freqs, ADC).saturated[0]


def test_threshold_flags_without_clipping():
    fr, freqs = tone_frame(1.0, 1600 * BIN)
    assert fr.clipped_count == 0
    assert extract_amplitudes(fr, freqs, ADC, v_sat_thresh=0.5).saturated[0]
    assert not extract_amplitudes(fr, freqs, ADC).saturated[0]


def test_fdm_spacing_enforced():
    freqs = FREQS.copy()
    freqs[1] = freqs[0] + 2 * BIN
    fr = synthesize_frame(np.full(4, 0.1), freqs, np.zeros(4), ADC)
    with pytest.raises(ConfigError):
        extract_amplitudes(fr, freqs, ADC)


def test_nyquist_enforced():
    with pytest.raises(ConfigError):
        synthesize_frame(np.full(4, 0.1), [260e3, 1e5, 1.1e5, 1.2e5], np.zeros(4), ADC)


def test_negative_amplitude_rejected():
    with pytest.raises(ContractViolation):
        synthesize_frame([-0.1, 0, 0, 0], FREQS, np.zeros(4), ADC)


def test_frame_length_checked():
    with pytest.raises(ContractViolation):
        extract_amplitudes(SampleFrame(np.full(1024, 2048)), FREQS, ADC)


def test_parabolic_examples():
    assert parabolic_interp(0.5, 1.0, 0.5) == (0.0, 1.0)
    d, m = parabolic_interp(0.2, 1.0, 0.6)
    # delta = 0.5 (0.2 - 0.6) / (0.2 - 2 + 0.6), refined = 1 - 0.25 (-0.4) delta
    assert np.isclose(d, 1 / 6) and np.isclose(m, 1 + 0.1 / 6)
    assert np.isclose(d, 0.1667, atol=1e-4) and np.isclose(m, 1.0167, atol=1e-4)
    assert parabolic_interp(1.0, 1.0, 1.0) == (0.0, 1.0)


def test_replay_file_round_trip(tmp_path):
    frames = [synthesize_frame(np.full(4, 0.2), FREQS, np.zeros(4), ADC, 0.01, s) for s in range(3)]
    path = tmp_path / "frames.bin"
    write_frames(path, frames)
    assert path.stat().st_size == 3 * (8 + 2 * 4096)
    back = read_frames(path)
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(frames, back))


def test_replay_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(4))
    with pytest.raises(ContractViolation):
        read_frames(path)


@given(st.floats(0.0, 1.0), st.floats(0.1, 1.4))
def test_any_fractional_bin_single_tone(frac, amp):
    # from 0.1 V (~137 LSB) up, so 12-bit rounding stays well inside the bound
    fr, freqs = tone_frame(amp, (1200 + frac) * BIN)
    got = extract_amplitudes(fr, freqs, ADC).amplitudes[0]
    assert abs(got / amp - 1) < 0.002


@given(st.lists(st.floats(0.02, 0.35), min_size=4, max_size=4),
       st.lists(st.floats(0, 2 * np.pi), min_size=4, max_size=4),
       st.integers(0, 2**32 - 1))
def test_four_tone_40db_within_one_percent(amps, phases, seed):
    amps = np.array(amps)
    # per-tone SNR = (A^2 / 2) / sigma^2 >= 1e4 for the weakest tone
    sigma = amps.min() / (100 * np.sqrt(2))
    fr = synthesize_frame(amps, FREQS, phases, ADC, sigma, seed)
    got = extract_amplitudes(fr, FREQS, ADC).amplitudes
    assert np.all(np.abs(got / amps - 1) < 0.01)


@given(st.lists(st.floats(0, 2 * np.pi), min_size=8, max_size=8))
def test_phase_invariance(ph):
    amps = np.array([0.2, 0.1, 0.3, 0.15])
    a = extract_amplitudes(synthesize_frame(amps, FREQS, ph[:4], ADC), FREQS, ADC).amplitudes
    b = extract_amplitudes(synthesize_frame(amps, FREQS, ph[4:], ADC), FREQS, ADC).amplitudes
    assert np.all(np.abs(a / b - 1) < 0.002)


@given(st.integers(0, 2**32 - 1))
def test_determinism(seed):
    a = synthesize_frame(np.full(4, 0.2), FREQS, np.ones(4), ADC, 0.05, seed)
    b = synthesize_frame(np.full(4, 0.2), FREQS, np.ones(4), ADC, 0.05, seed)
    assert np.array_equal(a.samples, b.samples)


@given(st.floats(100, 900), st.floats(0.0, 1.0))
def test_quantisation_floor(lsbs, frac):
    amp = lsbs * ADC.lsb
    fr, freqs = tone_frame(amp, (900 + frac) * BIN)
    got = extract_amplitudes(fr, freqs, ADC).amplitudes[0]
    assert abs(got / amp - 1) < 0.01
