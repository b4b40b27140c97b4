"""Software receive chain: FDM synthesis, 12-bit ADC and flattop FFT analysis."""
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal.windows import flattop

from .errors import ConfigError, ContractViolation

FRAME_MAGIC = b"MIFR"
_HEADER = struct.Struct("<4sHH")
# Tones closer than this many bins share window main lobes.
MIN_SPACING_BINS = 3


@dataclass(frozen=True)
class AdcConfig:
    sample_rate: float = 518e3
    bits: int = 12
    full_scale: float = 3.0
    frame_length: int = 4096

    def __post_init__(self):
        n = self.frame_length
        if n < 8 or n & (n - 1):
            raise ConfigError(f"frame_length must be a power of two, got {n}")
        if not 1 <= self.bits <= 16:
            raise ConfigError("bits must be in 1..16")

    @property
    def lsb(self):
        return self.full_scale / 2**self.bits

    @property
    def max_code(self):
        return 2**self.bits - 1

    @property
    def bin_width(self):
        return self.sample_rate / self.frame_length

    @property
    def v_sat_thresh(self):
        """Default amplitude limit: 95 % of the half-range."""
        return 0.95 * self.full_scale / 2


@dataclass(frozen=True)
class SampleFrame:
    samples: np.ndarray
    timestamp: float = 0.0
    bits: int = 12
    clipped_count: int = field(default=None)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.int64)
        if s.size and (s.min() < 0 or s.max() > 2**self.bits - 1):
            raise ContractViolation("sample codes outside the ADC range")
        object.__setattr__(self, "samples", s)
        clipped = int(np.count_nonzero((s == 0) | (s == 2**self.bits - 1)))
        object.__setattr__(self, "clipped_count", clipped)


@dataclass(frozen=True)
class SpectralAmplitudes:
    amplitudes: np.ndarray
    saturated: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=float))
        object.__setattr__(self, "saturated", np.asarray(self.saturated, dtype=bool))


def _check_nyquist(frequencies, adc):
    f = np.asarray(frequencies, dtype=float)
    if np.any(f <= 0) or np.any(f >= adc.sample_rate / 2):
        raise ConfigError(f"tone frequencies must lie in (0, {adc.sample_rate / 2}) Hz")
    return f


def synthesize_frame(amplitudes, frequencies, phases, adc=None, noise_sigma=0.0,
                     rng_seed=0, timestamp=0.0):
    """Sum of sinusoids plus white noise, offset to mid-scale and quantised.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    adc = adc or AdcConfig()
    amps = np.asarray(amplitudes, dtype=float)
    if np.any(amps < 0):
        raise ContractViolation("tone amplitudes must be non-negative")
    f = _check_nyquist(frequencies, adc)
    ph = np.asarray(phases, dtype=float)
    n = np.arange(adc.frame_length)
    t = n / adc.sample_rate
    volts = amps @ np.sin(2.0 * np.pi * np.outer(f, t) + ph[:, None])
    if noise_sigma > 0:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        volts = volts + rng.normal(0.0, noise_sigma, size=n.size)
    codes = np.rint(volts / adc.lsb) + 2 ** (adc.bits - 1)
    codes = np.clip(codes, 0, adc.max_code).astype(np.int64)
    return SampleFrame(codes, timestamp=timestamp, bits=adc.bits)


def parabolic_interp(mag_left, mag_peak, mag_right):
    """Vertex of the parabola through three equally spaced magnitudes.

    Returns ``(delta_bins, refined_magnitude)``; a flat triple gives
    ``(0, mag_peak)``.
    """
    a, b, c = float(mag_left), float(mag_peak), float(mag_right)
    denom = a - 2.0 * b + c
    if abs(denom) < 1e-15 * max(abs(b), 1e-300):
        return 0.0, b
    delta = 0.5 * (a - c) / denom
    delta = min(max(delta, -0.5), 0.5)
    return delta, b - 0.25 * (a - c) * delta


class FlattopAnalyzer:
    """Cached window and per-offset response for one ADC configuration."""

    def __init__(self, adc):
        self.adc = adc
        n = adc.frame_length
        self.window = flattop(n, sym=False)
        self.coherent_sum = float(self.window.sum())
        self._n = np.arange(n)

    def response(self, delta):
        """Window gain at ``delta`` bins off-centre, normalised to 1 at 0."""
        k = np.exp(-2j * np.pi * delta * self._n / self.adc.frame_length)
        return abs(np.dot(self.window, k)) / self.coherent_sum

    def spectrum(self, frame):
        """Single-sided amplitude spectrum in volts (window-corrected)."""
        x = (frame.samples - 2 ** (self.adc.bits - 1)) * self.adc.lsb
        x = x - x.mean()
        return 2.0 * np.abs(np.fft.rfft(x * self.window)) / self.coherent_sum

    def tone_amplitude(self, mags, f):
        k0 = int(round(f / self.adc.bin_width))
        lo, hi = max(k0 - 1, 1), min(k0 + 1, mags.size - 2)
        k = lo + int(np.argmax(mags[lo:hi + 1]))
        delta, _ = parabolic_interp(mags[k - 1], mags[k], mags[k + 1])
        # the flattop lobe is too flat for the parabola's vertex height; use
        # the parabola only to place the tone and undo the window's scalloping
        return mags[k] / self.response(delta)


_ANALYZERS = {}


def _analyzer(adc):
    an = _ANALYZERS.get(adc)
    if an is None:
        an = _ANALYZERS[adc] = FlattopAnalyzer(adc)
    return an


def check_fdm_spacing(frequencies, adc):
    f = np.sort(_check_nyquist(frequencies, adc))
    gaps = np.diff(f) / adc.bin_width
    if gaps.size and gaps.min() < MIN_SPACING_BINS:
        raise ConfigError(
            f"anchor tones {gaps.min():.2f} bins apart; need >= {MIN_SPACING_BINS}"
        )


def extract_amplitudes(frame, frequencies, adc=None, v_sat_thresh=None):
    """Per-anchor tone amplitudes [V] with saturation flags.

    An anchor is flagged when its amplitude exceeds ``v_sat_thresh``. When
    the frame hit a rail, the anchors whose amplitude is at least half the
    strongest one are also flagged as the likely cause of clipping.
    """
    adc = adc or AdcConfig()
    if frame.samples.size != adc.frame_length:
        raise ContractViolation(
            f"frame has {frame.samples.size} samples, ADC expects {adc.frame_length}"
        )
    check_fdm_spacing(frequencies, adc)
    thresh = adc.v_sat_thresh if v_sat_thresh is None else v_sat_thresh
    an = _analyzer(adc)
    mags = an.spectrum(frame)
    amps = np.array([an.tone_amplitude(mags, f) for f in frequencies])
    saturated = amps > thresh
    if frame.clipped_count > 0:
        saturated |= amps >= 0.5 * amps.max()
    return SpectralAmplitudes(amps, saturated)


def write_frames(path, frames):
    """Replay file: per frame an 8-byte header (magic, bits, length) then LE int16 codes."""
    with open(path, "wb") as fh:
        for fr in frames:
            fh.write(_HEADER.pack(FRAME_MAGIC, fr.bits, fr.samples.size))
            fh.write(fr.samples.astype("<i2").tobytes())


def read_frames(path):
    frames = []
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        if len(data) - pos < _HEADER.size:
            raise ContractViolation("truncated frame header")
        magic, bits, length = _HEADER.unpack_from(data, pos)
        if magic != FRAME_MAGIC:
            raise ContractViolation(f"bad frame magic {magic!r}")
        pos += _HEADER.size
        nbytes = 2 * length
        if len(data) - pos < nbytes:
            raise ContractViolation("truncated frame payload")
        codes = np.frombuffer(data, dtype="<i2", count=length, offset=pos)
        frames.append(SampleFrame(codes.astype(np.int64), bits=bits))
        pos += nbytes
    return frames
