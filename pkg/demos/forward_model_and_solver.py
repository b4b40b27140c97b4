"""From coil currents to a position fix, one step at a time.

Run with ``python demos/forward_model_and_solver.py``.
"""
# %% [markdown]
# ## The pad
# Four vertical transmit coils sit at the corners of a 44 x 25 cm pad, each
# on its own carrier around 200 kHz. Frame ``B`` has its origin at the pad
# centre, z up.

# %%
import numpy as np

from magloc import (AdcConfig, CalibrationCoefficients, ForwardModel, MiEstimate, Pose,
                    ReceiverChain, SpectralAmplitudes, calibrate, default_layout,
                    estimate_position, extract_amplitudes, receiver_normal_in_B,
                    synthesize_frame)

layout = default_layout()
for i, a in enumerate(layout.anchors, 1):
    print(f"anchor {i}: {a.position_B} m, {a.frequency / 1e3:.0f} kHz")

# %% [markdown]
# ## Voltages along a vertical line
# Above the pad centre all four anchors are equidistant, so the amplitude
# differences are only the carrier frequencies. Low down the centre is close
# to each coil's equatorial plane, where the vertical field is weak, so the
# amplitude first rises with height and only then falls off as 1/r^3.

# %%
model = ForwardModel(layout, chain=ReceiverChain(100.0))
up = np.array([0.0, 0.0, 1.0])
for z in (0.15, 0.30, 0.45, 0.60, 0.90):
    v = model.voltages([0.0, 0.0, z], up)
    print(f"z = {z:.2f} m  V = " + "  ".join(f"{1e3 * x:7.2f}" for x in v) + "  mV")

# %% [markdown]
# ## One frame through the ADC
# The receiver sees the sum of four tones plus noise, sampled at 518 kHz
# with 12 bits. A flattop FFT recovers each amplitude.

# %%
adc = AdcConfig()
truth = np.array([0.08, -0.05, 0.45])
att = Pose.from_euler(roll=0.05, pitch=-0.03)
n = receiver_normal_in_B(att)
gains = np.array([1.06, 0.94, 1.02, 0.98])  # real hardware is never nominal
rng = np.random.default_rng(2)
phases = rng.uniform(0, 2 * np.pi, 4)
frame = synthesize_frame(gains * model.voltages(truth, n), layout.frequencies, phases, adc,
                         noise_sigma=0.01, rng_seed=rng)
raw = extract_amplitudes(frame, layout.frequencies, adc)
print("extracted:", np.round(1e3 * raw.amplitudes, 3), "mV")
print("expected: ", np.round(1e3 * gains * model.voltages(truth, n), 3), "mV")

# %% [markdown]
# ## Calibration on the pad
# With the receiver resting level at the pad centre, the ratio of measured
# to modelled amplitude gives each anchor's gain coefficient.

# %%
cal_frames = [synthesize_frame(gains * model.voltages(np.zeros(3), up), layout.frequencies,
                               phases, adc, 0.002, rng) for _ in range(32)]
coeffs = calibrate(cal_frames, np.zeros(3), Pose.identity(), model, adc)
print("C =", np.round(coeffs.c, 4))

# %% [markdown]
# ## The fix
# The solver starts a few centimetres from the truth, as it would with a
# warm start from the previous cycle.

# %%
prev = MiEstimate.initial(truth + [0.03, 0.02, -0.02])
est = estimate_position(raw, coeffs, prev, n, model)
print("fix:", np.round(est.position_B, 4), "error", f"{1e3 * np.linalg.norm(est.position_B - truth):.2f} mm",
      "iterations", est.iterations)

unity = estimate_position(raw, CalibrationCoefficients.unity(), prev, n, model)
print("without calibration:", f"{1e3 * np.linalg.norm(unity.position_B - truth):.2f} mm")

# %% [markdown]
# ## A saturated channel
# If one anchor clips, it is dropped and the fix uses the remaining three.

# %%
clipped = SpectralAmplitudes(raw.amplitudes.copy(), np.array([True, False, False, False]))
clipped.amplitudes[0] = 1.4
est3 = estimate_position(clipped, coeffs, prev, n, model)
print("three anchors:", est3.active_anchors,
      f"error {1e3 * np.linalg.norm(est3.position_B - truth):.2f} mm")
