"""How the default NoiseConfig was chosen.

Nothing in the hardware description gives sensor noise densities, so the
simulator's noise magnitudes are set at the system level: hover error in
a 1-10 cm band with every trial succeeding, and flow-only excursions that
drift out of the geofence. The seeds used here (100 and up) are disjoint
from the seeds the acceptance tests use (0-9).

Run with ``python demos/noise_calibration.py [n_seeds]``. With the default
10 seeds it takes about fifteen minutes on one core.
"""
# %%
import sys
from collections import Counter
from dataclasses import replace

from magloc import NoiseConfig, ScenarioConfig, run_batch

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 10
seeds = range(100, 100 + n_seeds)


def summary(report):
    reasons = Counter(t.failure_reason for t in report.trials if not t.success)
    fails = ", ".join(f"{k} x{v}" for k, v in reasons.items()) or "none"
    return (f"mean RMSE {100 * report.mean_rmse:5.2f} cm  success "
            f"{100 * report.success_rate:3.0f}%  failures: {fails}")


# %% [markdown]
# ## ADC noise on its own
# Amplitude noise from the ADC is averaged down by the 4096-point FFT, so
# even a noisy front end leaves the hover error around a centimetre.

# %%
hover = ScenarioConfig.default("S1_Hover")
for sigma in (0.02, 0.05, 0.10):
    cfg = replace(hover, noise=replace(NoiseConfig(), adc_noise_sigma=sigma, gain_drift_sigma=0.0))
    print(f"adc_noise_sigma {sigma:.2f} V   ", summary(run_batch(cfg, seeds[:5])[1]))

# %% [markdown]
# ## Gain error between calibration and flight
# The dominant error is systematic: each anchor's gain moves a little after
# the on-pad calibration. Right above the pad the four vertical fields all
# pass through zero near z = 0.18 m, and just below that height the
# amplitudes hardly change with x and y. There a gain error of 10% or more
# can fold the fix sideways during takeoff, and some trials are lost. The
# default, 0.07, keeps the mean well inside the band. Over 30 seeds it
# still loses about one trial in thirty this way.

# %%
for drift in (0.05, 0.07, 0.10, 0.15):
    cfg = replace(hover, noise=replace(NoiseConfig(), gain_drift_sigma=drift))
    print(f"gain_drift_sigma {drift:.2f}      ", summary(run_batch(cfg, seeds)[1]))

# %% [markdown]
# ## Optical-flow bias for the baseline
# With the MI fixes switched off the in-out mission relies on integrated
# flow. The bias random walk is set so that the side excursions end outside
# the 0.5 m geofence.

# %%
inout = ScenarioConfig.default("S1_InOut", disable_mi=True)
for walk in (0.005, 0.02):
    cfg = replace(inout, noise=replace(NoiseConfig(), flow_bias_drift=walk))
    print(f"flow_bias_drift {walk:.3f} m/s/rt(s)", summary(run_batch(cfg, seeds[:5])[1]))
