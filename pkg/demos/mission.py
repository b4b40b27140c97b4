"""Fly a few simulated docking missions and score them.

Run with ``python demos/mission.py`` (about a minute on one core).
"""
# %% [markdown]
# ## A hover-and-land mission
# The UAV starts on the pad, calibrates, climbs to 45 cm, hovers and lands.
# Everything it knows about its position comes from the four MI amplitudes,
# optical-flow odometry and a downward range sensor.

# %%
import numpy as np

from magloc import ScenarioConfig, run_trial
from magloc.metrics import trial_report

cfg = ScenarioConfig.default("S1_Hover", seed=1)
log = run_trial(cfg)
rep = trial_report(log)
print(f"{cfg.kind}: RMSE {100 * rep.rmse_3d:.2f} cm, success {rep.success}, "
      f"touchdown {100 * rep.touchdown_error:.1f} cm from centre")

# %% [markdown]
# ## What happened when
# Mission phases and sensor events go into the log alongside the time series.

# %%
for e in log.events:
    print(f"{e['t']:6.2f} s  {e['kind']}")
accepted = sum(m["accepted"] for m in log.mi)
print(f"{accepted}/{len(log.mi)} MI fixes accepted")

# %% [markdown]
# ## Estimate against truth during the hover

# %%
task = np.array([p == "task" for p in log.phase])
err = np.linalg.norm(log.ekf_position[task] - log.truth_B[task], axis=1)
for q in (50, 90, 99):
    print(f"p{q} error {100 * np.percentile(err, q):.2f} cm")

# %% [markdown]
# ## Odometry alone is not enough
# With the MI fixes switched off the estimate is integrated optical flow,
# whose bias walks away. The excursion to the side setpoints breaches the
# 0.5 m geofence.

# %%
flow = run_trial(ScenarioConfig.default("S1_InOut", seed=1, disable_mi=True))
mi = run_trial(ScenarioConfig.default("S1_InOut", seed=1))
for name, lg in (("flow only", flow), ("with MI", mi)):
    r = trial_report(lg)
    print(f"{name:10s} RMSE {100 * r.rmse_3d:6.2f} cm  success {r.success}  {r.failure_reason or ''}")

# %% [markdown]
# ## Tracking a moving pad
# In the linear scenario the UGV drives 0.5 m forward and back while the UAV
# holds station above the pad and then lands on it.

# %%
s2 = run_trial(ScenarioConfig.default("S2_Linear", seed=1))
r = trial_report(s2)
print(f"S2: RMSE vs reference {100 * r.rmse_3d:.2f} cm, success {r.success}, "
      f"max UGV excursion {np.max(s2.ugv_W[:, 0]):.2f} m")
