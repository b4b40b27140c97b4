"""Magneto-inductive relative localization for UAV-on-UGV docking.

Modules, from the physics up:

``geometry``     frames, poses and the four-anchor pad layout
``magnetics``    dipole field and coil voltage forward model
``dsp``          FDM synthesis, 12-bit ADC and flattop amplitude extraction
``calibration``  static per-anchor gain identification
``solver``       Nelder-Mead inverse solve with warm start and outlier gate
``fusion``       position/velocity EKF and ToF step filter
``simulator``    closed-loop docking missions
``metrics``      RMSE, success rule, touchdown accuracy
``cli``          batch command line
"""
from .calibration import CalibrationCoefficients, apply_calibration, calibrate
from .dsp import AdcConfig, SampleFrame, SpectralAmplitudes, extract_amplitudes, synthesize_frame
from .errors import *  # noqa: F401,F403
from .fusion import EkfConfig, EkfState, TofFilterState, ekf_predict, ekf_update_position, ekf_update_tof, tof_step_filter
from .geometry import AnchorConfig, AnchorLayout, Pose, default_layout, receiver_normal_in_B
from .magnetics import CoilParams, ForwardModel, ReceiverChain, dipole_field, forward_voltages, induced_voltage
from .metrics import axiswise_rmse, classify_success, rmse_3d, touchdown_error
from .simulator import NoiseConfig, ScenarioConfig, run_batch, run_trial
from .solver import MiEstimate, SearchBox, SolverOptions, cost, estimate_position, nelder_mead

__version__ = "0.1.0"
