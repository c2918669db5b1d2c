"""Deferred acceptance with mixed tie-breaking, local propensity scores and score-controlled IV."""

from .da import Cutoff, MatchOutcome, run_da, run_serial_dictatorship, verify_stability
from .distributions import CdfFamily
from .econometrics import (EstimationFrame, FitResult, balance_regression, build_frame, build_rv_controls,
                           two_stage_least_squares)
from .market import Applicant, ApplicantType, Market, MarketError, School, scale_raw_tiebreaker, validate_market
from .oracle import OracleResult, convergence_sweep, mc_score
from .scores import ScoreTable, da_global_score, estimate_local_score, local_score, sd_global_score
from .synth import SynthConfig, generate

__version__ = "0.1.0"
