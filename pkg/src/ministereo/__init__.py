"""Desk-scale stereo disparity estimation with built-in autodiff and MACs accounting."""

from .config import NetworkConfig, SceneSpec, StageConfig, micro_config, paper_like_config
from .data import StereoSample, gen_synthetic_dataset
from .metrics import MetricReport, bad_x, d1, epe, report
from .network import (DisparityMap, ForwardResult, WeightStore, forward,
                      init_weights, profile_macs)
from .tensor import MacsLedger
from .training import (SyntheticOracle, TrainLog, disparity_loss, feature_align_loss,
                       perturb, run_stage1, run_stage2, run_stage3)

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig", "SceneSpec", "StageConfig", "micro_config", "paper_like_config",
    "StereoSample", "gen_synthetic_dataset",
    "MetricReport", "bad_x", "d1", "epe", "report",
    "DisparityMap", "ForwardResult", "WeightStore", "forward", "init_weights",
    "profile_macs", "MacsLedger",
    "SyntheticOracle", "TrainLog", "disparity_loss", "feature_align_loss",
    "perturb", "run_stage1", "run_stage2", "run_stage3",
    "__version__",
]
