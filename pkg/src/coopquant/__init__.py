"""Quantized cooperative BEV perception: a synthetic multi-agent pipeline
with post-training quantization, a learned feature codebook, a binary wire
format, and a latency-aware system simulation.

Modules
-------
grids      deterministic RNG, BEV feature grids, poses, bilinear warping
scene      scenario generation, observations, labels
model      the full-precision pipeline (encoders, fusion, head) + training
quantize   affine quantization, scale search, adaptive rounding
calibrate  block-wise calibration to INT precision
codebook   feature codebook learning and joint fine-tuning
comms      wire format, channel/latency models, system simulation
config     run configuration, hashing, artifact manifest
cli        the ``coopquant`` command-line driver
report     markdown/SVG report rendering
"""

from .grids import FeatureGrid, Pose2D, RngStream
from .quantize import QuantParams, fake_quant, init_maxmin, scale_search
from .calibrate import CalibConfig, QuantizedModel, calibrate, dataset_ap
from .codebook import Codebook, assign, reconstruct, train_stage1
from .comms import ChannelModel, LatencyProfile, WireMessage, simulate_system
from .model import ModelParams, TrainConfig, eval_ap, fit_fp

__version__ = "0.1.0"

__all__ = [
    "FeatureGrid", "Pose2D", "RngStream",
    "QuantParams", "fake_quant", "init_maxmin", "scale_search",
    "CalibConfig", "QuantizedModel", "calibrate", "dataset_ap",
    "Codebook", "assign", "reconstruct", "train_stage1",
    "ChannelModel", "LatencyProfile", "WireMessage", "simulate_system",
    "ModelParams", "TrainConfig", "eval_ap", "fit_fp",
    "__version__",
]
