"""Blind MR image harmonization with a normalizing-flow prior trained on the target domain only."""

from .baselines import DomainTransform, ReferenceStats, histogram_match, low_freq_replace, simulate_domain
from .flow import FlowArchitecture, FlowModel, actnorm_initialize
from .harmonize import HarmonizeConfig, HarmonizeTrace, distance, harmonize, harmonize_batch
from .metrics import EvalReport, evaluate, psnr, ssim
from .train import TargetDataset, TrainConfig, nll_bits_per_dim, train

__version__ = "0.1.0"
