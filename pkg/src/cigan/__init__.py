"""Cycle-interactive GAN for unsupervised low-light enhancement and degradation."""

from .blocks import DualAttention, FeaturePerturbation, LowLightGuidedTransform, lip_fuse
from .discriminators import MultiScaleDiscriminator, ScoreSet
from .encoder import VGGEncoder, extract_layer, extract_pyramid
from .generators import DegradationGenerator, EnhancementGenerator
from .losses import LossBundle
from .training import CIGAN, TrainConfig, fit, lr_schedule, train_step

__version__ = "0.1.0"
