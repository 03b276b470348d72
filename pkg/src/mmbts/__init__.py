"""Missing-modality multi-modal brain tumor segmentation.

A feature-enhancing generator synthesizes a surrogate modality from whatever
acquisitions are available, a linear multi-source correlation constraint ties
the per-modality bottleneck features together, and an attention-fused
multi-encoder network produces the segmentation.
"""

from .dropout import PatternMask, apply_pattern, enumerate_patterns, sample_pattern
from .losses import (
    LossReport,
    SSIMConstants,
    dice_loss,
    generator_target,
    ssim_loss,
    total_loss,
)
from .metrics import ResultTable, dice_score, extract_surface, hausdorff
from .network import FeaturePyramid, NetworkConfig, SegmentationModel, build_network
from .pipeline import RunConfig, evaluate, load_checkpoint, save_checkpoint, train
from .volumes import (
    Modality,
    MultiModalVolume,
    PhantomSpec,
    Region,
    generate_phantom,
    labels_to_regions,
    load_subject,
    preprocess,
    save_subject,
)

__version__ = "0.1.0"
