"""Desk-scale single-stage weakly-supervised semantic segmentation.

A small ViT backbone produces class activation maps whose dual-threshold
pseudo labels drive two contrast losses: a patch token contrast against
over-smoothing and an InfoNCE class token contrast between global images
and local crops, alongside a jointly trained segmentation decoder.
"""

from .cam import (
    BACKGROUND,
    IGNORE,
    ActivationMap,
    ClassifierHead,
    cls_loss,
    compute_cam,
    gmp_classify,
    seg_pseudo_labels,
    token_pseudo_labels,
)
from .config import TrainConfig, desk_preset, get_preset, paper_preset
from .ctc import (
    ContrastBatch,
    CropProposal,
    ProjectionHead,
    crop_and_augment,
    ctc_loss,
    ema_update,
    project,
    sample_crops,
)
from .data import Sample, gen_shapes_dataset, load_dir_dataset
from .diagnostics import blockwise_similarity, evaluate_model, run_ablation
from .metrics import IoUReport, miou
from .ptc import PairRelations, pairwise_relations, ptc_loss
from .segmenter import (
    LossBreakdown,
    SegDecoder,
    ToCoNet,
    decode,
    lr_schedule,
    par_refine,
    seg_loss,
    total_loss,
)
from .train import train, train_step
from .vit import (
    ForwardTrace,
    TokenGrid,
    VitConfig,
    ViTEncoder,
    class_attention_map,
    interpolate_pos_embed,
)

__version__ = "0.1.0"
