"""Divide-and-conquer prohibited-item recognition for X-ray scans."""

from .backbone import BackboneConfig, TinyBackbone
from .config import ExperimentConfig, OptimConfig, DataConfig
from .dataset import (
    CATEGORY_NAMES,
    NUM_CATEGORIES,
    classify_difficulty,
    dataset_stats,
    load_annotations,
    save_annotations,
)
from .gate import CrossAttention, GateNode, fuse_for_gate, position_encoding, route
from .losses import (
    LossConfig,
    asymmetric_loss,
    batch_lambda,
    bce,
    combined_multilabel_loss,
    scaled_task_loss,
)
from .metrics import (
    Detection,
    Instance,
    MetricsReport,
    average_precision,
    box_iou,
    build_report,
    coco_summary,
    fp_rate,
    image_error_rate,
    mask_iou,
    match_detections,
    multilabel_map,
)
from .multilabel import MultiLabelNode
from .pipeline import DivideAndConquerModel, ModelConfig, infer, multilabel_infer, train_step
from .pyramid import (
    DamConfig,
    DenseAttentionModule,
    PyramidEnhancer,
    aggregate_levels,
    resize_to_level,
)
from .synth import SynthSpec, synth_generate

__version__ = "0.1.0"
