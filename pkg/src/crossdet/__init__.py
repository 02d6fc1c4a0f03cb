"""Cross-dataset object detection toolkit.

Merges per-dataset label spaces into one hybrid space, masks the
classification loss so unlabeled classes never receive wrong negatives,
and ships the surrounding machinery: annotation ingest, anchor assignment,
evaluation reports, a deterministic synthetic benchmark, and a linear
trainer with verified gradients.
"""

from .anchors import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorConfig,
    AnchorSet,
    Assignment,
    assign,
    decode_deltas,
    generate_anchors,
    iou,
    iou_matrix,
    regression_targets,
)
from .errors import (
    ConfigError,
    CountMismatch,
    CrossDetError,
    DanglingReference,
    DimensionMismatch,
    DivergedLoss,
    DuplicateDataset,
    EmptyConfig,
    InvalidPolicy,
    InvertedBox,
    MalformedDocument,
    MalformedLine,
    MissingDifficultyTags,
    NonFiniteLogit,
    NonPositiveBox,
    OverlappingMergeGroups,
    ThresholdOrder,
    UnknownClass,
    UnknownDataset,
    UnknownImage,
    UnknownSourceClass,
)
from .evaluation import (
    ABSORBED,
    FP,
    TP,
    Detection,
    EvalReport,
    average_precision,
    coco_report,
    derive_difficulty,
    match_detections,
    read_detections_jsonl,
    voc_report,
    wider_report,
    write_detections_jsonl,
)
from .experiments import (
    average_over_seeds,
    default_anchor_config,
    merge_world,
    parity_world,
    run_merge_experiment,
    run_parity_experiment,
)
from .gradcheck import (
    check_focal,
    check_head,
    check_smooth_l1,
    relative_error,
    run_gradcheck,
)
from .ingest import (
    Annotation,
    BBox,
    HybridManifest,
    ImageRecord,
    RawAnnotation,
    RawImage,
    build_manifest,
    clamp_box,
    parse_coco,
    parse_coco_file,
    parse_voc,
    parse_voc_document,
    parse_wider,
)
from .label_space import (
    ALL_COMPATIBLE,
    ALL_CONFLICTING,
    ConflictMatrix,
    HybridClass,
    HybridLabelSpace,
    MergeConfig,
    MergeGroup,
    SourceClass,
    build_label_space,
    class_sources_active_for,
    load_merge_config,
    parse_merge_config,
)
from .loss import (
    MASKED,
    NEGATIVE_ACTIVE,
    POSITIVE_TARGET,
    FocalParams,
    LossConfig,
    LossValue,
    build_loss_mask,
    build_naive_mask,
    classification_loss,
    focal_gradient,
    focal_term,
    regression_loss,
    sigmoid,
    smooth_l1,
    smooth_l1_grad,
)
from .synth import (
    DatasetSpec,
    SynthImage,
    SynthObject,
    SynthWorld,
    SynthWorldConfig,
    generate_world,
)
from .trainer import (
    MODE_AWARE,
    MODE_NAIVE,
    DetectorHead,
    TrainConfig,
    checkpoint_from_dict,
    checkpoint_to_dict,
    config_fingerprint,
    forward,
    history_to_csv,
    infer,
    nms,
    parse_mode,
    reference_schedule,
    run_inference,
    train,
)

__version__ = "0.1.0"
