"""Scale-complementary detection: complementary learning for scale-variable imagery."""

from .data import (
    Annotation,
    Box,
    Dataset,
    ImageSample,
    ScaleStats,
    SynthConfig,
    generate_synthetic,
    load_annotations,
    save_dataset,
    scale_variation_stats,
)
from .encoder import FeaturePyramid, PyramidEncoder, encode
from .scale_complement import (
    ComplementaryOutput,
    MultiLevelDeformableAttention,
    ScaleComplementDecoder,
    ScaleTargetMap,
    center_heatmap,
    decoder_forward,
    fuse,
    make_scale_target,
    scale_comple_loss,
)
from .contrast import (
    BACKGROUND,
    Assignment,
    CategoryGroups,
    ContrastiveComplement,
    ProposalFeatureBlock,
    assign_max_iou,
    contrastive_feature_loss,
    contrastive_forward,
    contrastive_label_loss,
    intra_category_select,
)
from .detector import (
    ComplementaryDetector,
    Detection,
    LossBreakdown,
    ModelConfig,
    TrainConfig,
    build_model,
    cascade_forward,
    decode_deltas,
    detect_loss,
    encode_deltas,
    infer,
    nms,
    propose,
    total_loss,
    train,
    train_step,
)
from .metrics import (
    MetricReport,
    compute_ap,
    evaluate,
    false_alarm_rate,
    false_alarm_rate_from_counts,
    iou,
    pairwise_iou,
    scale_bucket_metrics,
)

__version__ = "0.1.0"
