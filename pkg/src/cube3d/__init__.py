"""Spatiotemporal ConvNet toolkit for multiclass video anomaly recognition.

Built from scratch on numpy: 16-frame cube assembly with flip augmentation,
a C3D-style 3D ConvNet with hand-written forward/backward passes, SGD
training with a plateau schedule, windowed inference, and a full
ROC/AUC/confusion-matrix evaluation stack.
"""

from .data import (
    CLASS_NAMES,
    NORMAL_INDEX,
    AnnotationRecord,
    Cube,
    DatasetManifest,
    FrameSequence,
    ManifestEntry,
    assemble_cubes,
    augment_flips,
    augment_manifest,
    dataset_stats,
    ingest_frames,
    preprocess_sequence,
    resize_bilinear,
    synth_fixture,
)
from .errors import (
    ConfigError,
    Cube3DError,
    DivergenceError,
    FormatError,
    ShapeError,
    StateError,
    ValidationError,
)
from .layers import (
    BatchNorm,
    Conv3D,
    Dense,
    Dropout,
    Flatten,
    MaxPool3D,
    ReLU,
    relu,
    softmax,
    softmax_cross_entropy,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    RocCurve,
    average_accuracy,
    build_report,
    micro_macro_auc,
    precision_recall_f1,
    roc_auc,
)
from .model import (
    AnomalyNet,
    InitSpec,
    build_compact_model,
    build_model,
    init_weights,
    load_checkpoint,
    load_pretrained,
    save_checkpoint,
    shape_audit,
)
from .tensor import flip, load_vten, matmul, pad, save_vten, tensor_new
from .training import (
    EpochReport,
    PlateauScheduler,
    PredictionTrace,
    SGDMomentum,
    TrainConfig,
    evaluate_split,
    predict_video,
    train,
    train_on_arrays,
)

__version__ = "0.1.0"
