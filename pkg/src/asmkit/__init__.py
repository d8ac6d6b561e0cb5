"""Statistical shape models, shape-prior training losses, and evaluation metrics.

The pieces compose into one pipeline: build a PCA point-distribution model
from landmark shapes, smooth ground truths through it, train a compact
two-head regressor whose loss starts on the smoothed targets and gradually
hardens to the raw ones, and score the result with the standard landmark and
pose metrics. The `asmkit` command line drives the same pipeline end to end
on synthetic datasets or `.pts` annotation files.
"""

from .data import (
    Dataset,
    DatasetRecord,
    PtsRecord,
    SyntheticConfig,
    corrupt_observation,
    generate_synthetic,
    load_dataset,
    parse_pts,
    save_dataset,
    template_shape,
    write_pts,
)
from .errors import (
    AsmKitError,
    BatchMismatch,
    DegenerateNormalizer,
    DegenerateShape,
    DimensionMismatch,
    EmptyDataset,
    EmptyInput,
    EpochOutOfRange,
    FormatError,
    InsufficientData,
    InvalidConfig,
    ParamMismatch,
    RetentionUnsatisfiable,
    ShapeMismatch,
)
from .losses import (
    LossReport,
    LossWeights,
    PoseTriple,
    alpha_schedule,
    loss_asm,
    loss_facial,
    loss_gradients,
    loss_mse,
    loss_pose,
    loss_report,
    loss_total,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    auc,
    ced,
    default_eye_indices,
    evaluate,
    failure_rate,
    nme,
    pose_mae,
)
from .shape_core import (
    Shape,
    ShapeModel,
    SimilarityTransform,
    align_shapes,
    asm_transform,
    build_shape_model,
    clamp_params,
    deserialize_model,
    explained_variance_fraction,
    project,
    reconstruct,
    reconstruction_rms,
    serialize_model,
    similarity_fit,
)
from .trainer import (
    GradientCheckReport,
    OptimizerConfig,
    OptimizerState,
    Regressor,
    RegressorConfig,
    TrainingHistory,
    adam_step,
    backward,
    deserialize_regressor,
    forward,
    gradient_check,
    init_adam_state,
    init_regressor,
    serialize_regressor,
    train,
)

__version__ = "0.1.0"
