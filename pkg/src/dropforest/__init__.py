"""Dropout detection and iterative forest imputation for count matrices."""

from .errors import (
    ComponentCountError,
    ConfigError,
    DegenerateCellError,
    DimensionError,
    DropforestError,
    EmptyGroupError,
    InsufficientDataError,
    KTooLargeError,
    LengthMismatchError,
    MaskShapeError,
    MissingFitError,
    ParseError,
    ShapeMismatchError,
    UnreachableTargetError,
)
from .forest import ForestConfig, RegressionForest, predict, train_forest
from .impute import ImputationResult, impute, mean_initialize
from .matrix_io import (
    CountMatrix,
    NormalizationRecord,
    denormalize,
    normalize,
    read_labels,
    read_mask,
    read_matrix,
    write_labels,
    write_mask,
    write_matrix,
)
from .metrics import (
    Partition,
    ari,
    elbow_curve,
    group_summary,
    kmeans,
    nmi,
    pca,
    welch_t,
)
from .simulate import SimConfig, SimOutput, calibrate_dropout, simulate
from .zinb import (
    DropoutMask,
    EmConfig,
    StratumLabels,
    ZinbFit,
    build_mask,
    detect,
    dropout_posterior,
    estimate_dropout_targets,
    fit_matrix,
    fit_zinb,
)

__version__ = "0.1.0"
