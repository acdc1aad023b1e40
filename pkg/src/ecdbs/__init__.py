"""End-to-end hyperspectral change detection with learned band selection."""

from .graph import (
    AssignmentMatrix,
    NumericalError,
    SimilarityMatrix,
    assignment_matrix,
    build_similarity,
    jacobi_eigh,
    kmeans,
    normalize_adjacency,
    spectral_cluster,
)
from .hsi import (
    HsiCube,
    LabelMask,
    PatchSet,
    SplitSpec,
    band_entropy,
    difference_image,
    extract_patches,
    read_cube,
    read_labels,
    split,
    write_change_map,
    write_csv_report,
    write_cube,
    write_labels,
)
from .network import EcdbsModel, count_parameters, load_checkpoint, save_checkpoint
from .selection import TemperatureSchedule, harden, intra_cluster_softmax
from .tensor import Tape, Tensor
from .training import (
    Adam,
    ConfusionMatrix,
    LossConfig,
    MetricsReport,
    TrainConfig,
    evaluate,
    metrics,
    predict_full,
    synth_generate,
    train,
)

__version__ = "0.1.0"
