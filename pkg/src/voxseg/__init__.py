"""Volumetric tumor segmentation with graph reasoning and mean-field fusion.

A numpy-only stack: a small reverse-mode autodiff tensor, 3-D convolution and
resampling kernels, a lattice-graph reasoning branch, an attention-gated
mean-field fusion loop, a two-path encoder-decoder, synthetic phantom data,
training with Adam, and the standard overlap/surface metrics.
"""

from .backbone import (
    Backbone,
    BackboneConfig,
    LossReport,
    SupervisionHead,
    class_indices,
    group_norm,
    supervision_loss,
    supervision_weight,
    total_loss,
)
from .config import RunConfig, config_keys, load_run_config, run_config_to_dict
from .data import (
    AugmentConfig,
    CaseRecord,
    PhantomSpec,
    augment,
    generate_phantom,
    normalize,
    random_crop,
    read_case,
    read_dataset_manifest,
    write_case,
    write_dataset_manifest,
)
from .errors import (
    ConfigError,
    ContractError,
    InputError,
    NumericError,
    ParseError,
    ShapeError,
    TrainingError,
    VoxsegError,
)
from .fusion import (
    CrfConfig,
    CrfState,
    EnergyReport,
    free_energy,
    fuse,
    init_state,
    mf_step,
    pairwise_energy,
    reference_step,
    unary_energy,
)
from .graph import (
    GraphBranch,
    InteractionGraph,
    graph_reason,
    project_adaptive,
    project_naive,
    reproject,
)
from .kernels import (
    ConvKernel,
    avg_pool3d,
    conv1x1,
    conv3d,
    resize_trilinear,
    trilinear_sample,
)
from .metrics import (
    LabelVolume,
    MetricReport,
    MetricRow,
    RegionMask,
    dice,
    evaluate_case,
    hausdorff95,
    region_mask,
    sensitivity,
    specificity,
    surface_mask,
)
from .model import ModelConfig, ModelOutput, SegmentationModel, probabilities_to_labels
from .render import render_labels, render_probability, write_pgm, write_ppm
from .tensor import Tape, Tensor, backward, load_array, parameter, save_array
from .train import (
    InferenceResult,
    OptimizerState,
    TrainConfig,
    TrainResult,
    infer,
    init_optimizer,
    learning_rate_at,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
