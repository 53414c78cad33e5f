"""End-to-end segmentation model: encoder-decoder features, the graph branch,
feature fusion (iterative attention-gated refinement or plain concatenation),
and the voxelwise classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    CLASS_TO_LABEL,
    IN_CHANNELS,
    Backbone,
    BackboneConfig,
    SupervisionHead,
)
from .errors import ConfigError, ShapeError
from .fusion import CrfConfig, EnergyReport, fuse
from .graph import GraphBranch
from .kernels import ConvKernel, conv1x1
from .metrics import LabelVolume
from .tensor import Tape, Tensor, as_tensor, concat, parameter, reshape, softmax

FUSION_MODES = ("crf", "concat")


@dataclass
class ModelConfig:
    """Assembly parameters; the volume extents are fixed at creation because
    the graph anchors live in feature-volume coordinates."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    volume_extents: tuple = (24, 24, 24)
    graph_grid: tuple = (2, 2, 2)
    node_dim: int = 16
    fusion_mode: str = "crf"
    crf_iterations: int = 5
    crf_kernel_init: float = 0.01
    adaptive_projection: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.volume_extents = tuple(int(e) for e in self.volume_extents)
        self.graph_grid = tuple(int(g) for g in self.graph_grid)
        if len(self.volume_extents) != 3 or any(e < 1 for e in self.volume_extents):
            raise ConfigError(f"volume_extents must be three positive values, got {self.volume_extents}")
        divisor = 2 ** (self.backbone.stages - 1)
        for e in self.volume_extents:
            if e % divisor:
                raise ConfigError(
                    f"volume extent {e} is not divisible by {divisor} "
                    f"({self.backbone.stages} stages)"
                )
        if len(self.graph_grid) != 3 or any(g < 1 for g in self.graph_grid):
            raise ConfigError(f"graph_grid must be three positive values, got {self.graph_grid}")
        if self.node_dim < 1:
            raise ConfigError(f"node_dim must be positive, got {self.node_dim}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        if self.crf_iterations < 1:
            raise ConfigError(f"crf_iterations must be positive, got {self.crf_iterations}")
        if self.crf_kernel_init <= 0:
            raise ConfigError(f"crf_kernel_init must be positive, got {self.crf_kernel_init}")

    @property
    def bottom_extents(self) -> tuple:
        divisor = 2 ** (self.backbone.stages - 1)
        return tuple(e // divisor for e in self.volume_extents)

    @property
    def feature_channels(self) -> int:
        return self.backbone.channels[0]

    @property
    def fused_channels(self) -> int:
        return self.feature_channels * (2 if self.fusion_mode == "concat" else 1)


@dataclass
class ModelOutput:
    """One forward pass: class probabilities, the fused feature map, both
    context maps, auxiliary head outputs, and the fusion trajectory."""

    probabilities: Tensor
    fused: Tensor
    x_c: Tensor
    x_g: Tensor
    aux_probabilities: dict
    reports: list


class SegmentationModel:
    """Holds all trainable parts and wires one forward pass."""

    def __init__(self, config: ModelConfig, backbone: Backbone, graph_branch: GraphBranch,
                 crf_weights: Tensor | None, classifier: Tensor, heads: dict, tape: Tape):
        self.config = config
        self.backbone = backbone
        self.graph_branch = graph_branch
        self.crf_weights = crf_weights
        self.classifier = classifier
        self.heads = heads
        self.tape = tape

    @staticmethod
    def create(config: ModelConfig, rng, tape: Tape | None = None) -> "SegmentationModel":
        tape = Tape() if tape is None else tape
        backbone = Backbone.create(config.backbone, rng, tape, "backbone")
        channels = config.backbone.channels
        branch = GraphBranch.create(
            in_channels=channels[-1],
            node_dim=config.node_dim,
            out_channels=config.feature_channels,
            grid_shape=config.graph_grid,
            volume_extents=config.bottom_extents,
            rng=rng,
            tape=tape,
            prefix="graph",
        )
        crf_weights = None
        if config.fusion_mode == "crf":
            c = config.feature_channels
            crf_weights = parameter(
                rng.normal(0.0, config.crf_kernel_init, (c, c, 3, 3, 3)), "crf.kernel"
            )
            tape.watch(crf_weights, crf_weights.name)
        n_classes = config.backbone.class_count
        std = np.sqrt(2.0 / config.fused_channels)
        classifier = parameter(
            rng.normal(0.0, std, (n_classes, config.fused_channels)), "classifier.w"
        )
        tape.watch(classifier, classifier.name)
        heads = {}
        for stage in config.backbone.deep_supervision_stages:
            heads[stage] = SupervisionHead.create(
                channels[stage], n_classes, rng, tape, f"head{stage}"
            )
        return SegmentationModel(config, backbone, branch, crf_weights, classifier,
                                 heads, tape)

    def check_input(self, x) -> Tensor:
        t = as_tensor(x)
        if t.ndim != 5:
            raise ShapeError(f"model input must have rank 5, got rank {t.ndim}")
        if t.shape[0] != 1:
            raise ShapeError(f"the model runs one case at a time, got batch {t.shape[0]}")
        if t.shape[1] != IN_CHANNELS:
            raise ShapeError(
                f"model input must carry {IN_CHANNELS} modality channels, got {t.shape[1]}"
            )
        if t.shape[2:] != self.config.volume_extents:
            raise ShapeError(
                f"model was built for extents {self.config.volume_extents}, "
                f"got {t.shape[2:]}"
            )
        return t

    def forward(self, x) -> ModelOutput:
        t = self.check_input(x)
        bb = self.backbone.encode_decode(t)
        x_c = bb.features
        bottom = reshape(bb.graph_input, bb.graph_input.shape[1:])
        spatial = x_c.shape[2:]
        xg = self.graph_branch.forward(bottom, spatial,
                                       adaptive=self.config.adaptive_projection)
        x_g = reshape(xg, (1,) + xg.shape)
        reports: list[EnergyReport] = []
        if self.config.fusion_mode == "crf":
            crf = CrfConfig(kernel=ConvKernel.same(self.crf_weights),
                            iterations=self.config.crf_iterations)
            fused, reports = fuse(x_c, x_g, crf)
        else:
            fused = concat([x_c, x_g], axis=1)
        scores = conv1x1(fused, self.classifier, channel_axis=1)
        probabilities = softmax(scores, axis=1)
        aux = {
            stage: head.forward(bb.deep_maps[stage], spatial)
            for stage, head in self.heads.items()
        }
        return ModelOutput(probabilities=probabilities, fused=fused, x_c=x_c, x_g=x_g,
                           aux_probabilities=aux, reports=reports)


def probabilities_to_labels(probabilities, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Argmax over the class axis of a (L, D, H, W) or (1, L, D, H, W) map,
    mapped back to raw labels.  Ties resolve to the lowest class index."""
    p = probabilities.numpy() if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    if p.ndim == 5:
        if p.shape[0] != 1:
            raise ShapeError(f"expected one case, got batch {p.shape[0]}")
        p = p[0]
    if p.ndim != 4:
        raise ShapeError(f"probability map must have rank 4 or 5, got rank {p.ndim}")
    classes = np.argmax(p, axis=0)
    lut = np.array(CLASS_TO_LABEL, dtype=np.int64)
    return LabelVolume(lut[classes], spacing)
