"""Encoder-decoder feature extractor with deep-supervision heads.

The encoder halves the grid between stages; the decoder climbs back up with
skip connections.  The deepest encoder map doubles as the input to the graph
branch, and intermediate decoder maps feed auxiliary classifiers whose losses
are blended into the total with a weight that decays over training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .kernels import ConvKernel, avg_pool3d, conv1x1, conv3d, resize_trilinear
from .metrics import LEGAL_LABELS, LabelVolume
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    log,
    maximum,
    parameter,
    relu,
    reshape,
    softmax,
    sqrt,
    tensor_mean,
    tensor_sum,
)

IN_CHANNELS = 4
LABEL_TO_CLASS = {0: 0, 1: 1, 2: 2, 4: 3}
CLASS_TO_LABEL = tuple(sorted(LABEL_TO_CLASS, key=LABEL_TO_CLASS.get))


@dataclass
class BackboneConfig:
    """Stage widths and head placement for the encoder-decoder."""

    channels: tuple = (8, 16, 32)
    class_count: int = 4
    deep_supervision_stages: tuple = (1,)
    norm_groups: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.deep_supervision_stages = tuple(int(s) for s in self.deep_supervision_stages)
        if self.stages < 2:
            raise ConfigError(f"need at least 2 stages, got {self.stages}")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"stage widths must be positive, got {self.channels}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be at least 2, got {self.class_count}")
        if self.norm_groups < 1:
            raise ConfigError(f"norm_groups must be positive, got {self.norm_groups}")
        for c in self.channels:
            if c % self.norm_groups:
                raise ConfigError(
                    f"stage width {c} is not divisible by {self.norm_groups} norm groups"
                )
        seen = set()
        for s in self.deep_supervision_stages:
            if not 1 <= s <= self.stages - 1:
                raise ConfigError(
                    f"deep supervision stage {s} outside the valid range "
                    f"1..{self.stages - 1}"
                )
            if s in seen:
                raise ConfigError(f"deep supervision stage {s} listed twice")
            seen.add(s)

    @property
    def stages(self) -> int:
        return len(self.channels)


def group_norm(x, gain, bias, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each channel group to zero mean and unit variance, then apply
    a per-channel affine map.  gain and bias broadcast as (1, C, 1, 1, 1)."""
    b, c, d, h, w = x.shape
    if c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    xr = reshape(x, (b, groups, (c // groups) * d, h, w))
    mu = tensor_mean(xr, axis=(2, 3, 4), keepdims=True)
    centered = xr - mu
    var = tensor_mean(centered * centered, axis=(2, 3, 4), keepdims=True)
    normed = centered / sqrt(var + eps)
    return reshape(normed, (b, c, d, h, w)) * gain + bias


@dataclass
class ConvBlock:
    """Two rounds of 3x3x3 convolution, group normalization, and rectification."""

    kernels: list
    norm_params: list
    groups: int

    @staticmethod
    def create(in_channels: int, out_channels: int, groups: int, rng,
               tape=None, prefix: str = "block") -> "ConvBlock":
        kernels = []
        norm_params = []
        widths = ((in_channels, out_channels), (out_channels, out_channels))
        for i, (ci, co) in enumerate(widths, start=1):
            std = np.sqrt(2.0 / (ci * 27))
            w = parameter(rng.normal(0.0, std, (co, ci, 3, 3, 3)), f"{prefix}.conv{i}.w")
            b = parameter(np.zeros(co), f"{prefix}.conv{i}.b")
            gain = parameter(np.ones((1, co, 1, 1, 1)), f"{prefix}.norm{i}.gain")
            bias = parameter(np.zeros((1, co, 1, 1, 1)), f"{prefix}.norm{i}.bias")
            if tape is not None:
                for t in (w, b, gain, bias):
                    tape.watch(t, t.name)
            kernels.append((w, b))
            norm_params.append((gain, bias))
        return ConvBlock(kernels, norm_params, groups)

    def forward(self, x) -> Tensor:
        out = x
        for (w, b), (gain, bias) in zip(self.kernels, self.norm_params):
            out = conv3d(out, ConvKernel.same(w, bias=b))
            out = relu(group_norm(out, gain, bias, self.groups))
        return out


@dataclass
class BackboneOutput:
    """Forward-pass products: the full-resolution feature map, the deepest
    encoder map (graph-branch input), per-stage decoder maps for supervision,
    and the encoder skips."""

    features: Tensor
    graph_input: Tensor
    deep_maps: dict
    skips: list


@dataclass
class Backbone:
    config: BackboneConfig
    encoder: list = field(default_factory=list)
    decoder: list = field(default_factory=list)

    @staticmethod
    def create(config: BackboneConfig, rng, tape=None, prefix: str = "backbone") -> "Backbone":
        enc = []
        ci = IN_CHANNELS
        for s, co in enumerate(config.channels):
            enc.append(ConvBlock.create(ci, co, config.norm_groups, rng,
                                        tape, f"{prefix}.enc{s}"))
            ci = co
        dec = []
        for s in range(config.stages - 2, -1, -1):
            ci = config.channels[s + 1] + config.channels[s]
            dec.append(ConvBlock.create(ci, config.channels[s], config.norm_groups,
                                        rng, tape, f"{prefix}.dec{s}"))
        return Backbone(config, enc, dec)

    def check_input(self, x) -> None:
        t = as_tensor(x)
        if t.ndim != 5:
            raise ShapeError(f"backbone input must have rank 5, got rank {t.ndim}")
        if t.shape[1] != IN_CHANNELS:
            raise ShapeError(
                f"backbone input must carry the {IN_CHANNELS} modality channels, "
                f"got {t.shape[1]}"
            )
        divisor = 2 ** (self.config.stages - 1)
        for name, e in zip(("depth", "height", "width"), t.shape[2:]):
            if e % divisor:
                raise ConfigError(
                    f"{name} extent {e} is not divisible by {divisor} "
                    f"({self.config.stages} stages)"
                )

    def encode_decode(self, x) -> BackboneOutput:
        """Run the full encoder-decoder; see BackboneOutput for the products."""
        self.check_input(x)
        t = as_tensor(x)
        skips = []
        cur = t
        for s, block in enumerate(self.encoder):
            cur = block.forward(cur)
            if s < self.config.stages - 1:
                skips.append(cur)
                cur = avg_pool3d(cur)
        graph_input = cur
        deep_maps = {}
        for step, block in enumerate(self.decoder):
            stage = self.config.stages - 2 - step
            skip = skips[stage]
            up = resize_trilinear(cur, skip.shape[2:])
            cur = block.forward(concat([up, skip], axis=1))
            if stage in self.config.deep_supervision_stages:
                deep_maps[stage] = cur
        if self.config.stages - 1 in self.config.deep_supervision_stages:
            deep_maps[self.config.stages - 1] = graph_input
        return BackboneOutput(features=cur, graph_input=graph_input,
                              deep_maps=deep_maps, skips=skips)


@dataclass
class SupervisionHead:
    """Auxiliary classifier: 1x1 projection to class scores, trilinear resize
    to the label grid, then a channelwise softmax."""

    weights: Tensor

    @staticmethod
    def create(in_channels: int, class_count: int, rng, tape=None,
               prefix: str = "head") -> "SupervisionHead":
        std = np.sqrt(2.0 / in_channels)
        w = parameter(rng.normal(0.0, std, (class_count, in_channels)), f"{prefix}.w")
        if tape is not None:
            tape.watch(w, w.name)
        return SupervisionHead(w)

    def forward(self, features, out_extents: tuple) -> Tensor:
        scores = conv1x1(features, self.weights, channel_axis=1)
        scores = resize_trilinear(scores, tuple(out_extents))
        return softmax(scores, axis=1)


def class_indices(labels: LabelVolume) -> np.ndarray:
    """Map raw labels (0, 1, 2, 4) to contiguous class indices (0..3)."""
    lut = np.zeros(max(LEGAL_LABELS) + 1, dtype=np.int64)
    for lab, cls in LABEL_TO_CLASS.items():
        lut[lab] = cls
    return lut[labels.voxels]


def supervision_loss(probabilities, labels: LabelVolume) -> Tensor:
    """Mean voxelwise negative log-probability of the true class.

    Expects probabilities already softmaxed, shaped (L, D, H, W) or with a
    leading singleton batch axis.
    """
    p = as_tensor(probabilities)
    if p.ndim == 5:
        if p.shape[0] != 1:
            raise ShapeError(f"supervision_loss handles one case, got batch {p.shape[0]}")
        p = reshape(p, p.shape[1:])
    if p.ndim != 4:
        raise ShapeError(f"probabilities must have rank 4 or 5, got rank {p.ndim}")
    if p.shape[1:] != labels.shape:
        raise ShapeError(
            f"probability extents {p.shape[1:]} do not match labels {labels.shape}"
        )
    n_classes = p.shape[0]
    idx = class_indices(labels)
    if idx.max() >= n_classes:
        raise ShapeError(
            f"labels need {idx.max() + 1} classes but the map has {n_classes}"
        )
    onehot = np.zeros(p.shape)
    for c in range(n_classes):
        onehot[c] = idx == c
    picked = tensor_sum(p * Tensor(onehot), axis=0)
    return -tensor_mean(log(maximum(picked, as_tensor(1e-12))))


def supervision_weight(epoch: int, total_epochs: int, initial: float = 0.5) -> float:
    """Auxiliary-loss weight, decaying linearly from `initial` to zero."""
    if total_epochs < 1:
        raise ConfigError(f"total_epochs must be positive, got {total_epochs}")
    if initial < 0:
        raise ConfigError(f"initial weight must be non-negative, got {initial}")
    return initial * max(0.0, 1.0 - epoch / total_epochs)


@dataclass
class LossReport:
    """The combined objective and its parts; tensor-valued so the total can
    be differentiated, with float views for logging."""

    total: Tensor
    main: Tensor
    auxiliary: list
    l2_term: Tensor
    l2_coefficient: float

    def scalars(self) -> dict:
        return {
            "total": self.total.item(),
            "main": self.main.item(),
            "auxiliary": [
                {"stage": s, "weight": d, "loss": t.item()} for s, d, t in self.auxiliary
            ],
            "l2_term": self.l2_term.item(),
        }


def total_loss(main, auxiliary, weights, params, l2_coefficient: float) -> LossReport:
    """main + weighted auxiliary losses + an L2 penalty over the parameters.

    `auxiliary` is a list of (stage, loss) pairs and `weights` the matching
    per-head coefficients; `params` is any iterable of trainable tensors.
    """
    aux = list(auxiliary)
    weights = [float(d) for d in weights]
    if len(aux) != len(weights):
        raise ConfigError(
            f"{len(aux)} auxiliary losses but {len(weights)} weights"
        )
    if any(d < 0 for d in weights):
        raise ConfigError(f"auxiliary weights must be non-negative, got {weights}")
    lam = float(l2_coefficient)
    if lam < 0:
        raise ConfigError(f"l2 coefficient must be non-negative, got {lam}")
    main_t = as_tensor(main)
    total = main_t
    recorded = []
    for (stage, loss), delta in zip(aux, weights):
        loss_t = as_tensor(loss)
        total = total + loss_t * delta
        recorded.append((stage, delta, loss_t))
    l2_sum = as_tensor(0.0)
    for p in params:
        pt = as_tensor(p)
        l2_sum = l2_sum + tensor_sum(pt * pt)
    l2_term = l2_sum * lam
    total = total + l2_term
    return LossReport(total=total, main=main_t, auxiliary=recorded,
                      l2_term=l2_term, l2_coefficient=lam)
