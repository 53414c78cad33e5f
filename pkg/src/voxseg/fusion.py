"""Attention-gated mean-field fusion of convolution and graph feature maps.

The engine runs a fixed number of mean-field iterations, each realized as
sequential convolution operations on (B, C, D, H, W) maps:

  1. attention logit   <- H_c elementwise-times (kernel * H_g)
  2. attention         <- sigmoid of the negated logit
  3. H_g               <- kernel * H_g
  4. gated update      <- attention elementwise-times H_g
  5. H_c               <- X_c plus the gated update (residual)

One shared, bias-free, shape-preserving kernel is used in every iteration.
The final H_c is the fused map.  Energy bookkeeping (unary, gated pairwise,
free energy with the attention entropy) is reported per iteration as a
diagnostic; the trajectory is not asserted monotone.

A second routine, reference_step, transcribes the derivation-form updates in
which the gated message also feeds H_g and the attention sits inside the
convolution.  The two coincide when the kernel is zero; tests compare them
there and document the divergence elsewhere.  The loop form is what trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .kernels import ConvKernel, conv3d
from .tensor import Tensor, as_tensor, sigmoid


@dataclass
class CrfState:
    """The evolving triple (H_g, H_c, attention) plus the iteration counter.

    All three maps share extents; attention holds sigmoid outputs (0.5 at
    initialization), one gate per voxel per channel.
    """

    h_g: Tensor
    h_c: Tensor
    attention: Tensor
    iteration: int = 0

    def __post_init__(self):
        if not (self.h_g.shape == self.h_c.shape == self.attention.shape):
            raise ShapeError(
                f"state maps disagree: h_g {self.h_g.shape}, h_c {self.h_c.shape}, "
                f"attention {self.attention.shape}"
            )
        att = self.attention.data
        if att.size and (att.min() < 0.0 or att.max() > 1.0):
            raise ShapeError("attention values must lie in [0, 1]")


@dataclass
class CrfConfig:
    """Iteration count and the shared kernel of the mean-field loop."""

    kernel: ConvKernel
    iterations: int = 5

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        k = self.kernel.k
        if self.kernel.stride != 1 or self.kernel.padding != (k - 1) // 2 or k % 2 == 0:
            raise ConfigError(
                f"the mean-field kernel must be shape-preserving (odd k, stride 1, "
                f"padding (k-1)/2), got k={k}, stride={self.kernel.stride}, "
                f"padding={self.kernel.padding}"
            )
        if self.kernel.bias is not None:
            raise ConfigError("the mean-field kernel is bias-free")
        if self.kernel.out_channels != self.kernel.in_channels:
            raise ConfigError(
                f"the mean-field kernel must preserve channels, got "
                f"{self.kernel.in_channels} -> {self.kernel.out_channels}"
            )


@dataclass
class EnergyReport:
    """Energy bookkeeping for one iteration; total = unary_g + unary_c + pairwise."""

    unary_g: float
    unary_c: float
    pairwise: float
    total: float
    free_energy: float
    h_c_delta: float
    iteration: int

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "unary_g": self.unary_g,
            "unary_c": self.unary_c,
            "pairwise": self.pairwise,
            "total": self.total,
            "free_energy": self.free_energy,
            "h_c_delta": self.h_c_delta,
        }


def init_state(x_c, x_g) -> CrfState:
    """Fresh state: latents start at the observations, attention at 0.5."""
    tc, tg = as_tensor(x_c), as_tensor(x_g)
    if tc.shape != tg.shape:
        raise ShapeError(f"init_state: x_c {tc.shape} and x_g {tg.shape} extents differ")
    if tc.ndim != 5:
        raise ShapeError(f"init_state: maps must have rank 5 (B, C, D, H, W), got {tc.ndim}")
    # multiply by one: equal by value, distinct objects, gradients still flow
    return CrfState(h_g=tg * 1.0, h_c=tc * 1.0, attention=Tensor(np.full(tc.shape, 0.5)), iteration=0)


def mf_step(state: CrfState, x_c, x_g, config: CrfConfig) -> CrfState:
    """One mean-field iteration, steps 1-5 in order; the convolution of H_g
    feeding steps 1 and 3 is the same quantity and computed once."""
    if state.iteration >= config.iterations:
        raise ContractError(
            f"mf_step: iteration {state.iteration} already at the configured "
            f"maximum {config.iterations}"
        )
    tc = as_tensor(x_c)
    if tc.shape != state.h_c.shape:
        raise ShapeError(f"mf_step: x_c {tc.shape} does not match state {state.h_c.shape}")
    conv_hg = conv3d(state.h_g, config.kernel)
    attention = sigmoid(-(state.h_c * conv_hg))
    h_g = conv_hg
    h_c_bar = attention * h_g
    h_c = tc + h_c_bar
    return CrfState(h_g=h_g, h_c=h_c, attention=attention, iteration=state.iteration + 1)


def reference_step(state: CrfState, x_c, x_g, config: CrfConfig) -> CrfState:
    """Derivation-form update used only for comparison in tests.

    The attention sits inside the message convolutions (neighbor-indexed) and
    the graph latent also receives a gated message:
      attention <- sigmoid(-(H_c elementwise-times (kernel * (attention
                   elementwise-times H_g))))
      H_g       <- X_g plus attention elementwise-times (kernel * H_c)
      H_c       <- X_c plus kernel * (attention elementwise-times H_g)
    With a zero kernel the fused H_c and the attention coincide with
    mf_step's; the H_g paths differ by construction (bare convolution in the
    loop form, gated residual here).
    """
    if state.iteration >= config.iterations:
        raise ContractError(
            f"reference_step: iteration {state.iteration} already at the configured "
            f"maximum {config.iterations}"
        )
    tc, tg = as_tensor(x_c), as_tensor(x_g)
    attention = sigmoid(-(state.h_c * conv3d(state.attention * state.h_g, config.kernel)))
    h_g = tg + attention * conv3d(state.h_c, config.kernel)
    h_c = tc + conv3d(attention * h_g, config.kernel)
    return CrfState(h_g=h_g, h_c=h_c, attention=attention, iteration=state.iteration + 1)


def unary_energy(h, x) -> float:
    """Gaussian unary potential: minus half the squared distance, summed."""
    hh, xx = as_tensor(h).data, as_tensor(x).data
    if hh.shape != xx.shape:
        raise ShapeError(f"unary_energy: shapes {hh.shape} and {xx.shape} differ")
    diff = hh - xx
    return float(-0.5 * (diff * diff).sum())


def _detached_kernel(kernel: ConvKernel) -> ConvKernel:
    return ConvKernel(
        weights=kernel.weights.detach(),
        bias=None if kernel.bias is None else kernel.bias.detach(),
        stride=kernel.stride,
        padding=kernel.padding,
    )


def pairwise_energy(state: CrfState, kernel: ConvKernel) -> float:
    """Gated pairwise potential: attention times H_c times the kernel message
    from H_g, summed over every voxel and channel (center-indexed gating)."""
    msg = conv3d(state.h_g.detach(), _detached_kernel(kernel)).data
    return float((state.attention.data * state.h_c.data * msg).sum())


def _attention_entropy_term(att: np.ndarray, eps: float = 1e-12) -> float:
    # sum of q ln q + (1 - q) ln (1 - q); clamped so saturated gates stay finite
    q = np.clip(att, eps, 1.0 - eps)
    return float((q * np.log(q) + (1.0 - q) * np.log(1.0 - q)).sum())


def free_energy(state: CrfState, x_c, x_g, kernel: ConvKernel) -> float:
    """Energy at the current point estimates plus the attention entropy term.

    The Gaussian latents carry fixed unit variance, so their entropy is a
    constant and omitted; only the Bernoulli attention entropy varies.
    """
    energy = (
        unary_energy(state.h_g, x_g)
        + unary_energy(state.h_c, x_c)
        + pairwise_energy(state, kernel)
    )
    return energy + _attention_entropy_term(state.attention.data)


def fuse(x_c, x_g, config: CrfConfig) -> tuple[Tensor, list[EnergyReport]]:
    """Run the configured number of iterations; the final H_c is the fused map.

    Returns the per-iteration energy reports alongside; h_c_delta records the
    Frobenius norm of the H_c change at each iteration (the convergence probe).
    """
    state = init_state(x_c, x_g)
    tc, tg = as_tensor(x_c), as_tensor(x_g)
    reports = []
    for _ in range(config.iterations):
        prev = state.h_c.data
        state = mf_step(state, tc, tg, config)
        ug = unary_energy(state.h_g, tg)
        uc = unary_energy(state.h_c, tc)
        pw = pairwise_energy(state, config.kernel)
        delta = float(np.sqrt(((state.h_c.data - prev) ** 2).sum()))
        reports.append(
            EnergyReport(
                unary_g=ug,
                unary_c=uc,
                pairwise=pw,
                total=ug + uc + pw,
                free_energy=ug + uc + pw + _attention_entropy_term(state.attention.data),
                h_c_delta=delta,
                iteration=state.iteration,
            )
        )
    return state.h_c, reports
