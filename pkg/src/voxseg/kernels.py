"""Spatial numeric kernels: 3D convolution, channel mixing, trilinear sampling.

All kernels are differentiable through the tensor tape, vectorized with numpy
(windows via sliding_window_view, contractions via tensordot/einsum), and pure.
Volumes follow the (batch, channel, depth, height, width) layout; single-case
feature volumes drop the batch axis where an operation says so.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor, as_tensor

_AXIS_NAMES = ("batch", "channel", "depth", "height", "width")


@dataclass
class ConvKernel:
    """Weights and geometry of one 3D convolution.

    weights has shape (out_channels, in_channels, k, k, k) with odd cubic k
    whenever the kernel is used shape-preserving; padding must then equal
    (k - 1) / 2.  bias, when present, has one value per output channel.
    """

    weights: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = as_tensor(self.weights)
        if w.ndim != 5:
            raise ShapeError(f"kernel weights must have rank 5, got {w.ndim}")
        ko, ki, kd, kh, kw = w.shape
        if not (kd == kh == kw):
            raise ShapeError(f"kernel must be cubic, got extents ({kd}, {kh}, {kw})")
        self.weights = w
        if self.bias is not None:
            b = as_tensor(self.bias)
            if b.shape != (ko,):
                raise ShapeError(f"bias shape {b.shape} does not match {ko} output channels")
            self.bias = b
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")

    @classmethod
    def same(cls, weights, bias=None, stride: int = 1) -> "ConvKernel":
        """A shape-preserving kernel; requires odd k and sets padding (k-1)/2."""
        w = as_tensor(weights)
        if w.ndim != 5:
            raise ShapeError(f"kernel weights must have rank 5, got {w.ndim}")
        k = w.shape[2]
        if k % 2 == 0:
            raise ConfigError(f"shape-preserving convolution needs odd k, got {k}")
        return cls(weights=w, bias=bias, stride=stride, padding=(k - 1) // 2)

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def conv3d(x, kernel: ConvKernel) -> Tensor:
    """Cross-correlate a (B, Cin, D, H, W) volume with a ConvKernel.

    Zero padding; output extent per spatial axis is
    (extent + 2*padding - k) // stride + 1.  Differentiable with respect to
    the input, the weights, and the bias.
    """
    tx = as_tensor(x)
    if tx.ndim != 5:
        raise ShapeError(f"conv3d: input must have rank 5 (B, C, D, H, W), got {tx.ndim}")
    w = kernel.weights
    ko, ki, k, _, _ = w.shape
    if tx.shape[1] != ki:
        raise ShapeError(
            f"conv3d: channel axis 1 has {tx.shape[1]} channels, kernel expects {ki}"
        )
    p, s = kernel.padding, kernel.stride
    for ax in (2, 3, 4):
        if tx.shape[ax] + 2 * p < k:
            raise ShapeError(
                f"conv3d: {_AXIS_NAMES[ax]} axis {ax} extent {tx.shape[ax]} is smaller "
                f"than the kernel ({k}) even after padding {p}"
            )

    xd, wd = tx.data, w.data
    if p:
        pad = ((0, 0), (0, 0), (p, p), (p, p), (p, p))
        xp = np.pad(xd, pad)
    else:
        xp = xd
    # windows: (B, Cin, D', H', W', k, k, k) as a strided view, no copy
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    if s > 1:
        win = win[:, :, ::s, ::s, ::s]
    out = np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if kernel.bias is not None:
        out = out + kernel.bias.data[None, :, None, None, None]

    parents = []
    if tx.requires_grad:
        in_shape = xd.shape

        def vjp_x(g):
            gp = np.zeros(xp.shape)
            do, ho, wo = g.shape[2:]
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        # contribution of kernel tap (a, b, c): (B, D', H', W', Cin)
                        contrib = np.tensordot(g, wd[:, :, a, b, c], axes=([1], [0]))
                        gp[
                            :,
                            :,
                            a : a + s * do : s,
                            b : b + s * ho : s,
                            c : c + s * wo : s,
                        ] += np.moveaxis(contrib, -1, 1)
            if p:
                gp = gp[:, :, p:-p, p:-p, p:-p]
            return gp.reshape(in_shape)

        parents.append((tx, vjp_x))
    if w.requires_grad:
        parents.append(
            (w, lambda g: np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4])))
        )
    if kernel.bias is not None and kernel.bias.requires_grad:
        parents.append((kernel.bias, lambda g: g.sum(axis=(0, 2, 3, 4))))
    return Tensor._wrap(out, parents, "conv3d")


def conv1x1(x, weights, channel_axis: int = 1) -> Tensor:
    """Per-position channel mixing: a (Cout, Cin) matrix applied at each voxel.

    Spatial extents are unchanged; the channel axis defaults to 1 as in the
    (B, C, D, H, W) layout but may be 0 for single-case (C, D, H, W) volumes.
    """
    tx, tw = as_tensor(x), as_tensor(weights)
    if tw.ndim != 2:
        raise ShapeError(f"conv1x1: weights must have rank 2 (Cout, Cin), got {tw.ndim}")
    if channel_axis >= tx.ndim:
        raise ShapeError(f"conv1x1: channel axis {channel_axis} outside rank {tx.ndim}")
    co, ci = tw.shape
    if tx.shape[channel_axis] != ci:
        raise ShapeError(
            f"conv1x1: channel axis {channel_axis} has {tx.shape[channel_axis]} channels, "
            f"weights expect {ci}"
        )
    xd, wd = tx.data, tw.data
    out = np.moveaxis(np.tensordot(wd, xd, axes=([1], [channel_axis])), 0, channel_axis)
    out = np.ascontiguousarray(out)
    parents = []
    if tx.requires_grad:
        parents.append(
            (
                tx,
                lambda g: np.ascontiguousarray(
                    np.moveaxis(np.tensordot(wd.T, g, axes=([1], [channel_axis])), 0, channel_axis)
                ),
            )
        )
    if tw.requires_grad:
        other = tuple(i for i in range(tx.ndim) if i != channel_axis)
        parents.append((tw, lambda g: np.tensordot(g, xd, axes=(other, other))))
    return Tensor._wrap(out, parents, "conv1x1")


def _sample_prep(extents: tuple, pts: np.ndarray):
    # Clamp to the valid cube, split into base corner index and fraction.
    lo = np.zeros(3)
    hi = np.array(extents, dtype=np.float64) - 1.0
    clamped = np.clip(pts, lo, hi)
    base = np.floor(clamped).astype(np.int64)
    base = np.minimum(base, np.maximum(np.array(extents) - 2, 0))
    frac = clamped - base
    upper = np.minimum(base + 1, np.array(extents) - 1)
    inside = (pts >= lo) & (pts <= hi)
    return base, upper, frac, inside


def trilinear_sample(volume, points) -> Tensor:
    """Sample a (C, D, H, W) volume at fractional (z, y, x) coordinates.

    Returns a (P, C) tensor: each row is the convex combination of the 8 grid
    nodes enclosing the point, with weights that are non-negative and sum to 1.
    Coordinates outside the volume are clamped to the valid cube; the clamped
    axes then carry zero coordinate gradient.  Differentiable with respect to
    both the volume values and the point coordinates.
    """
    tv = as_tensor(volume)
    if tv.ndim != 4:
        raise ShapeError(f"trilinear_sample: volume must have rank 4 (C, D, H, W), got {tv.ndim}")
    if isinstance(points, Tensor):
        tp = points
    else:
        raw = np.asarray(points, dtype=np.float64)
        if raw.size and not np.isfinite(raw).all():
            flat_bad = np.flatnonzero(~np.isfinite(raw.reshape(raw.shape[0], -1)).all(axis=1))
            raise InputError(f"trilinear_sample: non-finite coordinate at point {int(flat_bad[0])}")
        tp = Tensor(raw)
    pts = tp.data
    if pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"trilinear_sample: points must have shape (P, 3), got {tp.shape}")

    vol = tv.data
    c = vol.shape[0]
    extents = vol.shape[1:]
    n = pts.shape[0]
    if n == 0:
        return Tensor._wrap(np.zeros((0, c)), (), "trilinear_sample", check=False)

    base, upper, frac, inside = _sample_prep(extents, pts)
    iz0, iy0, ix0 = base[:, 0], base[:, 1], base[:, 2]
    iz1, iy1, ix1 = upper[:, 0], upper[:, 1], upper[:, 2]
    tz, ty, tx_ = frac[:, 0], frac[:, 1], frac[:, 2]

    # 8 corner reads, each (P, C); bit order is (z, y, x)
    corners = {}
    zi = {0: iz0, 1: iz1}
    yi = {0: iy0, 1: iy1}
    xi = {0: ix0, 1: ix1}
    for a in (0, 1):
        for b in (0, 1):
            for d in (0, 1):
                corners[(a, b, d)] = vol[:, zi[a], yi[b], xi[d]].T
    wz = {0: 1.0 - tz, 1: tz}
    wy = {0: 1.0 - ty, 1: ty}
    wx = {0: 1.0 - tx_, 1: tx_}
    out = np.zeros((n, c))
    for (a, b, d), corner in corners.items():
        out += (wz[a] * wy[b] * wx[d])[:, None] * corner

    parents = []
    if tv.requires_grad:
        vshape = vol.shape

        def vjp_volume(g):
            gv = np.zeros(vshape)
            flat = gv.reshape(c, -1)
            dh, hh, wh = extents
            for (a, b, d), _ in corners.items():
                w = (wz[a] * wy[b] * wx[d])[:, None] * g
                idx = (zi[a] * hh + yi[b]) * wh + xi[d]
                for ch in range(c):
                    flat[ch] += np.bincount(idx, weights=w[:, ch], minlength=dh * hh * wh)
            return gv

        parents.append((tv, vjp_volume))
    if tp.requires_grad:

        def vjp_points(g):
            # d out / d frac along each axis: difference of the two opposing
            # bilinear faces; clamped points contribute nothing.
            dz = np.zeros((n, c))
            dy = np.zeros((n, c))
            dx = np.zeros((n, c))
            for b in (0, 1):
                for d in (0, 1):
                    dz += (wy[b] * wx[d])[:, None] * (corners[(1, b, d)] - corners[(0, b, d)])
            for a in (0, 1):
                for d in (0, 1):
                    dy += (wz[a] * wx[d])[:, None] * (corners[(a, 1, d)] - corners[(a, 0, d)])
            for a in (0, 1):
                for b in (0, 1):
                    dx += (wz[a] * wy[b])[:, None] * (corners[(a, b, 1)] - corners[(a, b, 0)])
            gp = np.stack(
                [(g * dz).sum(axis=1), (g * dy).sum(axis=1), (g * dx).sum(axis=1)], axis=1
            )
            return gp * inside

        parents.append((tp, vjp_points))
    return Tensor._wrap(out, parents, "trilinear_sample")


def avg_pool3d(x) -> Tensor:
    """Factor-2 average pooling over the three spatial axes of (B, C, D, H, W)."""
    tx = as_tensor(x)
    if tx.ndim != 5:
        raise ShapeError(f"avg_pool3d: input must have rank 5, got {tx.ndim}")
    b, c, d, h, w = tx.shape
    for ax, n in zip((2, 3, 4), (d, h, w)):
        if n % 2:
            raise ShapeError(f"avg_pool3d: {_AXIS_NAMES[ax]} extent {n} is not divisible by 2")
    blocks = tx.data.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
    out = blocks.mean(axis=(3, 5, 7))
    parents = []
    if tx.requires_grad:

        def vjp(g):
            spread = np.broadcast_to(
                g[:, :, :, None, :, None, :, None] / 8.0, (b, c, d // 2, 2, h // 2, 2, w // 2, 2)
            )
            return spread.reshape(b, c, d, h, w)

        parents.append((tx, vjp))
    return Tensor._wrap(out, parents, "avg_pool3d", check=False)


def _axis_interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row j of the (n_out, n_in) matrix holds the two linear-interpolation
    # weights for center-aligned source coordinate j, clamped to the grid.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.clip(np.floor(src).astype(np.int64), 0, max(n_in - 2, 0))
    t = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _apply_axis_matrix(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(m, arr, axes=([1], [axis]))
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def _interp_axis(x: Tensor, axis: int, n_out: int) -> Tensor:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    m = _axis_interp_matrix(n_in, n_out)
    out = _apply_axis_matrix(x.data, m, axis)
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: _apply_axis_matrix(g, m.T, axis)))
    return Tensor._wrap(out, parents, "interp_axis", check=False)


def resize_trilinear(x, out_extents: tuple) -> Tensor:
    """Resize the spatial axes of (B, C, D, H, W) by separable linear interpolation.

    Uses the same center-aligned trilinear weighting as trilinear_sample (the
    separable form is algebraically identical); clamping at the borders.
    """
    tx = as_tensor(x)
    if tx.ndim != 5:
        raise ShapeError(f"resize_trilinear: input must have rank 5, got {tx.ndim}")
    if len(out_extents) != 3 or any(n < 1 for n in out_extents):
        raise ShapeError(f"resize_trilinear: bad target extents {out_extents}")
    out = tx
    for axis, n_out in zip((2, 3, 4), out_extents):
        out = _interp_axis(out, axis, int(n_out))
    return out
