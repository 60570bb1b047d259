"""Differentiable primitives over 4-D tensors.

All kernels are vectorized numpy and keep float64 end to end, so reductions
run in double precision.  Convolutions go through an im2col buffer and a
single matmul; the deformable variant gathers its taps with bilinear
weights first and then reuses the exact same matmul reduction order, which
is what makes the zero-offset case agree with ``conv2d`` bit for bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import Tensor, _accumulate, _make

__all__ = [
    "constant", "add", "sub", "mul", "scale", "shift", "sum_all", "sqrt",
    "relu", "sigmoid", "concat", "conv2d", "deform_conv2d", "maxpool2d",
    "upsample_bilinear2x", "global_avg_pool", "global_max_pool",
    "channel_mean", "channel_max", "fully_connected", "l2_normalize",
    "bilinear_sample", "take_batch",
]


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable tensor, promoting to 4-D."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    elif arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    for ax in range(4):
        if shape[ax] == 1 and g.shape[ax] > 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    for ax, (da, db) in enumerate(zip(a.shape, b.shape)):
        if da != db and da != 1 and db != 1:
            raise ValueError(
                f"{opname}: axis {ax} extents {da} and {db} are not broadcastable"
            )


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        _accumulate(x, g * s)

    return _make(x.data * s, (x,), bwd)


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accumulate(x, g)

    return _make(x.data + c, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=np.float64).reshape(1, 1, 1, 1)

    def bwd(g):
        _accumulate(x, np.broadcast_to(g.reshape(()), x.shape))

    return _make(out_data, (x,), bwd)


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise square root of x + eps; x + eps must be positive."""
    shifted = x.data + eps
    if shifted.min() <= 0.0:
        raise ValueError("sqrt requires strictly positive inputs after the eps shift")
    out_data = np.sqrt(shifted)

    def bwd(g):
        _accumulate(x, g / (2.0 * out_data))

    return _make(out_data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return _make(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out_data = expit(x.data)

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bwd)


def concat(tensors) -> Tensor:
    """Concatenate along the channel axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for i, t in enumerate(tensors):
        n, _, h, w = t.shape
        if (n, h, w) != (ref[0], ref[2], ref[3]):
            raise ValueError(
                f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} "
                "outside the channel axis"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            _accumulate(t, piece)

    return _make(out_data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(size, k, stride, padding, dilation):
    eff = dilation * (k - 1) + 1
    out = (size + 2 * padding - eff) // stride + 1
    return out


def _im2col(x: np.ndarray, kh, kw, stride, padding, dilation):
    n, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, padding, dilation)
    ow = _conv_out_extent(w, kw, stride, padding, dilation)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"convolution output extent would be {oh}x{ow} for input {h}x{w}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )
    # copy into (n, c*kh*kw, oh*ow); the (c, kh, kw) flattening order has to
    # match weight.reshape(o, -1) and the deformable gather below
    return np.ascontiguousarray(win.reshape(n, c * kh * kw, oh * ow)), oh, ow


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, padding, dilation, oh, ow):
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, c, hp, wp))
    dc = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        rs = slice(i * dilation, i * dilation + stride * (oh - 1) + 1, stride)
        for j in range(kw):
            cs = slice(j * dilation, j * dilation + stride * (ow - 1) + 1, stride)
            dxp[:, :, rs, cs] += dc[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w].copy()
    return dxp


def _check_conv_args(x, w, b, stride, padding, dilation, opname):
    if w.data.ndim != 4:
        raise ValueError(f"{opname}: weights must be 4-D (out, in, kh, kw)")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"{opname}: input channel axis mismatch, input has {x.shape[1]} "
            f"channels but weights expect {w.shape[1]}"
        )
    if b is not None and b.shape != (1, w.shape[0], 1, 1):
        raise ValueError(
            f"{opname}: bias shape {b.shape} must be (1, {w.shape[0]}, 1, 1)"
        )
    if stride < 1 or padding < 0 or dilation < 1:
        raise ValueError(f"{opname}: invalid stride/padding/dilation")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with stride, zero padding and dilation."""
    _check_conv_args(x, w, b, stride, padding, dilation, "conv2d")
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding, dilation)
    w2 = w.data.reshape(o, c * kh * kw)
    out_data = (w2 @ cols).reshape(n, o, oh, ow)
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(n, o, oh * ow)
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1))
        if w.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            _accumulate(w, dw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            _accumulate(x, _col2im(dcols, x.shape, kh, kw, stride, padding,
                                   dilation, oh, ow))

    return _make(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# deformable convolution


def _bilinear_gather(x: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Sample x (n,c,h,w) at real coordinates, zero outside the raster.

    py/px have shape (n, k, p).  Returns the sampled block (n, c, k, p)
    plus everything the backward pass needs.
    """
    n, c, h, w = x.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    fy = py - y0
    fx = px - x0
    xflat = x.reshape(n, c, h * w)
    corners = []
    sampled = np.zeros((n, c) + py.shape[1:], dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        idx = np.where(valid, yc * w + xc, 0)
        vals = np.empty((n, c) + py.shape[1:], dtype=np.float64)
        for b in range(n):
            vals[b] = xflat[b][:, idx[b].ravel()].reshape((c,) + py.shape[1:])
        vals *= valid[:, None]
        sampled += wgt[:, None] * vals
        corners.append((idx, valid, wgt, vals))
    return sampled, (y0, x0, fy, fx, corners)


def _scatter_corners(dx: np.ndarray, n, c, h, w, corners, dsampled):
    hw = h * w
    chan_base = (np.arange(c) * hw)[:, None]
    for idx, valid, wgt, _vals in corners:
        contrib = dsampled * (wgt * valid)[:, None]
        for b in range(n):
            flat_idx = (chan_base + idx[b].ravel()[None, :]).ravel()
            dx[b] += np.bincount(
                flat_idx, weights=contrib[b].reshape(c, -1).ravel(), minlength=c * hw
            ).reshape(c, h, w)


def deform_conv2d(x: Tensor, w: Tensor, offsets: Tensor, b: Tensor | None = None,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution whose taps are displaced by learned per-site offsets.

    ``offsets`` carries 2*kh*kw channels: channel 2t is the row displacement
    and channel 2t+1 the column displacement of tap t (row-major over the
    kernel).  Samples are bilinear and read zero outside the image.
    """
    _check_conv_args(x, w, b, stride, padding, 1, "deform_conv2d")
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    kk = kh * kw
    oh = _conv_out_extent(h, kh, stride, padding, 1)
    ow = _conv_out_extent(wid, kw, stride, padding, 1)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"deform_conv2d output extent would be {oh}x{ow}")
    if offsets.shape != (n, 2 * kk, oh, ow):
        raise ValueError(
            f"deform_conv2d: offsets shape {offsets.shape} must be "
            f"({n}, {2 * kk}, {oh}, {ow})"
        )

    tap_y = np.repeat(np.arange(kh), kw).astype(np.float64)
    tap_x = np.tile(np.arange(kw), kh).astype(np.float64)
    base_y = (np.arange(oh) * stride - padding)[:, None] + np.zeros((1, ow))
    base_x = (np.arange(ow) * stride - padding)[None, :] + np.zeros((oh, 1))
    off = offsets.data.reshape(n, kk, 2, oh, ow)
    py = (base_y[None, None] + tap_y[None, :, None, None] + off[:, :, 0]).reshape(n, kk, oh * ow)
    px = (base_x[None, None] + tap_x[None, :, None, None] + off[:, :, 1]).reshape(n, kk, oh * ow)

    sampled, ctx = _bilinear_gather(x.data, py, px)
    # (n, c, kk, p) -> (n, c*kk, p): identical reduction layout to conv2d
    cols = sampled.reshape(n, c * kk, oh * ow)
    w2 = w.data.reshape(o, c * kk)
    out_data = (w2 @ cols).reshape(n, o, oh, ow)
    if b is not None:
        out_data = out_data + b.data
    parents = [x, w, offsets] + ([] if b is None else [b])

    def bwd(g):
        _y0, _x0, fy, fx, corners = ctx
        g2 = g.reshape(n, o, oh * ow)
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1))
        if w.requires_grad:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            _accumulate(w, dw.reshape(w.shape))
        need_off = offsets.requires_grad
        if x.requires_grad or need_off:
            dsampled = np.matmul(w2.T, g2).reshape(n, c, kk, oh * ow)
        if x.requires_grad:
            dx = np.zeros((n, c, h, wid))
            _scatter_corners(dx, n, c, h, wid, corners, dsampled)
            _accumulate(x, dx)
        if need_off:
            (_, _, w00, v00), (_, _, w01, v01), (_, _, w10, v10), (_, _, w11, v11) = corners
            dval_dy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            dval_dx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            doy = (dsampled * dval_dy).sum(axis=1)
            dox = (dsampled * dval_dx).sum(axis=1)
            doff = np.stack([doy, dox], axis=2)
            _accumulate(offsets, doff.reshape(offsets.shape))

    return _make(out_data, tuple(parents), bwd)


# ---------------------------------------------------------------------------
# pooling and resampling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial extents must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accumulate(x, dx.reshape(n, c, h, w))

    return _make(out_data, (x,), bwd)


_UP_CACHE: dict[int, np.ndarray] = {}


def _up_matrix(n_in: int) -> np.ndarray:
    """Dense (2n, n) interpolation operator, corners mapped to corners."""
    mat = _UP_CACHE.get(n_in)
    if mat is not None:
        return mat
    n_out = 2 * n_in
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.floor(pos).astype(int)
        i0 = np.minimum(i0, n_in - 2)
        frac = pos - i0
        rows = np.arange(n_out)
        mat[rows, i0] = 1.0 - frac
        mat[rows, i0 + 1] += frac
    _UP_CACHE[n_in] = mat
    return mat


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Double both spatial extents by bilinear interpolation.

    The output corner samples coincide with the input corners, matching the
    pixel-center convention of the bilinear samplers in this module.
    """
    n, c, h, w = x.shape
    wr = _up_matrix(h)
    wc = _up_matrix(w)
    tmp = x.data @ wc.T
    out_data = np.ascontiguousarray(
        (tmp.transpose(0, 1, 3, 2) @ wr.T).transpose(0, 1, 3, 2)
    )

    def bwd(g):
        t = (g.transpose(0, 1, 3, 2) @ wr).transpose(0, 1, 3, 2)
        _accumulate(x, np.ascontiguousarray(t @ wc))

    return _make(out_data, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return _make(out_data, (x,), bwd)


def global_max_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)

    def bwd(g):
        dflat = np.zeros((n, c, h * w))
        np.put_along_axis(dflat, idx[..., None], g.reshape(n, c, 1), axis=-1)
        _accumulate(x, dflat.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    out_data = x.data.mean(axis=1, keepdims=True)

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / c, x.shape))

    return _make(out_data, (x,), bwd)


def channel_max(x: Tensor) -> Tensor:
    idx = x.data.argmax(axis=1, keepdims=True)
    out_data = np.take_along_axis(x.data, idx, axis=1)

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=1)
        _accumulate(x, dx)

    return _make(out_data, (x,), bwd)


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense layer on (n, c, 1, 1) tensors; weights are (out, in, 1, 1)."""
    n, c, h, wid = x.shape
    if (h, wid) != (1, 1):
        raise ValueError(f"fully_connected needs 1x1 spatial extents, got {h}x{wid}")
    o, ci = w.shape[0], w.shape[1]
    if ci != c:
        raise ValueError(
            f"fully_connected: input channel axis mismatch, {c} vs weight {ci}"
        )
    if b is not None and b.shape != (1, o, 1, 1):
        raise ValueError(f"fully_connected: bias shape {b.shape} must be (1, {o}, 1, 1)")
    x2 = x.data.reshape(n, c)
    w2 = w.data.reshape(o, ci)
    out_data = (x2 @ w2.T).reshape(n, o, 1, 1)
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(n, o)
        if b is not None:
            _accumulate(b, g2.sum(axis=0).reshape(1, o, 1, 1))
        _accumulate(w, (g2.T @ x2).reshape(w.shape))
        _accumulate(x, (g2 @ w2).reshape(x.shape))

    return _make(out_data, parents, bwd)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each pixel's channel vector to (nearly) unit length."""
    nrm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    out_data = x.data / nrm

    def bwd(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        _accumulate(x, g / nrm - x.data * dot / (nrm ** 3))

    return _make(out_data, (x,), bwd)


def bilinear_sample(x: Tensor, points) -> Tensor:
    """Sample a single-batch map at (x, y) points; returns (m, c, 1, 1).

    Points may be fractional; samples outside the raster read zero, so a
    point must satisfy 0 <= x <= w-1 and 0 <= y <= h-1 to see full support.
    """
    if x.shape[0] != 1:
        raise ValueError("bilinear_sample expects a single-batch map")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = pts.shape[0]
    _, c, h, w = x.shape
    py = pts[:, 1].reshape(1, m, 1)
    px = pts[:, 0].reshape(1, m, 1)
    sampled, ctx = _bilinear_gather(x.data, py, px)
    out_data = np.ascontiguousarray(sampled.reshape(1, c, m).transpose(2, 1, 0)[..., None])

    def bwd(g):
        if not x.requires_grad:
            return
        _, _, _, _, corners = ctx
        dsampled = g.reshape(m, c).T.reshape(1, c, m, 1)
        dx = np.zeros((1, c, h, w))
        _scatter_corners(dx, 1, c, h, w, corners, dsampled)
        _accumulate(x, dx)

    return _make(out_data, (x,), bwd)


def take_batch(x: Tensor, i: int) -> Tensor:
    """Select one batch row as a (1, c, h, w) tensor."""
    n = x.shape[0]
    if not 0 <= i < n:
        raise ValueError(f"take_batch: index {i} out of range for batch {n}")
    out_data = x.data[i:i + 1]

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[i:i + 1] = g
        _accumulate(x, dx)

    return _make(out_data, (x,), bwd)
