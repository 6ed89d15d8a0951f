"""Neural-network kernels: convolution, normalization, pooling, bilinear
resampling, point sampling, top-K selection, and point scatter.

All kernels are pure functions over immutable tensors and are differentiable
where training needs them.  Index selections (top-K, pooling argmax, scatter
cells) are hard and carry no gradient; gradients flow through sampled values
only.

Point coordinates use the normalized grid convention: pixel (i, j) of an
H x W map sits at ((i + 0.5) / H, (j + 0.5) / W), so coordinates are
resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _accumulate, _maybe_record


@dataclass
class ConvParams:
    """Conv weights: weight [Cout, Cin, kh, kw], bias [Cout], zero padding."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class NormalizedPoint:
    """Resolution-independent point; u is vertical, v horizontal, in [0, 1]."""

    u: float
    v: float

    @classmethod
    def cell_center(cls, i, j, h, w):
        return cls((i + 0.5) / h, (j + 0.5) / w)


def points_as_array(pts):
    """Coerce a point list / [K, 2] array to a float64 [K, 2] array."""
    if isinstance(pts, np.ndarray):
        arr = np.asarray(pts, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError(f"expected [K, 2] points, got {arr.shape}")
        return arr
    return np.array([(p.u, p.v) for p in pts], dtype=np.float64).reshape(-1, 2)


def grid_center_points(h, w):
    """All cell centers of an h x w grid, row-major, as a [h*w, 2] array."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = (ii.ravel() + 0.5) / h
    v = (jj.ravel() + 0.5) / w
    return np.stack([u, v], axis=1)


def flat_to_points(flat_idx, h, w):
    """Map flat grid indices to normalized cell centers, preserving order."""
    flat_idx = np.asarray(flat_idx)
    u = (flat_idx // w + 0.5) / h
    v = (flat_idx % w + 0.5) / w
    return np.stack([u, v], axis=-1).astype(np.float64)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols, xshape, kh, kw, stride, padding, oh, ow):
    n, c, h, w = xshape
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, :, i, j]
    if padding:
        return gp[:, :, padding : padding + h, padding : padding + w]
    return gp


def conv2d(x, p):
    """Cross-correlation with zero padding; differentiable in x, weight, bias."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = p.weight.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"kernel sizes limited to 1 and 3, got {kh}x{kw}")
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, weight expects {cin_w}")
    stride, padding = int(p.stride), int(p.padding)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate output size {oh}x{ow}")

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = p.weight.data.reshape(cout, cin * kh * kw)
    with np.errstate(over="ignore"):  # overflow surfaces as the finiteness error
        out_data = np.matmul(w2, cols) + p.bias.data[:, None]
    out = Tensor(out_data.reshape(n, cout, oh, ow), _op="conv2d")

    def backward(g):
        gf = g.reshape(n, cout, oh * ow)
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
        _accumulate(p.weight, gw.reshape(p.weight.shape))
        _accumulate(p.bias, gf.sum(axis=(0, 2)))
        gcols = np.matmul(w2.T[None], gf)
        _accumulate(x, _col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow))

    return _maybe_record(out, (x, p.weight, p.bias), backward)


# ---------------------------------------------------------------------------
# normalization


def channel_norm(x, gamma, beta, eps=1e-5):
    """Per-channel standardization over (N, H, W) followed by affine."""
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise ValueError("channel_norm needs at least 2 elements per channel")
    axes = (0, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = Tensor(g4 * xhat + beta.data.reshape(1, c, 1, 1), _op="channel_norm")

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        dxhat = g * g4
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _maybe_record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pooling


def _adaptive_edges(size, bins):
    starts = [(i * size) // bins for i in range(bins)]
    ends = [-((-(i + 1) * size) // bins) for i in range(bins)]
    return starts, ends


def adaptive_max_pool(x, out_hw):
    """Adaptive max pooling returning values and flat argmax indices.

    Region (i, j) spans rows [floor(i*H/kh), ceil((i+1)*H/kh)) and the
    analogous columns; regions cover the map.  Ties break toward the
    smallest flat index.  The gradient routes to the argmax element.
    """
    n, c, h, w = x.shape
    kh, kw = int(out_hw[0]), int(out_hw[1])
    if kh > h or kw > w:
        raise ValueError(f"pool output {kh}x{kw} exceeds input {h}x{w}")
    rs, re = _adaptive_edges(h, kh)
    cs, ce = _adaptive_edges(w, kw)
    pooled = np.empty((n, c, kh, kw), dtype=x.dtype)
    indices = np.empty((n, c, kh, kw), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            region = x.data[:, :, rs[i] : re[i], cs[j] : ce[j]]
            rw = ce[j] - cs[j]
            flat = region.reshape(n, c, -1)
            am = flat.argmax(axis=2)  # first max == smallest flat index
            pooled[:, :, i, j] = np.take_along_axis(flat, am[:, :, None], axis=2)[:, :, 0]
            indices[:, :, i, j] = (rs[i] + am // rw) * w + (cs[j] + am % rw)
    out = Tensor(pooled, _op="adaptive_max_pool")

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, indices), g)
        _accumulate(x, gx.reshape(n, c, h, w))

    _maybe_record(out, (x,), backward)
    return out, indices


def adaptive_avg_pool(x, out_hw):
    """Adaptive average pooling under the same region rule as the max pool."""
    n, c, h, w = x.shape
    kh, kw = int(out_hw[0]), int(out_hw[1])
    if kh > h or kw > w:
        raise ValueError(f"pool output {kh}x{kw} exceeds input {h}x{w}")
    rs, re = _adaptive_edges(h, kh)
    cs, ce = _adaptive_edges(w, kw)
    pooled = np.empty((n, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            pooled[:, :, i, j] = x.data[:, :, rs[i] : re[i], cs[j] : ce[j]].mean(axis=(2, 3))
    out = Tensor(pooled, _op="adaptive_avg_pool")

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                area = (re[i] - rs[i]) * (ce[j] - cs[j])
                gx[:, :, rs[i] : re[i], cs[j] : ce[j]] += g[:, :, i : i + 1, j : j + 1] / area
        _accumulate(x, gx)

    return _maybe_record(out, (x,), backward)


def box_avg_pool(x, k):
    """Stride-1 zero-padded k x k mean with divisor k^2 everywhere."""
    if k % 2 == 0:
        raise ValueError("box filter size must be odd")
    if k not in (3, 5):
        raise ValueError("box filter size limited to 3 or 5")
    n, c, h, w = x.shape
    if k > min(h, w):
        raise ValueError(f"box filter {k} exceeds map {h}x{w}")

    def box(arr):
        p = k // 2
        ap = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=arr.dtype)
        ap[:, :, p : p + h, p : p + w] = arr
        acc = np.zeros((n, c, h, w), dtype=arr.dtype)
        for i in range(k):
            for j in range(k):
                acc += ap[:, :, i : i + h, j : j + w]
        return acc / (k * k)

    out = Tensor(box(x.data), _op="box_avg_pool")

    def backward(g):
        _accumulate(x, box(g))  # zero-padded box sum is self-adjoint

    return _maybe_record(out, (x,), backward)


# ---------------------------------------------------------------------------
# bilinear resampling


def _interp_matrix(out_size, in_size, dtype):
    """Rows of a [out, in] matrix holding grid-center bilinear weights."""
    r = np.zeros((out_size, in_size), dtype=dtype)
    pos = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    for i in range(out_size):
        r[i, lo[i]] += 1.0 - frac[i]
        r[i, hi[i]] += frac[i]
    return r


def bilinear_resize(x, out_hw):
    """Resize by sampling at grid centers with edge clamping."""
    n, c, h, w = x.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ValueError("output size must be positive")
    if (oh, ow) == (h, w):
        ry = np.eye(h, dtype=x.dtype)
        rx = np.eye(w, dtype=x.dtype)
    else:
        ry = _interp_matrix(oh, h, x.dtype)
        rx = _interp_matrix(ow, w, x.dtype)
    out = Tensor(np.matmul(ry, np.matmul(x.data, rx.T)), _op="bilinear_resize")

    def backward(g):
        _accumulate(x, np.matmul(ry.T, np.matmul(g, rx)))

    return _maybe_record(out, (x,), backward)


def _point_weights(pts, h, w):
    """4-neighbor indices and weights for [N, K, 2] normalized points."""
    u, v = pts[..., 0], pts[..., 1]
    y = np.clip(u * h - 0.5, 0.0, h - 1.0)
    x_ = np.clip(v * w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x_).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = y - y0
    wx = x_ - x0
    return (y0, x0, y1, x1), (wy, wx)


def point_sample_batched(x, pts):
    """Bilinear point sampling: [N, C, H, W] with [N, K, 2] -> [N, K, C]."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 2 or pts.shape[0] != x.shape[0]:
        raise ValueError(f"expected [N, K, 2] points, got {pts.shape}")
    if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
        raise ValueError("point coordinates must lie in [0, 1]")
    n, c, h, w = x.shape
    k = pts.shape[1]
    if k < 1:
        raise ValueError("need at least one point")
    (y0, x0, y1, x1), (wy, wx) = _point_weights(pts, h, w)
    nn = np.arange(n)[:, None]
    v00 = x.data[nn, :, y0, x0]  # [N, K, C]
    v01 = x.data[nn, :, y0, x1]
    v10 = x.data[nn, :, y1, x0]
    v11 = x.data[nn, :, y1, x1]
    w00 = ((1 - wy) * (1 - wx))[..., None].astype(x.dtype)
    w01 = ((1 - wy) * wx)[..., None].astype(x.dtype)
    w10 = (wy * (1 - wx))[..., None].astype(x.dtype)
    w11 = (wy * wx)[..., None].astype(x.dtype)
    out = Tensor(w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11, _op="point_sample")

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=x.dtype)
        base = np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]  # [N, C, 1]
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            flat = (yy * w + xx)[:, None, :]  # [N, 1, K]
            idx = base * (h * w) + flat  # [N, C, K]
            np.add.at(gx.reshape(-1), idx.ravel(), (ww * g).transpose(0, 2, 1).ravel())
        _accumulate(x, gx.reshape(n, c, h, w))

    return _maybe_record(out, (x,), backward)


def bilinear_point_sample(x, pts):
    """Sample a single-item map at normalized points -> matrix [K, C]."""
    if x.shape[0] != 1:
        raise ValueError("bilinear_point_sample expects a single batch item")
    arr = points_as_array(pts)
    sampled = point_sample_batched(x, arr[None])
    k, c = arr.shape[0], x.shape[1]
    return reshape(sampled, (k, c))


def reshape(x, shape):
    """View with a different shape (same element count, row-major)."""
    shape = tuple(int(d) for d in shape)
    out = Tensor(x.data.reshape(shape), _op="reshape")

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _maybe_record(out, (x,), backward)


# ---------------------------------------------------------------------------
# selection and scatter


def topk_select(score, k):
    """Flat indices of the K largest scores per batch item.

    Sorted by descending score, ties by ascending flat index; a pure
    function of the values with no gradient.
    """
    n, c, h, w = score.shape
    if c != 1:
        raise ValueError("topk_select expects a single-channel score map")
    k = int(k)
    if k > h * w:
        raise ValueError(f"k={k} exceeds {h * w} cells")
    if k < 1:
        raise ValueError("k must be >= 1")
    flat = score.data.reshape(n, h * w)
    order = np.argsort(-flat, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def _winner_mask(cells_flat):
    """Boolean mask of writes that survive later-write-wins per column [N, K]."""
    n, k = cells_flat.shape
    keep = np.zeros((n, k), dtype=bool)
    for i in range(n):
        _, last = np.unique(cells_flat[i, ::-1], return_index=True)
        keep[i, k - 1 - last] = True
    return keep


def scatter_points_batched(base, pts, values):
    """Write value rows into the cells under each point; later write wins."""
    pts = np.asarray(pts, dtype=np.float64)
    n, c, h, w = base.shape
    if pts.shape[0] != n or values.shape[0] != n:
        raise ValueError("batch sizes disagree")
    k = pts.shape[1]
    if values.shape[1] != k:
        raise ValueError(f"{k} points but {values.shape[1]} value rows")
    rows = np.clip(np.floor(pts[..., 0] * h), 0, h - 1).astype(np.int64)
    cols = np.clip(np.floor(pts[..., 1] * w), 0, w - 1).astype(np.int64)
    cells = rows * w + cols
    keep = _winner_mask(cells)
    out_data = base.data.copy()
    ni, ki = np.nonzero(keep)
    out_data[ni[:, None], np.arange(c)[None, :], rows[ni, ki][:, None], cols[ni, ki][:, None]] = values.data[ni, ki]
    out = Tensor(out_data, _op="scatter_points")

    def backward(g):
        gbase = g.copy()
        gbase[ni[:, None], np.arange(c)[None, :], rows[ni, ki][:, None], cols[ni, ki][:, None]] = 0.0
        _accumulate(base, gbase)
        gvals = np.zeros(values.shape, dtype=values.dtype)
        gvals[ni, ki] = g[ni[:, None], np.arange(c)[None, :], rows[ni, ki][:, None], cols[ni, ki][:, None]]
        _accumulate(values, gvals)

    return _maybe_record(out, (base, values), backward)


def scatter_points(base, pts, values):
    """Single-item scatter of [K, C] rows; untouched cells keep base values."""
    if base.shape[0] != 1:
        raise ValueError("scatter_points expects a single batch item")
    arr = points_as_array(pts)
    if arr.shape[0] != values.shape[0]:
        raise ValueError(f"{arr.shape[0]} points but {values.shape[0]} value rows")
    if arr.shape[0] == 0:
        return base
    vals3 = reshape(values, (1,) + tuple(values.shape))
    return scatter_points_batched(base, arr[None], vals3)
