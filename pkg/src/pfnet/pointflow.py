"""Point-flow module: sparse point-affinity propagation between two
adjacent pyramid levels.

A module instance works on a coarse level (stride 2s, high semantics) and
a fine level (stride s, high resolution).  It has two stages:

* a dual point matcher computes a single-channel saliency map from the
  concatenated levels, then selects salient points (adaptive max pooling
  over the saliency map) and boundary points (top-K over a boundary map
  predicted from an edge-sharpened feature);
* dual region propagation samples point features from both levels at the
  selected points, forms a point-wise affinity (row-softmax of the query/key
  product) per flow, mixes the coarse values through it with a residual
  query add, and scatters the refined rows back into the fine level.

Salient rows are written first and boundary rows second, so a boundary
point wins a cell collision.  Cells no point maps to keep the fine level's
values bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tt
from .ops import (
    ConvParams,
    NormalizedPoint,
    adaptive_max_pool,
    bilinear_point_sample,
    bilinear_resize,
    box_avg_pool,
    conv2d,
    flat_to_points,
    grid_center_points,
    point_sample_batched,
    points_as_array,
    reshape,
    scatter_points_batched,
    topk_select,
    _adaptive_edges,
)
from .tensor import Tensor

DIRECTIONS = ("top_down", "bottom_up", "td_then_bu")
EDGE_MODES = ("subtraction", "direct", "addition")
SALIENT_SAMPLING = ("max_pool", "uniform_random", "attention_topk")

DENSE_POINT_LIMIT = 4096


@dataclass
class PfmConfig:
    channels: int = 64
    salient_kernel: tuple = (14, 14)
    boundary_k: int = 128  # 0 disables the boundary flow
    direction: str = "top_down"
    edge_mode: str = "subtraction"
    salient_sampling: str = "max_pool"
    affinity_scale: float = 1.0
    sampling_seed: int = 0

    def validate(self):
        kh, kw = self.salient_kernel
        if kh * kw < 1:
            raise ValueError("salient kernel must cover at least one point")
        if self.boundary_k < 0:
            raise ValueError("boundary_k must be >= 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.edge_mode not in EDGE_MODES:
            raise ValueError(f"edge_mode must be one of {EDGE_MODES}")
        if self.salient_sampling not in SALIENT_SAMPLING:
            raise ValueError(f"salient_sampling must be one of {SALIENT_SAMPLING}")


@dataclass
class PfmParams:
    """Learned parameters: 3x3 saliency conv (2C -> 1), 1x1 boundary conv (C -> 1)."""

    saliency_conv: ConvParams
    boundary_conv: ConvParams


@dataclass
class PfmOutput:
    refined: Optional[Tensor]          # refined fine level, top-down flows
    boundary: Optional[Tensor]         # boundary map on the coarse grid, in (0, 1)
    saliency: Tensor                   # saliency map on the coarse grid
    salient_points: np.ndarray         # [N, P, 2] normalized coordinates
    salient_scores: np.ndarray         # [N, P]
    boundary_points: np.ndarray        # [N, K, 2]; K may be 0
    boundary_scores: np.ndarray        # [N, K]
    refined_coarse: Optional[Tensor] = None  # bottom-up flows only

    def point_list(self, flow, item):
        pts = self.salient_points if flow == "salient" else self.boundary_points
        return [NormalizedPoint(float(u), float(v)) for u, v in pts[item]]


def compute_saliency(coarse, fine, params):
    """Saliency map: sigmoid of a 3x3 conv over concat(coarse, resized fine)."""
    n, c, h, w = coarse.shape
    nf, cf, hf, wf = fine.shape
    if nf != n or cf != c:
        raise ValueError("coarse and fine levels must share batch and channels")
    if (hf, wf) != (2 * h, 2 * w):
        raise ValueError(f"fine level must be 2x the coarse resolution, got {hf}x{wf} vs {h}x{w}")
    if params.weight.shape != (1, 2 * c, 3, 3):
        raise ValueError(f"saliency conv weight must be [1, {2 * c}, 3, 3]")
    resized = bilinear_resize(fine, (h, w))
    stacked = tt.concat_channels([coarse, resized])
    return tt.sigmoid(conv2d(stacked, params))


def _uniform_region_points(saliency_data, kernel, seed):
    """One seeded uniform pick per adaptive region of the saliency grid."""
    n = saliency_data.shape[0]
    h, w = saliency_data.shape[2:]
    kh, kw = kernel
    rs, re = _adaptive_edges(h, kh)
    cs, ce = _adaptive_edges(w, kw)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    flat = np.empty((n, kh * kw), dtype=np.int64)
    for item in range(n):
        pos = 0
        for i in range(kh):
            for j in range(kw):
                r = rs[i] + rng.integers(re[i] - rs[i])
                c = cs[j] + rng.integers(ce[j] - cs[j])
                flat[item, pos] = r * w + c
                pos += 1
    return flat


def salient_match(coarse, saliency, cfg):
    """Salient attention and index selection.

    Returns the attention-enhanced coarse feature (pooled saliency is
    upsampled back to the grid before the residual multiply) plus the
    selected salient points and their scores.  The sampling variants only
    change the index selection; the enhanced feature always comes from the
    max-pooled attention path.
    """
    n, _, h, w = coarse.shape
    if saliency.shape != (n, 1, h, w):
        raise ValueError(f"saliency must be [N, 1, {h}, {w}], got {saliency.shape}")
    kh, kw = cfg.salient_kernel
    if kh > h or kw > w:
        raise ValueError(f"salient kernel {kh}x{kw} exceeds saliency grid {h}x{w}")

    pooled, pool_idx = adaptive_max_pool(saliency, (kh, kw))
    attention = bilinear_resize(pooled, (h, w))
    enhanced = tt.add(tt.mul(coarse, attention), coarse)

    if cfg.salient_sampling == "max_pool":
        flat = pool_idx[:, 0].reshape(n, kh * kw)
        scores = pooled.data[:, 0].reshape(n, kh * kw).copy()
    elif cfg.salient_sampling == "uniform_random":
        flat = _uniform_region_points(saliency.data, (kh, kw), cfg.sampling_seed)
        scores = saliency.data[:, 0].reshape(n, h * w)[np.arange(n)[:, None], flat].copy()
    else:  # attention_topk
        flat = topk_select(saliency, kh * kw)
        scores = saliency.data[:, 0].reshape(n, h * w)[np.arange(n)[:, None], flat].copy()
    points = flat_to_points(flat, h, w)
    return enhanced, points, scores


def boundary_branch(coarse, saliency, params, cfg):
    """Boundary map prediction and top-K boundary point selection.

    ``subtraction`` sharpens the feature by removing its locally smoothed
    saliency-weighted content before the 1x1 prediction conv; ``direct``
    predicts from the raw feature; ``addition`` adds the smoothed content
    instead.  On grids too small for the 3x3 box filter the saliency map
    itself stands in for its smoothed version.
    """
    n, c, h, w = coarse.shape
    if params.weight.shape != (1, c, 1, 1):
        raise ValueError(f"boundary conv weight must be [1, {c}, 1, 1]")
    k = int(cfg.boundary_k)
    if k > h * w:
        raise ValueError(f"boundary_k={k} exceeds {h * w} grid cells")

    if cfg.edge_mode == "direct":
        sharpened = coarse
    else:
        smoothed = box_avg_pool(saliency, 3) if min(h, w) >= 3 else saliency
        weighted = tt.mul(coarse, smoothed)
        if cfg.edge_mode == "subtraction":
            sharpened = tt.sub(coarse, weighted)
        else:
            sharpened = tt.add(coarse, weighted)
    boundary = tt.sigmoid(conv2d(sharpened, params))

    if k == 0:
        return boundary, np.zeros((n, 0, 2)), np.zeros((n, 0))
    flat = topk_select(boundary, k)
    scores = boundary.data[:, 0].reshape(n, h * w)[np.arange(n)[:, None], flat].copy()
    return boundary, flat_to_points(flat, h, w), scores


def _propagate_batched(src, dst, pts, affinity_scale=1.0):
    """Affinity-weighted propagation for [N, K, 2] point sets -> [N, K, C].

    Queries and the residual come from ``dst``, keys and values from
    ``src``; each row of the affinity is softmax-normalized.
    """
    if pts.shape[1] < 1:
        raise ValueError("empty point list")
    queries = point_sample_batched(dst, pts)
    keys = point_sample_batched(src, pts)
    affinity = tt.batched_matmul(queries, tt.swap_last_axes(keys))
    if affinity_scale != 1.0:
        affinity = tt.scale(affinity, affinity_scale)
    weights = tt.softmax_lastdim(affinity)
    return tt.add(tt.batched_matmul(weights, keys), queries)


def point_propagate(src, dst, pts, affinity_scale=1.0):
    """Single-item propagation returning refined point rows [K, C]."""
    if src.shape[0] != 1 or dst.shape[0] != 1:
        raise ValueError("point_propagate expects single batch items")
    if src.shape[1] != dst.shape[1]:
        raise ValueError("channel counts differ")
    arr = points_as_array(pts)
    if arr.shape[0] < 1:
        raise ValueError("empty point list")
    rows = _propagate_batched(src, dst, arr[None], affinity_scale)
    return reshape(rows, (arr.shape[0], src.shape[1]))


def _flow_into_fine(coarse_src_salient, coarse_src_boundary, fine, out, cfg):
    """Top-down step: propagate both flows and scatter into the fine level."""
    refined = fine
    if out.salient_points.shape[1] > 0:
        rows = _propagate_batched(coarse_src_salient, fine, out.salient_points, cfg.affinity_scale)
        refined = scatter_points_batched(refined, out.salient_points, rows)
    if out.boundary_points.shape[1] > 0:
        rows = _propagate_batched(coarse_src_boundary, fine, out.boundary_points, cfg.affinity_scale)
        refined = scatter_points_batched(refined, out.boundary_points, rows)
    return refined


def _flow_into_coarse(coarse, fine, out, cfg):
    """Bottom-up step: sample values from the fine level, refine the coarse."""
    refined = coarse
    if out.salient_points.shape[1] > 0:
        rows = _propagate_batched(fine, coarse, out.salient_points, cfg.affinity_scale)
        refined = scatter_points_batched(refined, out.salient_points, rows)
    if out.boundary_points.shape[1] > 0:
        rows = _propagate_batched(fine, coarse, out.boundary_points, cfg.affinity_scale)
        refined = scatter_points_batched(refined, out.boundary_points, rows)
    return refined


def pfm_forward(coarse, fine, cfg, params):
    """Full point-flow module over one pyramid gap.

    Top-down (the default) refines the fine level.  Bottom-up swaps the
    roles: both flows sample values from the fine level and write refined
    rows into the coarse level, leaving the fine level untouched.
    ``td_then_bu`` applies top-down first, then bottom-up against the
    refined fine level.
    """
    cfg.validate()
    saliency = compute_saliency(coarse, fine, params.saliency_conv)
    enhanced, s_points, s_scores = salient_match(coarse, saliency, cfg)
    boundary, b_points, b_scores = boundary_branch(coarse, saliency, params.boundary_conv, cfg)
    out = PfmOutput(
        refined=None,
        boundary=boundary,
        saliency=saliency,
        salient_points=s_points,
        salient_scores=s_scores,
        boundary_points=b_points,
        boundary_scores=b_scores,
    )
    if cfg.direction == "top_down":
        out.refined = _flow_into_fine(enhanced, coarse, fine, out, cfg)
    elif cfg.direction == "bottom_up":
        out.refined_coarse = _flow_into_coarse(coarse, fine, out, cfg)
    else:  # td_then_bu
        out.refined = _flow_into_fine(enhanced, coarse, fine, out, cfg)
        out.refined_coarse = _flow_into_coarse(coarse, out.refined, out, cfg)
    return out


def dense_affinity_reference(src, dst, affinity_scale=1.0):
    """Brute-force arm: every grid center of ``src`` is a selected point.

    Serves as the oracle for sparse propagation and as the dense-affinity
    comparison run.  Refuses grids beyond DENSE_POINT_LIMIT points to keep
    the quadratic cost bounded.
    """
    if src.shape[1] != dst.shape[1]:
        raise ValueError("channel counts differ")
    if src.shape[0] != dst.shape[0]:
        raise ValueError("batch sizes differ")
    h, w = src.shape[2:]
    if h * w > DENSE_POINT_LIMIT:
        raise ValueError(f"{h * w} points exceeds the dense limit {DENSE_POINT_LIMIT}")
    pts = np.broadcast_to(grid_center_points(h, w), (src.shape[0], h * w, 2))
    rows = _propagate_batched(src, dst, pts, affinity_scale)
    return scatter_points_batched(dst, pts, rows)
