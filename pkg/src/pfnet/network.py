"""Network assembly: toy stride-32 backbone, pooled-context head,
channel-aligned pyramid decoder with point-flow modules at three gaps,
and a quarter-resolution fused prediction head.

Pyramid levels follow the stride contract: level l has spatial size
input / 2^l for l = 2..5.  Gap l denotes the decoder step between level l
(coarse) and level l-1 (fine); its saliency/boundary maps live on the
level-l grid (strides 8/16/32 for gaps 3/4/5).

Paper-scale defaults (14x14 salient kernel, 128 boundary points, pooled
bins up to 6) exceed the tiny grids of a desk-scale input, so the
assembly clamps each gap's point budget to its grid and drops pooled bins
larger than the deepest map.  The configured values are preserved; only
the effective values shrink.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .ops import ConvParams, adaptive_avg_pool, bilinear_resize, channel_norm, conv2d
from .pointflow import PfmConfig, PfmParams, pfm_forward
from .tensor import Tensor


def default_gap_configs(channels):
    return {gap: PfmConfig(channels=channels) for gap in (3, 4, 5)}


@dataclass
class NetworkConfig:
    input_size: tuple = (64, 64)
    num_classes: int = 6
    fpn_channels: int = 64
    backbone_channels: tuple = (16, 32, 64, 128)
    ppm_bins: tuple = (1, 2, 3, 6)
    use_ppm: bool = True
    pfm_enabled_gaps: tuple = (3, 4, 5)
    pfm: dict = None

    def __post_init__(self):
        if self.pfm is None:
            self.pfm = default_gap_configs(self.fpn_channels)

    def validate(self):
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size must be divisible by 32, got {h}x{w}")
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone needs 4 stage widths")
        for gap in self.pfm_enabled_gaps:
            if gap not in (3, 4, 5):
                raise ValueError(f"unknown pyramid gap {gap}")

    def level_size(self, level):
        h, w = self.input_size
        return (h // 2 ** level, w // 2 ** level)

    def effective_pfm(self, gap):
        """Gap config with the point budget clamped to the gap's grid."""
        base = self.pfm[gap]
        h, w = self.level_size(gap)
        kh, kw = base.salient_kernel
        return replace(
            base,
            channels=self.fpn_channels,
            salient_kernel=(min(kh, h), min(kw, w)),
            boundary_k=min(base.boundary_k, h * w),
        )

    def effective_ppm_bins(self):
        h, w = self.level_size(5)
        return tuple(b for b in self.ppm_bins if b <= min(h, w))


class ParameterSet(dict):
    """Named map from parameter path to tensor; every path unique."""

    def conv(self, name, stride=1, padding=0):
        return ConvParams(self[f"{name}.weight"], self[f"{name}.bias"], stride, padding)


def _level_channels(cfg):
    return {l: cfg.backbone_channels[l - 2] for l in (2, 3, 4, 5)}


def init_params(cfg, seed, dtype=np.float32):
    """Deterministic parameter creation from a seeded uniform scheme.

    Conv weights are uniform with bound sqrt(6 / fan_in); norm affine terms
    start at identity.  The boundary-prediction bias starts at -2 so the
    early boundary probability sits near 0.12 and the edge loss does not
    swamp training.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    params = ParameterSet()

    def conv(name, cout, cin, k, bias_fill=0.0):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype), requires_grad=True
        )
        params[f"{name}.bias"] = Tensor(
            np.full(cout, bias_fill, dtype=dtype), requires_grad=True
        )

    def norm(name, c):
        params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    bc = cfg.backbone_channels
    c = cfg.fpn_channels
    conv("backbone.stem.conv", bc[0], 3, 3)
    norm("backbone.stem.norm", bc[0])
    prev = bc[0]
    for i, ch in enumerate(bc, start=1):
        conv(f"backbone.stage{i}.conv1", ch, prev, 3)
        norm(f"backbone.stage{i}.norm1", ch)
        conv(f"backbone.stage{i}.conv2", ch, ch, 3)
        norm(f"backbone.stage{i}.norm2", ch)
        prev = ch

    levels = _level_channels(cfg)
    lateral_levels = (2, 3, 4) if cfg.use_ppm else (2, 3, 4, 5)
    for l in lateral_levels:
        conv(f"lateral{l}.conv1", c, levels[l], 1)
        conv(f"lateral{l}.conv2", c, c, 1)

    if cfg.use_ppm:
        bins = cfg.effective_ppm_bins()
        for b in bins:
            conv(f"ppm.bin{b}.conv", c, levels[5], 1)
        conv("ppm.out.conv", c, levels[5] + len(bins) * c, 3)
        norm("ppm.out.norm", c)

    for gap in sorted(cfg.pfm_enabled_gaps):
        conv(f"pfm.gap{gap}.saliency.conv", 1, 2 * c, 3)
        conv(f"pfm.gap{gap}.boundary.conv", 1, c, 1, bias_fill=-2.0)

    conv("head.conv", c, 4 * c, 3)
    norm("head.norm", c)
    conv("head.classifier", cfg.num_classes, c, 1)
    return params


def _stage(x, params, name, stride):
    out = conv2d(x, params.conv(f"{name}.conv1", stride=stride, padding=1))
    out = tt.relu(channel_norm(out, params[f"{name}.norm1.gamma"], params[f"{name}.norm1.beta"]))
    out = conv2d(out, params.conv(f"{name}.conv2", stride=1, padding=1))
    return tt.relu(channel_norm(out, params[f"{name}.norm2.gamma"], params[f"{name}.norm2.beta"]))


def backbone_forward(image, params, cfg):
    """Bottom-up encoder: stem /2, then four stages to strides 4/8/16/32."""
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise ValueError(f"input size must be divisible by 32, got {h}x{w}")
    x = conv2d(image, params.conv("backbone.stem.conv", stride=2, padding=1))
    x = tt.relu(channel_norm(x, params["backbone.stem.norm.gamma"], params["backbone.stem.norm.beta"]))
    feats = []
    for i in range(1, 5):
        x = _stage(x, params, f"backbone.stage{i}", stride=2)
        feats.append(x)
    return tuple(feats)  # levels 2..5


def _lateral(x, params, level):
    out = conv2d(x, params.conv(f"lateral{level}.conv1"))
    return conv2d(tt.relu(out), params.conv(f"lateral{level}.conv2"))


def ppm_forward(c5, params, bins):
    """Pooled multi-bin context head at the deepest level's resolution."""
    h, w = c5.shape[2:]
    for b in bins:
        if b > min(h, w):
            raise ValueError(f"pool bin {b} too large for {h}x{w}")
    branches = [c5]
    for b in bins:
        pooled = adaptive_avg_pool(c5, (b, b))
        pooled = conv2d(pooled, params.conv(f"ppm.bin{b}.conv"))
        branches.append(bilinear_resize(pooled, (h, w)))
    out = conv2d(tt.concat_channels(branches), params.conv("ppm.out.conv", padding=1))
    return tt.relu(channel_norm(out, params["ppm.out.norm.gamma"], params["ppm.out.norm.beta"]))


@dataclass
class NetOutput:
    logits: Tensor                 # [N, num_classes, H/4, W/4]
    boundary_maps: dict            # gap -> boundary map tensor
    pfm_outputs: dict              # gap -> PfmOutput

    def boundary_list(self):
        return [self.boundary_maps[g] for g in sorted(self.boundary_maps)]


def pfnet_forward(image, params, cfg):
    """Full forward pass to quarter-resolution class logits.

    With no gaps enabled and the context head off this is exactly the
    plain pyramid decoder (resize + add at every gap) - the same graph,
    not an approximation.
    """
    cfg.validate()
    c2, c3, c4, c5 = backbone_forward(image, params, cfg)
    by_level = {2: c2, 3: c3, 4: c4, 5: c5}

    p = {}
    if cfg.use_ppm:
        p[5] = ppm_forward(c5, params, cfg.effective_ppm_bins())
    else:
        p[5] = _lateral(c5, params, 5)

    boundary_maps = {}
    pfm_outputs = {}
    for gap in (5, 4, 3):
        fine = _lateral(by_level[gap - 1], params, gap - 1)
        if gap in cfg.pfm_enabled_gaps:
            gap_cfg = cfg.effective_pfm(gap)
            gap_params = PfmParams(
                saliency_conv=params.conv(f"pfm.gap{gap}.saliency.conv", padding=1),
                boundary_conv=params.conv(f"pfm.gap{gap}.boundary.conv"),
            )
            out = pfm_forward(p[gap], fine, gap_cfg, gap_params)
            pfm_outputs[gap] = out
            boundary_maps[gap] = out.boundary
            if out.refined_coarse is not None:
                p[gap] = out.refined_coarse
            if out.refined is not None:
                p[gap - 1] = out.refined
            else:
                p[gap - 1] = tt.add(fine, bilinear_resize(p[gap], fine.shape[2:]))
        else:
            p[gap - 1] = tt.add(fine, bilinear_resize(p[gap], fine.shape[2:]))

    qh, qw = image.shape[2] // 4, image.shape[3] // 4
    fused = tt.concat_channels([bilinear_resize(p[l], (qh, qw)) for l in (2, 3, 4, 5)])
    head = conv2d(fused, params.conv("head.conv", padding=1))
    head = tt.relu(channel_norm(head, params["head.norm.gamma"], params["head.norm.beta"]))
    logits = conv2d(head, params.conv("head.classifier"))
    return NetOutput(logits=logits, boundary_maps=boundary_maps, pfm_outputs=pfm_outputs)
