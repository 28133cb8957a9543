"""Adaptive fusion of the three prior taps into one feature map, plus
per-stage heads that project/resize the fused map to each hierarchy level.

Fusion law: each tap goes through SiLU -> 1x1 conv producing a single logit
map; the three logit maps are concatenated and softmaxed point-wise, giving
convex weights w_s, w_m, w_d that blend the taps channel-wise:

    fused = w_s * shallow + w_m * middle + w_d * deep

Alternative modes cover the ablation grid: "sum" adds the taps, "single_*"
passes one tap through. Per-stage heads (1x1 conv + bilinear resize,
align_corners=False) exist in every mode.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError

FUSION_MODES = ("affm", "sum", "single_shallow", "single_middle", "single_deep")


@dataclass
class FusedPrior:
    """Fused base feature map plus its per-stage projected/resized copies."""

    base: torch.Tensor                      # [N, E, h, w]
    per_stage: list = field(default_factory=list)   # [N, C_s, H_s, W_s] per stage
    weights: torch.Tensor | None = None     # [N, 3, h, w] softmax maps, affm mode only


class _Branch(nn.Module):
    def __init__(self, embed_dim):
        super().__init__()
        self.conv = nn.Conv2d(embed_dim, 1, kernel_size=1)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(F.silu(x))


class _StageHead(nn.Module):
    def __init__(self, embed_dim, out_channels):
        super().__init__()
        self.proj = nn.Conv2d(embed_dim, out_channels, kernel_size=1)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, size):
        if size[0] < 1 or size[1] < 1:
            raise InputError(f"stage resolution {size} smaller than 1x1")
        return F.interpolate(self.proj(x), size=size, mode="bilinear", align_corners=False)


class AdaptiveFeatureFusion(nn.Module):
    """Fuses the tap triplet and serves stage-resolution prior features.

    Parameter naming follows the checkpoint convention:
    `branch_{s|m|d}.conv.*` for the fusion logits, `stage{k}.proj.*` for the
    per-stage heads (k is the 1-based stage position across the U).
    """

    def __init__(self, embed_dim=768, stage_channels=(), mode="affm"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode '{mode}'")
        self.embed_dim = int(embed_dim)
        self.mode = mode
        if mode == "affm":
            self.branch_s = _Branch(embed_dim)
            self.branch_m = _Branch(embed_dim)
            self.branch_d = _Branch(embed_dim)
        for k, ch in enumerate(stage_channels, start=1):
            setattr(self, f"stage{k}", _StageHead(embed_dim, ch))
        self.stage_count = len(stage_channels)

    def fuse(self, shallow, middle, deep):
        """Blend the taps; returns (base, weights) with weights None unless affm."""
        if not (shallow.shape == middle.shape == deep.shape):
            raise InputError(
                f"tap shapes disagree: {tuple(shallow.shape)}, "
                f"{tuple(middle.shape)}, {tuple(deep.shape)}"
            )
        if self.mode == "sum":
            return shallow + middle + deep, None
        if self.mode == "single_shallow":
            return shallow, None
        if self.mode == "single_middle":
            return middle, None
        if self.mode == "single_deep":
            return deep, None
        logits = torch.cat(
            [self.branch_s(shallow), self.branch_m(middle), self.branch_d(deep)], dim=1
        )
        weights = torch.softmax(logits, dim=1)
        base = (
            weights[:, 0:1] * shallow
            + weights[:, 1:2] * middle
            + weights[:, 2:3] * deep
        )
        return base, weights

    def stage_project(self, base, stage_index, size):
        """Project the fused map to stage `stage_index` (1-based) at `size`."""
        if not 1 <= stage_index <= self.stage_count:
            raise ConfigurationError(
                f"stage index {stage_index} outside [1, {self.stage_count}]"
            )
        return getattr(self, f"stage{stage_index}")(base, size)

    def forward(self, shallow, middle, deep, stage_sizes):
        base, weights = self.fuse(shallow, middle, deep)
        per_stage = [
            self.stage_project(base, k, size) for k, size in enumerate(stage_sizes, start=1)
        ]
        return FusedPrior(base=base, per_stage=per_stage, weights=weights)


def triplet_to_tensors(triplet, dtype=torch.float32):
    """FeatureTriplet (numpy HWC) -> three [1, E, h, w] torch tensors."""
    out = []
    for tap in triplet.taps():
        t = torch.from_numpy(np.ascontiguousarray(tap.transpose(2, 0, 1)))[None]
        out.append(t.to(dtype))
    return tuple(out)


def batch_triplets(triplets, dtype=torch.float32):
    """Stack same-shape FeatureTriplets into three [N, E, h, w] tensors."""
    stacks = [[], [], []]
    for tr in triplets:
        for i, tap in enumerate(tr.taps()):
            stacks[i].append(torch.from_numpy(np.ascontiguousarray(tap.transpose(2, 0, 1))))
    return tuple(torch.stack(s).to(dtype) for s in stacks)
