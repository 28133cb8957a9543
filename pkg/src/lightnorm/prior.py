"""Frozen visual prior: multi-depth feature extraction from a degraded image.

Two interchangeable backbones sit behind the same `PriorExtractor` handle:

* a ViT-B/14 adapter that consumes pretrained weights from a tensor archive
  (patch-embedding conv, class + register tokens, 12 pre-norm blocks), and
* a deterministic stub — a seeded random-projection patch embedder whose taps
  get progressively more saturated with depth, so shallow/middle/deep are
  linearly independent and the deep tap is comparatively lighting-invariant.

Features are returned on the token grid (one cell per 14x14 pixel patch) with
class/register tokens stripped, detached from any gradient tracking.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive
from .errors import ConfigurationError, InputError

PATCH = 14
STUB_BACKBONE = "stub"
VIT_BACKBONE = "vit_b14"

# Saturation gains for the stub taps; deeper taps squash the (lighting
# sensitive) linear response harder.
_STUB_GAINS = {"middle": 2.0, "deep": 8.0}


@dataclass(frozen=True)
class FeatureTriplet:
    """Shallow/middle/deep prior features on the token grid, plus source size."""

    shallow: np.ndarray
    middle: np.ndarray
    deep: np.ndarray
    source_hw: tuple

    def __post_init__(self):
        if not (self.shallow.shape == self.middle.shape == self.deep.shape):
            raise InputError(
                f"feature taps disagree in shape: {self.shallow.shape}, "
                f"{self.middle.shape}, {self.deep.shape}"
            )
        if self.shallow.ndim != 3:
            raise InputError(f"feature taps must be rank-3, got {self.shallow.shape}")

    @property
    def grid_hw(self):
        return self.shallow.shape[:2]

    @property
    def embed_dim(self):
        return self.shallow.shape[2]

    def taps(self):
        return self.shallow, self.middle, self.deep


class PriorExtractor:
    """Immutable handle over a frozen feature backbone.

    `tap_layers` are 1-indexed transformer-block indices; the last block's tap
    passes through the model's final norm, intermediate taps are raw post-block
    activations.
    """

    def __init__(self, backbone_id, backend, embed_dim=768, patch_size=PATCH,
                 tap_layers=(1, 6, 12), num_register_tokens=4, depth=12):
        tap_layers = tuple(int(t) for t in tap_layers)
        if len(tap_layers) != 3:
            raise ConfigurationError(f"need exactly 3 tap layers, got {tap_layers}")
        if list(tap_layers) != sorted(set(tap_layers)):
            raise ConfigurationError(f"tap layers must be strictly increasing: {tap_layers}")
        if tap_layers[0] < 1 or tap_layers[-1] > depth:
            raise ConfigurationError(
                f"tap layers {tap_layers} outside [1, {depth}]"
            )
        if patch_size != PATCH:
            raise ConfigurationError(f"only patch size {PATCH} is supported")
        self.backbone_id = backbone_id
        self.patch_size = patch_size
        self.embed_dim = int(embed_dim)
        self.tap_layers = tap_layers
        self.num_register_tokens = int(num_register_tokens)
        self.depth = int(depth)
        self._backend = backend


def pad_to_multiple(image, multiple=PATCH):
    """Reflect-pad right/bottom so both spatial dims divide `multiple`."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="reflect")


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an [H, W, 3] image, got shape {image.shape}")
    if image.shape[0] < PATCH or image.shape[1] < PATCH:
        raise InputError(f"image {image.shape[:2]} smaller than one {PATCH}px patch")
    if not np.isfinite(image).all():
        raise InputError("image contains non-finite pixels")
    return image.astype(np.float32, copy=False)


def extract_features(image, extractor):
    """Run the frozen backbone; returns a FeatureTriplet on the token grid."""
    image = _check_image(image)
    src_hw = image.shape[:2]
    padded = pad_to_multiple(image)
    shallow, middle, deep = extractor._backend(padded, extractor.tap_layers)
    return FeatureTriplet(shallow, middle, deep, source_hw=src_hw)


##########################################################################
## Stub backbone


class _StubBackend:
    """Seeded random-projection patch embedder with depth-dependent saturation."""

    def __init__(self, seed, embed_dim=768):
        self.seed = int(seed)
        self.embed_dim = int(embed_dim)
        patch_dim = PATCH * PATCH * 3
        rng = np.random.default_rng([0x5717B, self.seed])
        scale = 1.0 / math.sqrt(patch_dim)
        self.proj = {
            tap: (rng.standard_normal((patch_dim, self.embed_dim)) * scale).astype(np.float32)
            for tap in ("shallow", "middle", "deep")
        }

    def __call__(self, padded, tap_layers):
        h, w = padded.shape[:2]
        gh, gw = h // PATCH, w // PATCH
        patches = padded.reshape(gh, PATCH, gw, PATCH, 3).transpose(0, 2, 1, 3, 4)
        patches = patches.reshape(gh * gw, -1)

        z_s = patches @ self.proj["shallow"]
        z_m = patches @ self.proj["middle"]
        z_d = patches @ self.proj["deep"]
        shallow = z_s
        middle = np.tanh(_STUB_GAINS["middle"] * z_m) / _STUB_GAINS["middle"]
        deep = np.tanh(_STUB_GAINS["deep"] * z_d)
        out = [a.reshape(gh, gw, self.embed_dim).astype(np.float32) for a in (shallow, middle, deep)]
        return tuple(out)


def make_stub_extractor(seed=0, embed_dim=768):
    backend = _StubBackend(seed, embed_dim)
    return PriorExtractor(STUB_BACKBONE, backend, embed_dim=embed_dim)


def stub_extract(image, seed):
    """Deterministic test-double extraction; same (image, seed) -> same triplet."""
    return extract_features(image, make_stub_extractor(seed))


##########################################################################
## ViT-B/14 backbone


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_hidden, layerscale):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn_qkv = nn.Linear(dim, dim * 3)
        self.attn_proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp_fc1 = nn.Linear(dim, mlp_hidden)
        self.mlp_fc2 = nn.Linear(mlp_hidden, dim)
        self.heads = heads
        self.ls1 = nn.Parameter(torch.ones(dim)) if layerscale else None
        self.ls2 = nn.Parameter(torch.ones(dim)) if layerscale else None

    def forward(self, x):
        b, n, d = x.shape
        y = self.norm1(x)
        qkv = self.attn_qkv(y).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        y = self.attn_proj(y.transpose(1, 2).reshape(b, n, d))
        if self.ls1 is not None:
            y = y * self.ls1
        x = x + y
        y = self.mlp_fc2(F.gelu(self.mlp_fc1(self.norm2(x))))
        if self.ls2 is not None:
            y = y * self.ls2
        return x + y


class _VitBackend(nn.Module):
    def __init__(self, embed_dim, depth, heads, mlp_hidden, num_registers, pos_grid, layerscale):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, embed_dim, PATCH, stride=PATCH)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.register_tokens = (
            nn.Parameter(torch.zeros(1, num_registers, embed_dim)) if num_registers else None
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + pos_grid * pos_grid, embed_dim))
        self.blocks = nn.ModuleList(
            _Block(embed_dim, heads, mlp_hidden, layerscale) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)
        self.num_registers = num_registers
        self.pos_grid = pos_grid
        self.embed_dim = embed_dim

    def _pos_for_grid(self, gh, gw):
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        if (gh, gw) == (self.pos_grid, self.pos_grid):
            return cls_pos, patch_pos
        grid = patch_pos.reshape(1, self.pos_grid, self.pos_grid, self.embed_dim).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bicubic", align_corners=False)
        return cls_pos, grid.permute(0, 2, 3, 1).reshape(1, gh * gw, self.embed_dim)

    @torch.no_grad()
    def __call__(self, padded, tap_layers):
        x = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1)))[None]
        tokens = self.patch_embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)
        cls_pos, patch_pos = self._pos_for_grid(gh, gw)
        parts = [self.cls_token + cls_pos]
        if self.register_tokens is not None:
            parts.append(self.register_tokens.expand(1, -1, -1))
        parts.append(tokens + patch_pos)
        x = torch.cat(parts, dim=1)

        lead = 1 + self.num_registers
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in tap_layers:
                taps[i] = self.norm(x) if i == len(self.blocks) else x
        out = []
        for layer in tap_layers:
            t = taps[layer][0, lead:].reshape(gh, gw, self.embed_dim)
            out.append(t.detach().numpy().astype(np.float32))
        return tuple(out)


def _vit_param_names(depth, num_registers, layerscale):
    names = ["patch_embed.proj.weight", "patch_embed.proj.bias", "cls_token",
             "pos_embed", "norm.weight", "norm.bias"]
    if num_registers:
        names.append("register_tokens")
    per_block = ["norm1.weight", "norm1.bias", "attn.qkv.weight", "attn.qkv.bias",
                 "attn.proj.weight", "attn.proj.bias", "norm2.weight", "norm2.bias",
                 "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"]
    if layerscale:
        per_block += ["ls1.gamma", "ls2.gamma"]
    for i in range(depth):
        names += [f"blocks.{i}." + p for p in per_block]
    return names


def load_backbone(weights_path, tap_layers=(1, 6, 12)):
    """Build a ViT extractor from a tensor archive of pretrained parameters.

    Depth, register count, MLP width and LayerScale usage are inferred from the
    archive; missing or malformed parameters produce a ConfigurationError that
    names them.
    """
    arrays, metadata = load_archive(weights_path)

    if "patch_embed.proj.weight" not in arrays:
        raise ConfigurationError(
            f"{weights_path}: missing parameter 'patch_embed.proj.weight'"
        )
    pw = arrays["patch_embed.proj.weight"]
    if pw.ndim != 4 or pw.shape[1:] != (3, PATCH, PATCH):
        raise ConfigurationError(
            f"{weights_path}: patch_embed.proj.weight has shape {pw.shape}, "
            f"expected (E, 3, {PATCH}, {PATCH})"
        )
    embed_dim = pw.shape[0]

    block_ids = set()
    for name in arrays:
        if name.startswith("blocks."):
            try:
                block_ids.add(int(name.split(".")[1]))
            except ValueError as e:
                raise ConfigurationError(f"{weights_path}: bad block name '{name}'") from e
    depth = (max(block_ids) + 1) if block_ids else 0
    if depth == 0:
        raise ConfigurationError(f"{weights_path}: archive contains no transformer blocks")
    num_registers = arrays["register_tokens"].shape[1] if "register_tokens" in arrays else 0
    layerscale = "blocks.0.ls1.gamma" in arrays

    expected = _vit_param_names(depth, num_registers, layerscale)
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise ConfigurationError(
            f"{weights_path}: missing {len(missing)} parameter(s): {', '.join(missing[:8])}"
        )
    wrong_dtype = [n for n in expected if arrays[n].dtype != np.float32]
    if wrong_dtype:
        raise ConfigurationError(
            f"{weights_path}: non-float32 parameter(s): {', '.join(wrong_dtype[:8])}"
        )

    n_pos = arrays["pos_embed"].shape[1] - 1
    pos_grid = int(round(math.sqrt(n_pos)))
    if pos_grid * pos_grid != n_pos:
        raise ConfigurationError(f"{weights_path}: pos_embed grid {n_pos} is not square")
    mlp_hidden = arrays["blocks.0.mlp.fc1.weight"].shape[0]
    heads = int(metadata.get("num_heads", max(1, embed_dim // 64)))

    vit = _VitBackend(embed_dim, depth, heads, mlp_hidden, num_registers, pos_grid, layerscale)
    rename = {"ls1.gamma": "ls1", "ls2.gamma": "ls2",
              "attn.qkv": "attn_qkv", "attn.proj": "attn_proj",
              "mlp.fc1": "mlp_fc1", "mlp.fc2": "mlp_fc2",
              "patch_embed.proj": "patch_embed"}
    state = {}
    for name in expected:
        key = name
        for old, new in rename.items():
            key = key.replace(old, new)
        state[key] = torch.from_numpy(arrays[name])
    try:
        vit.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigurationError(f"{weights_path}: parameter shape mismatch: {e}") from e
    vit.eval()
    for p in vit.parameters():
        p.requires_grad_(False)

    return PriorExtractor(
        VIT_BACKBONE, vit, embed_dim=embed_dim, tap_layers=tap_layers,
        num_register_tokens=num_registers, depth=depth,
    )


def get_extractor(backbone_id, seed=0, weights_path=None, embed_dim=768):
    """Resolve a backbone selection string to an extractor."""
    if backbone_id == STUB_BACKBONE:
        return make_stub_extractor(seed, embed_dim=embed_dim)
    if backbone_id == VIT_BACKBONE:
        if weights_path is None:
            raise ConfigurationError("vit_b14 backbone needs --backbone-weights PATH")
        return load_backbone(weights_path)
    raise ConfigurationError(f"unknown backbone '{backbone_id}'")


##########################################################################
## PCA visualization


def pca_color_map(features, component_count=3):
    """Project token vectors onto their top principal components as RGB.

    Each retained component is min-max normalized to [0, 1] with a fixed sign
    convention (the largest-magnitude loading is made positive); components
    without variance fall back to zero channels with a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    h, w, c = features.shape
    if h * w < component_count:
        raise InputError(f"grid {h}x{w} has fewer positions than {component_count} components")
    flat = features.reshape(-1, c)
    centered = flat - flat.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)

    out = np.zeros((h * w, component_count), dtype=np.float64)
    scale0 = svals[0] if svals.size else 0.0
    for j in range(component_count):
        if j >= svals.size or svals[j] <= 1e-9 * max(scale0, 1e-30) or scale0 == 0.0:
            warnings.warn(f"principal component {j} has no variance; emitting zero channel")
            continue
        comp = vt[j]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        proj = centered @ comp
        lo, hi = proj.min(), proj.max()
        if hi - lo <= 0:
            warnings.warn(f"principal component {j} has no variance; emitting zero channel")
            continue
        out[:, j] = (proj - lo) / (hi - lo)
    return out.reshape(h, w, component_count).astype(np.float32)


def pca_visualize(triplet, component_count=3):
    """Per-layer PCA color maps for the three taps: (shallow, middle, deep)."""
    return tuple(pca_color_map(t, component_count) for t in triplet.taps())


def pca_visualize_pair(triplet_a, triplet_b, component_count=3):
    """Per-layer color maps for two images sharing one PCA basis per tap.

    Component directions and the min-max range are fitted on the union of
    both images' tokens, so colors are directly comparable across the pair
    (the side-by-side figure convention). Returns a list over taps of
    (map_a, map_b).
    """
    out = []
    for ta, tb in zip(triplet_a.taps(), triplet_b.taps()):
        ha, wa, c = ta.shape
        hb, wb, _ = tb.shape
        both = np.concatenate(
            [ta.reshape(-1, c), tb.reshape(-1, c)], axis=0
        ).astype(np.float64)
        mean = both.mean(axis=0, keepdims=True)
        centered = both - mean
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)

        maps = np.zeros((len(both), component_count))
        scale0 = svals[0] if svals.size else 0.0
        for j in range(component_count):
            if j >= svals.size or svals[j] <= 1e-9 * max(scale0, 1e-30) or scale0 == 0.0:
                warnings.warn(f"principal component {j} has no variance; emitting zero channel")
                continue
            comp = vt[j]
            if comp[np.argmax(np.abs(comp))] < 0:
                comp = -comp
            proj = centered @ comp
            lo, hi = proj.min(), proj.max()
            if hi - lo <= 0:
                warnings.warn(f"principal component {j} has no variance; emitting zero channel")
                continue
            maps[:, j] = (proj - lo) / (hi - lo)
        na = ha * wa
        out.append((
            maps[:na].reshape(ha, wa, component_count).astype(np.float32),
            maps[na:].reshape(hb, wb, component_count).astype(np.float32),
        ))
    return out
