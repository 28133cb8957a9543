"""Hierarchical restoration network with dual-domain auxiliary cross-attention.

Every block runs channel-wise (transposed) attention twice: a self branch on
the internal features and an auxiliary cross branch whose keys/values come
from the fused prior, gated per channel by sigmoid(alpha) and merged through a
1x1 conv with a residual. A frequency-domain counterpart computes global
correlation between FFT'd queries and keys and uses it to modulate values,
with the same auxiliary/gate structure. Blocks compose spatial attention ->
gated FFN -> frequency attention -> gated FFN (or both attentions in parallel
into a single FFN), and are stacked in a U-shaped encoder/decoder with
strided-conv downsampling, pixel-shuffle upsampling, concat+1x1 skips and a
global residual.
"""

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigurationError, InputError, NumericalError
from .fusion import FUSION_MODES, AdaptiveFeatureFusion

EPS = 1e-8


##########################################################################
## Layer norm (channel dimension, per spatial position)


class ChannelLayerNorm(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        y = _plain_channel_norm(x)
        return y * self.weight[None, :, None, None] + self.bias[None, :, None, None]


def _plain_channel_norm(x):
    # explicit centered second moment; x.var(dim=1) is slow on CPU
    centered = x - x.mean(dim=1, keepdim=True)
    var = centered.square().mean(dim=1, keepdim=True)
    return centered / torch.sqrt(var + EPS)


##########################################################################
## Transposed (channel-wise) attention


def transposed_attention(q, k, v, temperature, heads):
    """Channel-wise attention: softmax over a (C/heads)^2 map per head.

    Q/K rows (one channel's flattened spatial response) are L2-normalized with
    an epsilon floor, their gram matrix is scaled by a learnable per-head
    temperature, softmaxed, and applied to V.
    """
    if q.shape[1] % heads != 0:
        raise ConfigurationError(f"channels {q.shape[1]} not divisible by {heads} heads")
    h, w = q.shape[-2:]
    q = rearrange(q, "b (head c) h w -> b head c (h w)", head=heads)
    k = rearrange(k, "b (head c) h w -> b head c (h w)", head=heads)
    v = rearrange(v, "b (head c) h w -> b head c (h w)", head=heads)
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(EPS)
    k = k / k.norm(dim=-1, keepdim=True).clamp_min(EPS)
    attn = (q @ k.transpose(-2, -1)) * temperature
    attn = attn.softmax(dim=-1)
    out = attn @ v
    return rearrange(out, "b head c (h w) -> b (head c) h w", h=h, w=w)


class _ConvTransform(nn.Module):
    """1x1 point-wise conv followed by 3x3 depth-wise conv."""

    def __init__(self, dim):
        super().__init__()
        self.pw = nn.Conv2d(dim, dim, kernel_size=1)
        self.dw = nn.Conv2d(dim, dim, kernel_size=3, padding=1, groups=dim)

    def forward(self, x):
        return self.dw(self.pw(x))


def _run_transforms(x, transforms):
    """Apply several same-size _ConvTransforms to one input in two fused conv
    calls (weights concatenated); returns the per-transform outputs."""
    dim = x.shape[1]
    pw_w = torch.cat([t.pw.weight for t in transforms])
    pw_b = torch.cat([t.pw.bias for t in transforms])
    dw_w = torch.cat([t.dw.weight for t in transforms])
    dw_b = torch.cat([t.dw.bias for t in transforms])
    y = F.conv2d(x, pw_w, pw_b)
    y = F.conv2d(y, dw_w, dw_b, padding=1, groups=y.shape[1])
    return y.split(dim, dim=1)


class SpatialAuxiliaryAttention(nn.Module):
    """Self-attention plus sigmoid-gated cross-attention from the fused prior.

    X = LN(prev), X' = LN(prior); Q,K,V and the auxiliary query come from X,
    auxiliary key/value from X'; when no prior is given X' falls back to X.
    """

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm1 = ChannelLayerNorm(dim)
        self.norm2 = ChannelLayerNorm(dim)
        self.wq = _ConvTransform(dim)
        self.wk = _ConvTransform(dim)
        self.wv = _ConvTransform(dim)
        self.wq2 = _ConvTransform(dim)
        self.wk2 = _ConvTransform(dim)
        self.wv2 = _ConvTransform(dim)
        self.temp = nn.Parameter(torch.ones(heads, 1, 1))
        self.temp2 = nn.Parameter(torch.ones(heads, 1, 1))
        self.alpha = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Conv2d(dim, dim, kernel_size=1)

    def forward(self, prev, prior=None):
        if prior is not None and prior.shape[-2:] != prev.shape[-2:]:
            raise InputError(
                f"prior {tuple(prior.shape[-2:])} does not match features "
                f"{tuple(prev.shape[-2:])}"
            )
        x = self.norm1(prev)
        q, k, v, q2 = _run_transforms(x, (self.wq, self.wk, self.wv, self.wq2))
        if prior is None:
            k2, v2 = _run_transforms(x, (self.wk2, self.wv2))
        else:
            k2, v2 = _run_transforms(self.norm2(prior), (self.wk2, self.wv2))
        f_sa = transposed_attention(q, k, v, self.temp, self.heads)
        f_ca = transposed_attention(q2, k2, v2, self.temp2, self.heads)
        gate = torch.sigmoid(self.alpha)[None, :, None, None]
        return self.proj(f_sa + gate * f_ca) + prev


class FrequencyAuxiliaryAttention(nn.Module):
    """Frequency-domain counterpart: global correlation modulates the values.

    Queries and keys are mapped by a 2-D FFT, multiplied as Qhat * conj(Khat),
    inverse-transformed (realness asserted), channel-normalized and used as an
    element-wise modulation of V. The auxiliary branch and alpha gate mirror
    the spatial block.
    """

    def __init__(self, dim):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.norm2 = ChannelLayerNorm(dim)
        self.wq = _ConvTransform(dim)
        self.wk = _ConvTransform(dim)
        self.wv = _ConvTransform(dim)
        self.wq2 = _ConvTransform(dim)
        self.wk2 = _ConvTransform(dim)
        self.wv2 = _ConvTransform(dim)
        self.alpha = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Conv2d(dim, dim, kernel_size=1)

    @staticmethod
    def correlate(q, k):
        """Inverse FFT of Qhat * conj(Khat): circular cross-correlation."""
        qf = torch.fft.fft2(q, dim=(-2, -1))
        kf = torch.fft.fft2(k, dim=(-2, -1))
        corr = torch.fft.ifft2(qf * kf.conj(), dim=(-2, -1))
        with torch.no_grad():
            scale = corr.real.abs().max().clamp_min(1.0)
            residue = corr.imag.abs().max() / scale
            if not residue < 1e-6:  # NaN also fails this way
                raise NumericalError(
                    f"frequency correlation lost conjugate symmetry "
                    f"(relative imaginary residue {float(residue):.3e})"
                )
        return corr.real

    def forward(self, prev, prior=None):
        if prior is not None and prior.shape[-2:] != prev.shape[-2:]:
            raise InputError(
                f"prior {tuple(prior.shape[-2:])} does not match features "
                f"{tuple(prev.shape[-2:])}"
            )
        x = self.norm1(prev)
        q, k, v, q2 = _run_transforms(x, (self.wq, self.wk, self.wv, self.wq2))
        if prior is None:
            k2, v2 = _run_transforms(x, (self.wk2, self.wv2))
        else:
            k2, v2 = _run_transforms(self.norm2(prior), (self.wk2, self.wv2))
        f_sa = _plain_channel_norm(self.correlate(q, k)) * v
        f_ca = _plain_channel_norm(self.correlate(q2, k2)) * v2
        gate = torch.sigmoid(self.alpha)[None, :, None, None]
        return self.proj(f_sa + gate * f_ca) + prev


class GatedFeedForward(nn.Module):
    """LN -> 1x1 expand (ratio 2.66) -> 3x3 depth-wise -> SiLU-gated halves
    -> 1x1 project, with residual."""

    def __init__(self, dim, expansion=2.66):
        super().__init__()
        hidden = max(1, round(dim * expansion / 2))
        self.norm = ChannelLayerNorm(dim)
        self.expand = nn.Conv2d(dim, hidden * 2, kernel_size=1)
        self.dw = nn.Conv2d(hidden * 2, hidden * 2, kernel_size=3, padding=1, groups=hidden * 2)
        self.project = nn.Conv2d(hidden, dim, kernel_size=1)

    def forward(self, x):
        y = self.expand(self.norm(x))
        y1, y2 = self.dw(y).chunk(2, dim=1)
        return self.project(F.silu(y1) * y2) + x


##########################################################################
## Block and plan


class SFDINOBlock(nn.Module):
    """One restoration block: dual-domain auxiliary attention + gated FFNs.

    Sequential form: spatial -> ffn -> freq -> ffn2. Parallel form feeds both
    attentions the same input, sums their outputs and applies a single FFN.
    Either attention can be disabled (then only one FFN remains).
    """

    def __init__(self, dim, heads, use_spatial=True, use_freq=True, parallel=False):
        super().__init__()
        if not (use_spatial or use_freq):
            raise ConfigurationError("block needs at least one attention domain")
        self.parallel = parallel and use_spatial and use_freq
        if use_spatial:
            self.spatial = SpatialAuxiliaryAttention(dim, heads)
        if use_freq:
            self.freq = FrequencyAuxiliaryAttention(dim)
        self.ffn = GatedFeedForward(dim)
        if use_spatial and use_freq and not self.parallel:
            self.ffn2 = GatedFeedForward(dim)

    def forward(self, x, prior=None):
        if self.parallel:
            x = self.spatial(x, prior) + self.freq(x, prior) - x
            return self.ffn(x)
        if hasattr(self, "spatial"):
            x = self.ffn(self.spatial(x, prior))
            if hasattr(self, "freq"):
                x = self.ffn2(self.freq(x, prior))
            return x
        return self.ffn(self.freq(x, prior))


@dataclass(frozen=True)
class NetworkPlan:
    """Architecture + variant record; defaults land near the 9.5M-parameter
    budget of the reference configuration."""

    stage_count: int = 4
    channels: tuple = (32, 64, 128, 256)
    blocks: tuple = (2, 3, 3, 4)
    heads: tuple = (1, 2, 4, 8)
    use_prior: bool = True
    use_spatial: bool = True
    use_freq: bool = True
    parallel_aca: bool = False
    fusion_mode: str = "affm"
    embed_dim: int = 768

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.stage_count < 1:
            raise ConfigurationError("stage_count must be >= 1")
        for name in ("channels", "blocks", "heads"):
            if len(getattr(self, name)) != self.stage_count:
                raise ConfigurationError(
                    f"{name} has {len(getattr(self, name))} entries for "
                    f"{self.stage_count} stages"
                )
        if not (self.use_spatial or self.use_freq):
            raise ConfigurationError("at least one of use_spatial/use_freq must be true")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion_mode '{self.fusion_mode}'")
        for c, h in zip(self.channels, self.heads):
            if c % h != 0:
                raise ConfigurationError(f"channels {c} not divisible by heads {h}")

    @property
    def stage_positions(self):
        """Total stage positions across the U (encoder incl. bottom + decoder)."""
        return 2 * self.stage_count - 1

    def level_of(self, position):
        """Hierarchy level (1-based) of a 1-based stage position."""
        s = self.stage_count
        return position if position <= s else 2 * s - position

    def stage_sizes(self, h, w):
        """Spatial size of each stage position for an h x w input."""
        sizes = []
        for k in range(1, self.stage_positions + 1):
            lvl = self.level_of(k)
            sizes.append((h // (2 ** (lvl - 1)), w // (2 ** (lvl - 1))))
        return sizes

    def to_dict(self):
        d = asdict(self)
        for name in ("channels", "blocks", "heads"):
            d[name] = list(d[name])
        return d

    @staticmethod
    def from_dict(d):
        return NetworkPlan(**d)


PLAN_PRESETS = {
    "default": NetworkPlan(),
    "small": NetworkPlan(stage_count=2, channels=(16, 32), blocks=(1, 1), heads=(1, 2)),
    "large": NetworkPlan(channels=(48, 96, 192, 384)),
}


##########################################################################
## U-shaped restoration network


class _Stage(nn.Module):
    def __init__(self, dim, heads, count, plan):
        super().__init__()
        for j in range(count):
            setattr(self, f"block{j}", SFDINOBlock(
                dim, heads, use_spatial=plan.use_spatial,
                use_freq=plan.use_freq, parallel=plan.parallel_aca,
            ))
        self.count = count

    def forward(self, x, prior=None):
        for j in range(self.count):
            x = getattr(self, f"block{j}")(x, prior)
        return x


class _Down(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class _Up(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out * 4, kernel_size=1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class _Skip(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv2d(dim * 2, dim, kernel_size=1)

    def forward(self, x, skip):
        return self.conv(torch.cat([x, skip], dim=1))


class RestorationNet(nn.Module):
    """Encoder/decoder over SFDINO blocks with a global residual to the input."""

    def __init__(self, plan):
        super().__init__()
        self.plan = plan
        ch = plan.channels
        self.stem = nn.Conv2d(3, ch[0], kernel_size=3, padding=1)
        for k in range(1, plan.stage_positions + 1):
            lvl = plan.level_of(k)
            setattr(self, f"stage{k}", _Stage(ch[lvl - 1], plan.heads[lvl - 1],
                                              plan.blocks[lvl - 1], plan))
        for lvl in range(1, plan.stage_count):
            setattr(self, f"down{lvl}", _Down(ch[lvl - 1], ch[lvl]))
            setattr(self, f"up{lvl}", _Up(ch[lvl], ch[lvl - 1]))
            setattr(self, f"skip{lvl}", _Skip(ch[lvl - 1]))
        self.head = nn.Conv2d(ch[0], 3, kernel_size=3, padding=1)

    def forward(self, image, priors=None):
        plan = self.plan
        n, c, h, w = image.shape
        factor = 2 ** (plan.stage_count - 1)
        if h % factor or w % factor:
            raise InputError(
                f"input {h}x{w} not divisible by {factor}; pad to a multiple of {factor}"
            )
        if priors is None:
            priors = [None] * plan.stage_positions
        if len(priors) != plan.stage_positions:
            raise InputError(
                f"got {len(priors)} stage priors, need {plan.stage_positions}"
            )

        x = self.stem(image)
        skips = []
        k = 1
        for lvl in range(1, plan.stage_count + 1):
            x = getattr(self, f"stage{k}")(x, priors[k - 1])
            if lvl < plan.stage_count:
                skips.append(x)
                x = getattr(self, f"down{lvl}")(x)
            k += 1
        for lvl in range(plan.stage_count - 1, 0, -1):
            x = getattr(self, f"up{lvl}")(x)
            x = getattr(self, f"skip{lvl}")(x, skips[lvl - 1])
            x = getattr(self, f"stage{k}")(x, priors[k - 1])
            k += 1
        return self.head(x) + image


class LightNormalizer(nn.Module):
    """Full trainable model: adaptive prior fusion + restoration network.

    State-dict keys follow the checkpoint convention (`affm.*`, `net.*`).
    The frozen backbone lives outside this module; its features enter through
    `forward`'s triplet tensors.
    """

    def __init__(self, plan):
        super().__init__()
        self.plan = plan
        if plan.use_prior:
            stage_channels = tuple(
                plan.channels[plan.level_of(k) - 1]
                for k in range(1, plan.stage_positions + 1)
            )
            self.affm = AdaptiveFeatureFusion(
                plan.embed_dim, stage_channels, mode=plan.fusion_mode
            )
        self.net = RestorationNet(plan)

    def forward(self, image, triplet_tensors=None):
        """image: [N,3,H,W]; triplet_tensors: (shallow, middle, deep) [N,E,h,w]."""
        priors = None
        if self.plan.use_prior:
            if triplet_tensors is None:
                raise InputError("plan uses the prior but no triplet was given")
            sizes = self.plan.stage_sizes(image.shape[-2], image.shape[-1])
            fused = self.affm(*triplet_tensors, stage_sizes=sizes)
            priors = fused.per_stage
        return self.net(image, priors)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
