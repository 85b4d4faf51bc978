"""Siamese U-Net fusion network with per-scale causal feature integrators.

Both modalities pass through one shared encoder (three conv blocks at
strides 1, 2, 4).  At every scale a :class:`CausalFeatureIntegrator` mixes the
two feature maps: bidirectional cross-attention against pooled keys/values
gives complementary features, the plain sum gives local features, and a
sigmoid gate computed from the complementary features blends the two.  The
decoder upsamples the coarsest integrated map and merges the finer ones
through skip connections, ending in a 1x1 conv + sigmoid.

Tensors are batched ``[B, C, H, W]``.  The call order is ``model(ir, vi)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .interventions import InterventionSet

STRIDE = 4  # total downsampling of the encoder


@dataclass
class ModelConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    pool_r: int = 8
    attention_heads: int = 1
    negative_slope: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"channels must be three positive ints, got {self.channels}")
        if self.pool_r < 1:
            raise ConfigError(f"pool_r must be >= 1, got {self.pool_r}")
        if any(c % self.attention_heads for c in self.channels):
            raise ConfigError(
                f"attention_heads={self.attention_heads} must divide every channel width {self.channels}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "channels" else v) for k, v in d.items()})


class FusionBundle(NamedTuple):
    baseline: torch.Tensor
    comp: torch.Tensor
    random: torch.Tensor
    drop_ir: torch.Tensor
    drop_vi: torch.Tensor
    gates: tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, negative_slope: float = 0.2):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.LeakyReLU(negative_slope),
        )


class Encoder(nn.Module):
    def __init__(self, channels: Sequence[int], negative_slope: float = 0.2):
        super().__init__()
        c1, c2, c3 = channels
        self.blocks = nn.ModuleList([
            ConvBlock(1, c1, 1, negative_slope),
            ConvBlock(c1, c2, 2, negative_slope),
            ConvBlock(c2, c3, 2, negative_slope),
        ])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"encoder input {h}x{w} must be padded to a multiple of {STRIDE}")
        pyramid = []
        for block in self.blocks:
            x = block(x)
            pyramid.append(x)
        return pyramid


def pooled_cross_attention(query, key, value, r: int, heads: int = 1, return_weights: bool = False):
    """Attend from every query position over ``r*r`` average-pooled key/value tokens.

    ``query``, ``key`` and ``value`` are ``[B, C, h, w]``; the output has the
    query's shape.  Scores are scaled by ``1/sqrt(C/heads)``.
    """
    b, c, h, w = query.shape
    if r > h or r > w:
        raise ConfigError(f"pool size r={r} exceeds feature map {h}x{w}")
    d = c // heads
    k = F.adaptive_avg_pool2d(key, r).reshape(b, heads, d, r * r)
    v = F.adaptive_avg_pool2d(value, r).reshape(b, heads, d, r * r)
    q = query.reshape(b, heads, d, h * w).transpose(-1, -2)  # [b, heads, hw, d]
    scores = torch.matmul(q, k) / math.sqrt(d)  # [b, heads, hw, r*r]
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, v.transpose(-1, -2))  # [b, heads, hw, d]
    out = out.transpose(-1, -2).reshape(b, c, h, w)
    if return_weights:
        return out, weights
    return out


def cfi_blend(theta_c: torch.Tensor, theta_l: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    return gate * theta_c + (1 - gate) * theta_l


class CausalFeatureIntegrator(nn.Module):
    def __init__(self, channels: int, pool_r: int = 8, heads: int = 1):
        super().__init__()
        self.channels = channels
        self.pool_r = pool_r
        self.heads = heads
        self.qkv_vi = nn.Conv2d(channels, 3 * channels, 1)
        self.qkv_ir = nn.Conv2d(channels, 3 * channels, 1)
        self.gate = nn.Conv2d(channels, 1, 3, padding=1)

    def cross_attention(self, theta_v, theta_i):
        """Returns ``(v_to_i, i_to_v)``: visible queries over infrared keys/values and vice versa."""
        qv, kv, vv = self.qkv_vi(theta_v).chunk(3, dim=1)
        qi, ki, vi = self.qkv_ir(theta_i).chunk(3, dim=1)
        v_to_i = pooled_cross_attention(qv, ki, vi, self.pool_r, self.heads)
        i_to_v = pooled_cross_attention(qi, kv, vv, self.pool_r, self.heads)
        return v_to_i, i_to_v

    def invariance_gate(self, theta_c: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(theta_c))

    def forward(self, theta_v, theta_i, gate_override: torch.Tensor | None = None):
        if theta_v.shape != theta_i.shape:
            raise ShapeError(f"feature shapes differ: {tuple(theta_v.shape)} vs {tuple(theta_i.shape)}")
        v_to_i, i_to_v = self.cross_attention(theta_v, theta_i)
        theta_c = v_to_i + i_to_v
        theta_l = theta_i + theta_v
        gate = self.invariance_gate(theta_c) if gate_override is None else gate_override
        return cfi_blend(theta_c, theta_l, gate), gate


class Decoder(nn.Module):
    def __init__(self, channels: Sequence[int], negative_slope: float = 0.2):
        super().__init__()
        c1, c2, c3 = channels
        self.up2 = ConvBlock(c3 + c2, c2, 1, negative_slope)
        self.up1 = ConvBlock(c2 + c1, c1, 1, negative_slope)
        self.head = nn.Conv2d(c1, 1, 1)

    def forward(self, cfi_1, cfi_2, cfi_3) -> torch.Tensor:
        for coarse, fine in ((cfi_3, cfi_2), (cfi_2, cfi_1)):
            if coarse.shape[-2] * 2 != fine.shape[-2] or coarse.shape[-1] * 2 != fine.shape[-1]:
                raise ShapeError(f"inconsistent pyramid: {tuple(coarse.shape)} -> {tuple(fine.shape)}")
        x = F.interpolate(cfi_3, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.up2(torch.cat([x, cfi_2], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.up1(torch.cat([x, cfi_1], dim=1))
        return torch.sigmoid(self.head(x))


class FusionNet(nn.Module):
    """``F(ir, vi) -> (fused, (g1, g2, g3))``.

    Inputs of any size are reflect-padded on the bottom/right to a multiple of
    four; the padding is cropped from the fused image and from the gates
    (gate ``k`` keeps ``ceil(H / 2**(k-1))`` rows).
    """

    def __init__(self, config: ModelConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.config = config or ModelConfig()
        ch = self.config.channels
        slope = self.config.negative_slope
        self.encoder = Encoder(ch, slope)
        self.cfi = nn.ModuleList([
            CausalFeatureIntegrator(c, self.config.pool_r, self.config.attention_heads) for c in ch
        ])
        self.decoder = Decoder(ch, slope)
        if seed is not None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                module.reset_parameters()
                nn.init.zeros_(module.bias)
        # Convs followed by a leaky activation get the matching He gain; torch's
        # default shrinks activations ~5x per block at this depth.
        for block in self.modules():
            if isinstance(block, ConvBlock):
                for conv in (block[0], block[2]):
                    nn.init.kaiming_normal_(conv.weight, a=self.config.negative_slope,
                                            nonlinearity="leaky_relu")
        for cfi in self.cfi:
            for proj in (cfi.qkv_vi, cfi.qkv_ir):
                nn.init.trunc_normal_(proj.weight, std=0.02, a=-0.04, b=0.04)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(x)

    def integrate(self, pyr_v, pyr_i):
        fused, gates = [], []
        for cfi, tv, ti in zip(self.cfi, pyr_v, pyr_i):
            f, g = cfi(tv, ti)
            fused.append(f)
            gates.append(g)
        return fused, gates

    def forward(self, ir: torch.Tensor, vi: torch.Tensor):
        if ir.shape != vi.shape:
            raise ShapeError(f"infrared {tuple(ir.shape)} and visible {tuple(vi.shape)} differ")
        h, w = ir.shape[-2:]
        ir_p, vi_p = pad_to_multiple(ir), pad_to_multiple(vi)
        pyr_v = self.encode(vi_p)
        pyr_i = self.encode(ir_p)
        fused, gates = self.integrate(pyr_v, pyr_i)
        out = self.decoder(*fused)[..., :h, :w]
        gates = tuple(
            g[..., : -(-h // 2 ** k), : -(-w // 2 ** k)] for k, g in enumerate(gates)
        )
        return out, gates

    @torch.no_grad()
    def fuse(self, ir: torch.Tensor, vi: torch.Tensor) -> torch.Tensor:
        """Inference helper: eval mode, no autograd, fused image only."""
        was_training = self.training
        self.eval()
        try:
            return self(ir, vi)[0]
        finally:
            self.train(was_training)


def pad_to_multiple(x: torch.Tensor, multiple: int = STRIDE) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return x
    mode = "reflect" if (ph < h and pw < w) else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def _keep_tensor(masks, like: torch.Tensor) -> torch.Tensor:
    keep = torch.stack([torch.as_tensor(m.keep) for m in masks])[:, None]
    return keep.to(dtype=like.dtype, device=like.device)


def forward_with_interventions(model: FusionNet, ir: torch.Tensor, vi: torch.Tensor,
                               interventions: Sequence[InterventionSet],
                               dropouts: bool = True) -> FusionBundle:
    """Run the baseline and the four intervened passes with shared weights.

    ``interventions`` holds one set per batch element.  The five passes are
    stacked into one batch of ``5B``; outputs are split back in the order
    baseline, complementary, random, infrared-dropout, visible-dropout.
    """
    b = ir.shape[0]
    if len(interventions) != b:
        raise ShapeError(f"{len(interventions)} intervention sets for batch of {b}")
    keep_cv = _keep_tensor([s.comp_vi for s in interventions], vi)
    keep_ci = _keep_tensor([s.comp_ir for s in interventions], ir)
    keep_r = _keep_tensor([s.random_shared for s in interventions], ir)
    zero_ir = torch.zeros_like(ir) if dropouts else ir
    zero_vi = torch.zeros_like(vi) if dropouts else vi

    ir_all = torch.cat([ir, ir * keep_ci, ir * keep_r, zero_ir, ir])
    vi_all = torch.cat([vi, vi * keep_cv, vi * keep_r, vi, zero_vi])
    fused, gates = model(ir_all, vi_all)
    base, comp, rand, d_ir, d_vi = fused.split(b)
    return FusionBundle(base, comp, rand, d_ir, d_vi, tuple(g[:b] for g in gates))
