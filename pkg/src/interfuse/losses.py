"""Composite training objective.

``total = fidelity + alpha * inv + beta * nec`` where

* fidelity: L1 to both sources plus an L1 match of the fused Laplacian to the
  elementwise max of the source Laplacians;
* inv: gate-weighted L1 between the baseline and the masked outputs, plus a
  regulariser on the scale-averaged gate (mean pulled toward ``eta``, minus
  the entropy of the gate normalised to a spatial distribution);
* nec: L1 between the baseline and each single-modality output.

All L1 norms are means.  Image tensors are ``[B, 1, H, W]``; per-image terms
are averaged over the batch so a batch may be split into micro-batches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

NEC_MODES = ("as_written", "maximize_margin")

_LAPLACE_KERNEL = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.05
    lambda1: float = 1.0
    eta: float = 0.3
    nec_mode: str = "as_written"
    margin: float = 0.1

    def __post_init__(self):
        if self.nec_mode not in NEC_MODES:
            raise ConfigError(f"unknown nec_mode {self.nec_mode!r}; expected one of {NEC_MODES}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    fidelity: torch.Tensor
    inv: torch.Tensor
    nec: torch.Tensor
    reg: torch.Tensor
    weights: LossWeights

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("fidelity", "inv", "nec", "reg", "total")}

    def weights_echo(self) -> dict:
        return asdict(self.weights)


def _check_same(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _per_image_mean(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).mean(dim=1)


def laplacian(img: torch.Tensor) -> torch.Tensor:
    """5-point Laplacian with reflected borders; ``[B,1,H,W] -> [B,1,H,W]``."""
    squeeze = img.dim() == 3
    if squeeze:
        img = img[None]
    h, w = img.shape[-2:]
    mode = "reflect" if h > 1 and w > 1 else "replicate"
    kernel = torch.tensor(_LAPLACE_KERNEL, dtype=img.dtype, device=img.device)[None, None]
    out = F.conv2d(F.pad(img, (1, 1, 1, 1), mode=mode), kernel)
    return out[0] if squeeze else out


def fidelity_loss(fused, vis, ir, lambda1: float = 1.0) -> torch.Tensor:
    _check_same(fused, vis, ir)
    grad_target = torch.maximum(laplacian(vis), laplacian(ir))
    return (
        (fused - vis).abs().mean()
        + (fused - ir).abs().mean()
        + lambda1 * (laplacian(fused) - grad_target).abs().mean()
    )


def aggregate_gates(g1, g2, g3) -> torch.Tensor:
    """Average the three scale gates after bilinear upsampling to ``g1``'s size."""
    h, w = g1.shape[-2:]
    for k, g in ((2, g2), (4, g3)):
        if g.shape[-2:] != (-(-h // k), -(-w // k)):
            raise ShapeError(f"gate of shape {tuple(g.shape[-2:])} is not 1/{k} of {h}x{w}")
    up = [F.interpolate(g, size=(h, w), mode="bilinear", align_corners=False) for g in (g2, g3)]
    return (g1 + up[0] + up[1]) / 3.0


def spatial_entropy(gbar: torch.Tensor) -> torch.Tensor:
    """Entropy (nats) of each gate map normalised to sum to one; returns ``[B]``."""
    flat = gbar.flatten(1)
    p = flat / flat.sum(dim=1, keepdim=True)
    return -torch.xlogy(p, p).sum(dim=1)


def gate_regularizer(gbar: torch.Tensor, eta: float = 0.3) -> torch.Tensor:
    per_image = (_per_image_mean(gbar) - eta).abs() - spatial_entropy(gbar)
    return per_image.mean()


def intervention_consistency_loss(fused, fused_comp, fused_rand, gbar, eta: float = 0.3,
                                  return_parts: bool = False):
    _check_same(fused, fused_comp, fused_rand)
    if gbar.shape[-2:] != fused.shape[-2:]:
        raise ShapeError(f"gate {tuple(gbar.shape)} does not match image {tuple(fused.shape)}")
    residual = ((fused_comp - fused) * gbar).abs().mean() + ((fused_rand - fused) * gbar).abs().mean()
    reg = gate_regularizer(gbar, eta)
    if return_parts:
        return residual + reg, reg
    return residual + reg


def modal_necessity_loss(fused, drop_ir, drop_vi, mode: str = "as_written",
                         margin: float = 0.1) -> torch.Tensor:
    _check_same(fused, drop_ir, drop_vi)
    d_ir = _per_image_mean((fused - drop_ir).abs())
    d_vi = _per_image_mean((fused - drop_vi).abs())
    if mode == "as_written":
        return (d_ir + d_vi).mean()
    if mode == "maximize_margin":
        return (F.relu(margin - d_ir) + F.relu(margin - d_vi)).mean()
    raise ConfigError(f"unknown nec_mode {mode!r}; expected one of {NEC_MODES}")


def total_loss(bundle, vis, ir, weights: LossWeights | None = None) -> LossBreakdown:
    """Compose the objective from a :class:`~interfuse.model.FusionBundle`."""
    w = weights or LossWeights()
    fid = fidelity_loss(bundle.baseline, vis, ir, w.lambda1)
    gbar = aggregate_gates(*bundle.gates)
    inv, reg = intervention_consistency_loss(bundle.baseline, bundle.comp, bundle.random, gbar,
                                             w.eta, return_parts=True)
    nec = modal_necessity_loss(bundle.baseline, bundle.drop_ir, bundle.drop_vi, w.nec_mode, w.margin)
    total = fid + w.alpha * inv + w.beta * nec
    return LossBreakdown(total=total, fidelity=fid, inv=inv, nec=nec, reg=reg, weights=w)
