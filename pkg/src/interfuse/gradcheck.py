"""Central finite-difference verification of autograd gradients.

Used to check the loss implementations end-to-end on a tiny fusion network
that speaks the same interface as :class:`~interfuse.model.FusionNet`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ToyFusionNet(nn.Module):
    """Two-layer fusion net: 3x3 conv (2 -> hidden, tanh), 1x1 conv heads.

    Produces a fused map and three gates at strides 1, 2 and 4, so it can be
    driven through :func:`~interfuse.model.forward_with_interventions` and
    :func:`~interfuse.losses.total_loss`.  Smooth activations keep finite
    differences away from kinks.
    """

    def __init__(self, hidden: int = 4, seed: int = 0):
        super().__init__()
        self.conv = nn.Conv2d(2, hidden, 3, padding=1)
        self.head = nn.Conv2d(hidden, 1, 1)
        self.gate = nn.Conv2d(hidden, 1, 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.5)

    def forward(self, ir, vi):
        hidden = torch.tanh(self.conv(torch.cat([ir, vi], dim=1)))
        fused = torch.sigmoid(self.head(hidden))
        logits = self.gate(hidden)
        gates = (
            torch.sigmoid(logits),
            torch.sigmoid(F.avg_pool2d(logits, 2)),
            torch.sigmoid(F.avg_pool2d(logits, 4)),
        )
        return fused, gates


def grad_check(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
               h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` is re-evaluated after perturbing each element of ``tensors``
    (weights and/or inputs, all ``requires_grad``) in place by ``+-h``.  The
    relative error of one element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = gflat[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
