"""Structured input interventions: block masks, complementary pairs, dropout.

A mask stores ``keep`` (1 = observed, 0 = occluded).  Occluded regions are
unions of axis-aligned ``block_size`` squares lying fully inside the image.
Complementary pairs are disjoint over their *occluded* pixels, so every pixel
is observed in at least one modality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, SamplingError, ShapeError


class MaskKind(str, Enum):
    COMPLEMENTARY_VI = "complementary_vi"
    COMPLEMENTARY_IR = "complementary_ir"
    RANDOM_SHARED = "random_shared"
    DROPOUT = "dropout"
    IDENTITY = "identity"


@dataclass
class InterventionMask:
    keep: np.ndarray  # [H, W] float32 of {0, 1}
    blocks: list[tuple[int, int]]
    block_size: int
    kind: MaskKind

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.keep.shape)

    @property
    def occluded(self) -> np.ndarray:
        return self.keep == 0

    @property
    def occluded_fraction(self) -> float:
        return float(self.occluded.mean())

    @classmethod
    def from_blocks(cls, height: int, width: int, blocks, block_size: int,
                    kind: MaskKind = MaskKind.RANDOM_SHARED) -> "InterventionMask":
        keep = np.ones((height, width), dtype=np.float32)
        blocks = [(int(r), int(c)) for r, c in blocks]
        for r, c in blocks:
            if r < 0 or c < 0 or r + block_size > height or c + block_size > width:
                raise ShapeError(f"block at ({r},{c}) of size {block_size} leaves {height}x{width}")
            keep[r:r + block_size, c:c + block_size] = 0.0
        return cls(keep=keep, blocks=blocks, block_size=block_size, kind=MaskKind(kind))

    @classmethod
    def dropout(cls, height: int, width: int) -> "InterventionMask":
        return cls(np.zeros((height, width), np.float32), [], 0, MaskKind.DROPOUT)

    @classmethod
    def identity(cls, height: int, width: int) -> "InterventionMask":
        return cls(np.ones((height, width), np.float32), [], 0, MaskKind.IDENTITY)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "block_size": self.block_size,
            "count": len(self.blocks),
            "blocks": [list(b) for b in self.blocks],
            "occluded_fraction": self.occluded_fraction,
        }


@dataclass(frozen=True)
class InterventionConfig:
    block_size: int = 16
    count_range: tuple[int, int] = (1, 6)
    max_attempts: int = 1000
    max_restarts: int = 100

    def __post_init__(self):
        lo, hi = self.count_range
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid mask count range {self.count_range}")


@dataclass
class InterventionSet:
    comp_vi: InterventionMask
    comp_ir: InterventionMask
    random_shared: InterventionMask
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "comp_vi": self.comp_vi.to_dict(),
            "comp_ir": self.comp_ir.to_dict(),
            "random_shared": self.random_shared.to_dict(),
        }


def _check_dims(height: int, width: int, block_size: int) -> None:
    if height < block_size or width < block_size:
        raise ShapeError(f"image {height}x{width} is smaller than mask block {block_size}")


def _random_origin(height, width, block_size, rng) -> tuple[int, int]:
    return (int(rng.integers(0, height - block_size + 1)),
            int(rng.integers(0, width - block_size + 1)))


def sample_block_mask(height: int, width: int, block_size: int, rng: np.random.Generator,
                      count_range: tuple[int, int] = (1, 6), count: int | None = None,
                      kind: MaskKind = MaskKind.RANDOM_SHARED) -> InterventionMask:
    """Occlude 1-6 uniformly placed blocks; blocks may overlap one another."""
    _check_dims(height, width, block_size)
    if count is None:
        count = int(rng.integers(count_range[0], count_range[1] + 1))
    blocks = [_random_origin(height, width, block_size, rng) for _ in range(count)]
    return InterventionMask.from_blocks(height, width, blocks, block_size, kind)


def _overlaps(a, b, size) -> bool:
    return abs(a[0] - b[0]) < size and abs(a[1] - b[1]) < size


def sample_complementary_masks(height: int, width: int, block_size: int, rng: np.random.Generator,
                               count_range: tuple[int, int] = (1, 6), max_attempts: int = 1000,
                               max_restarts: int = 100):
    """Sample visible/infrared masks whose occluded regions never overlap.

    Blocks are placed alternately (visible, infrared, ...) by rejection
    sampling, every block disjoint from every block already placed.  A block
    beyond a mask's first that cannot be placed within ``max_attempts`` is
    dropped, so cramped images get fewer blocks.  If the first infrared block
    cannot be placed the whole draw restarts; after ``max_restarts`` a
    :class:`SamplingError` is raised.
    """
    _check_dims(height, width, block_size)
    lo, hi = count_range
    for _ in range(max_restarts):
        n_vi = int(rng.integers(lo, hi + 1))
        n_ir = int(rng.integers(lo, hi + 1))
        placed: list[tuple[int, int]] = []
        owned = {"vi": [], "ir": []}
        order = []
        for i in range(max(n_vi, n_ir)):
            if i < n_vi:
                order.append("vi")
            if i < n_ir:
                order.append("ir")
        failed = False
        for who in order:
            for _attempt in range(max_attempts):
                origin = _random_origin(height, width, block_size, rng)
                if not any(_overlaps(origin, p, block_size) for p in placed):
                    placed.append(origin)
                    owned[who].append(origin)
                    break
            else:
                if not owned[who]:
                    failed = True
                    break
        if failed:
            continue
        vi = InterventionMask.from_blocks(height, width, owned["vi"], block_size,
                                          MaskKind.COMPLEMENTARY_VI)
        ir = InterventionMask.from_blocks(height, width, owned["ir"], block_size,
                                          MaskKind.COMPLEMENTARY_IR)
        return vi, ir
    raise SamplingError(
        f"could not place disjoint complementary blocks of size {block_size} "
        f"in {height}x{width} after {max_restarts} restarts"
    )


def apply_mask(image, mask: InterventionMask):
    """``image * keep`` broadcast over leading (channel / batch) axes.

    Works for numpy arrays and torch tensors; the result has the input's type.
    """
    if tuple(image.shape[-2:]) != mask.shape:
        raise ShapeError(f"image spatial size {tuple(image.shape[-2:])} != mask {mask.shape}")
    if isinstance(image, np.ndarray):
        return image * mask.keep.astype(image.dtype)
    import torch

    keep = torch.as_tensor(mask.keep, dtype=image.dtype, device=image.device)
    return image * keep


def make_intervention_set(height: int, width: int, config: InterventionConfig | None,
                          rng: np.random.Generator, seed: int | None = None) -> InterventionSet:
    config = config or InterventionConfig()
    vi, ir = sample_complementary_masks(height, width, config.block_size, rng,
                                        config.count_range, config.max_attempts,
                                        config.max_restarts)
    shared = sample_block_mask(height, width, config.block_size, rng, config.count_range)
    return InterventionSet(comp_vi=vi, comp_ir=ir, random_shared=shared, seed=seed)
