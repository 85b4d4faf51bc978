"""Image pair loading, colour conversion and training patch sampling.

Images live in memory as float32 arrays laid out ``[C, H, W]`` with values in
``[0, 1]``.  Visible images are 3-channel RGB, infrared images 1-channel.  The
network only ever sees the visible luminance, so both encoder inputs are
single-channel; chroma is carried alongside and re-applied for display.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Full-range ITU-R BT.601 (JPEG) YCbCr, chroma offset by 0.5.
_RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735891647856, -0.331264108352144, 0.5],
        [0.5, -0.418687589158345, -0.081312410841655],
    ],
    dtype=np.float64,
)
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)
_YCC_OFFSET = np.array([0.0, 0.5, 0.5])


@dataclass
class ImagePair:
    visible: np.ndarray  # [3, H, W]
    infrared: np.ndarray  # [1, H, W]
    id: str = ""

    def __post_init__(self):
        if self.visible.ndim != 3 or self.visible.shape[0] != 3:
            raise ShapeError(f"visible must be [3,H,W], got {self.visible.shape}")
        if self.infrared.ndim != 3 or self.infrared.shape[0] != 1:
            raise ShapeError(f"infrared must be [1,H,W], got {self.infrared.shape}")
        if self.visible.shape[1:] != self.infrared.shape[1:]:
            raise ShapeError(
                f"spatial size mismatch: visible {self.visible.shape[1:]} "
                f"vs infrared {self.infrared.shape[1:]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.visible.shape[1:])

    @cached_property
    def visible_luma(self) -> np.ndarray:
        return rgb_to_luma_chroma(self.visible).luma


@dataclass
class LumaChroma:
    luma: np.ndarray  # [1, H, W]
    chroma: np.ndarray  # [2, H, W], Cb and Cr with 0.5 offset


@dataclass
class PatchPair:
    visible_luma: np.ndarray  # [1, P, P]
    infrared: np.ndarray  # [1, P, P]

    @property
    def size(self) -> int:
        return self.infrared.shape[-1]


def read_image(path, channels: int) -> np.ndarray:
    """Decode an 8-bit image file to a float32 ``[channels, H, W]`` array.

    A grayscale file requested as RGB is replicated across channels; an RGB
    file requested as grayscale is reduced to BT.601 luminance.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA") else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if channels == 3 and arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    elif channels == 1 and arr.shape[0] == 3:
        arr = rgb_to_luma_chroma(arr).luma
    return arr.astype(np.float32)


def save_image(path, image: np.ndarray) -> Path:
    """Write a ``[1,H,W]`` or ``[3,H,W]`` float image in ``[0,1]`` as 8-bit PNG."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"cannot save array of shape {image.shape} as an image")
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(u8.transpose(1, 2, 0))).save(path)
    return path


def load_image_pair(visible_path, infrared_path, pair_id: str | None = None) -> ImagePair:
    visible = read_image(visible_path, channels=3)
    infrared = read_image(infrared_path, channels=1)
    if visible.shape[1:] != infrared.shape[1:]:
        raise ShapeError(
            f"visible {visible_path} has size {visible.shape[1:]} but infrared "
            f"{infrared_path} has size {infrared.shape[1:]}"
        )
    if pair_id is None:
        pair_id = Path(visible_path).stem
    return ImagePair(visible=visible, infrared=infrared, id=pair_id)


def rgb_to_luma_chroma(rgb: np.ndarray) -> LumaChroma:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] RGB array, got {rgb.shape}")
    ycc = np.tensordot(_RGB_TO_YCC, rgb.astype(np.float64), axes=1)
    ycc += _YCC_OFFSET[:, None, None]
    return LumaChroma(luma=ycc[:1].astype(np.float32), chroma=ycc[1:].astype(np.float32))


def luma_chroma_to_rgb(luma: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    """Inverse BT.601 transform without clamping."""
    luma = np.asarray(luma, dtype=np.float64)
    chroma = np.asarray(chroma, dtype=np.float64)
    if luma.ndim == 2:
        luma = luma[None]
    if luma.shape[0] != 1 or chroma.shape[0] != 2 or luma.shape[1:] != chroma.shape[1:]:
        raise ShapeError(f"luma {luma.shape} and chroma {chroma.shape} are incompatible")
    ycc = np.concatenate([luma, chroma], axis=0) - _YCC_OFFSET[:, None, None]
    return np.tensordot(_YCC_TO_RGB, ycc, axes=1).astype(np.float32)


def chroma_reinject(fused_luma: np.ndarray, chroma: np.ndarray) -> np.ndarray:
    """Colourise a fused luminance map with the visible image's chroma."""
    return np.clip(luma_chroma_to_rgb(fused_luma, chroma), 0.0, 1.0)


def sample_patch(pair: ImagePair, size: int, rng: np.random.Generator,
                 flip_prob: float = 0.5) -> PatchPair:
    """Crop the same random window from both modalities and flip both alike.

    No upsampling is ever done; images smaller than the patch are an error.
    """
    h, w = pair.shape
    if h < size or w < size:
        raise ShapeError(f"image {pair.id!r} of size {h}x{w} is smaller than patch {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    flip_h = bool(rng.random() < flip_prob)
    flip_v = bool(rng.random() < flip_prob)

    window = (slice(None), slice(top, top + size), slice(left, left + size))
    vis = pair.visible_luma[window]
    ir = pair.infrared[window]
    if flip_h:
        vis, ir = vis[:, :, ::-1], ir[:, :, ::-1]
    if flip_v:
        vis, ir = vis[:, ::-1, :], ir[:, ::-1, :]
    return PatchPair(visible_luma=np.ascontiguousarray(vis), infrared=np.ascontiguousarray(ir))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts, e.g. (seed, worker, epoch)."""
    digest = hashlib.sha256(repr(tuple(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class PairEntry:
    id: str
    visible_path: Path
    infrared_path: Path


class PairDataset:
    """Registered pairs from ``<root>/vi`` + ``<root>/ir`` or a manifest file.

    Manifest lines are ``<id>\\t<vi_path>\\t<ir_path>``; relative paths are
    resolved against the manifest's directory.  When ``<root>/manifest.tsv``
    exists it overrides directory scanning.  Entries are ordered by id.
    """

    def __init__(self, entries: Sequence[PairEntry], name: str = "dataset", cache: bool = True):
        self.entries = sorted(entries, key=lambda e: e.id)
        self.name = name
        self.access_count = 0
        self._cache: dict[str, ImagePair] | None = {} if cache else None

    @classmethod
    def from_directory(cls, root, manifest=None, cache: bool = True) -> "PairDataset":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {root}")
        if manifest is None and (root / "manifest.tsv").is_file():
            manifest = root / "manifest.tsv"
        if manifest is not None:
            entries = read_manifest(manifest)
        else:
            entries = _scan_pairs(root)
        return cls(entries, name=root.name, cache=cache)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> ImagePair:
        self.access_count += 1
        entry = self.entries[index]
        if self._cache is not None and entry.id in self._cache:
            return self._cache[entry.id]
        pair = load_image_pair(entry.visible_path, entry.infrared_path, pair_id=entry.id)
        if self._cache is not None:
            self._cache[entry.id] = pair
        return pair

    def __iter__(self) -> Iterator[ImagePair]:
        for i in range(len(self)):
            yield self[i]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def _scan_pairs(root: Path) -> list[PairEntry]:
    vi_dir, ir_dir = root / "vi", root / "ir"
    for d in (vi_dir, ir_dir):
        if not d.is_dir():
            raise DataError(f"expected sibling directories 'vi' and 'ir' under {root}; missing {d}")
    vi = {p.name: p for p in vi_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    ir = {p.name: p for p in ir_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    unmatched = sorted(set(vi) ^ set(ir))
    if unmatched:
        raise DataError(f"pairs missing a counterpart in {root}: {', '.join(unmatched)}")
    return [PairEntry(Path(n).stem, vi[n], ir[n]) for n in sorted(vi)]


def read_manifest(path) -> list[PairEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected '<id>\\t<vi_path>\\t<ir_path>'")
        pid, vi, ir = parts
        entries.append(PairEntry(pid, path.parent / vi, path.parent / ir))
    return entries


def write_manifest(path, entries: Sequence[PairEntry]) -> Path:
    path = Path(path)
    lines = [f"{e.id}\t{e.visible_path}\t{e.infrared_path}" for e in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
