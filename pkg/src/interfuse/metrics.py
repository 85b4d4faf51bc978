"""Fusion quality metrics: AG, SF, PSNR, CC and Qabf.

Every metric works on single-channel images on the 8-bit scale (values in
``[0, 255]``, float64).  ``f`` is the fused image, ``a`` and ``b`` the two
sources.  Use :func:`compute_metrics` for images held in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

METRIC_NAMES = ("AG", "SF", "PSNR", "CC", "Qabf")
PSNR_CAP = 100.0

# Xydeas-Petrovic sigmoid constants (strength, orientation).
QABF_STRENGTH = (0.9994, -15.0, 0.5)
QABF_ORIENTATION = (0.9879, -22.0, 0.8)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise ShapeError(f"metrics need a single-channel image, got shape {x.shape}")
    return x


def _check_same(*images):
    for im in images[1:]:
        if im.shape != images[0].shape:
            raise ShapeError(f"image shapes differ: {images[0].shape} vs {im.shape}")


def ag(f) -> float:
    """Average gradient with forward differences over the interior."""
    f = _as_2d(f)
    if min(f.shape) < 2:
        return 0.0
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    return float(np.mean(np.sqrt((dx ** 2 + dy ** 2) / 2.0)))


def sf(f) -> float:
    f = _as_2d(f)
    rf2 = np.mean((f[:, 1:] - f[:, :-1]) ** 2) if f.shape[1] > 1 else 0.0
    cf2 = np.mean((f[1:, :] - f[:-1, :]) ** 2) if f.shape[0] > 1 else 0.0
    return float(math.sqrt(rf2 + cf2))


def psnr(f, a, b) -> float:
    """PSNR of the fused image against the mean of its MSEs to both sources."""
    f, a, b = _as_2d(f), _as_2d(a), _as_2d(b)
    _check_same(f, a, b)
    mse = (np.mean((f - a) ** 2) + np.mean((f - b) ** 2)) / 2.0
    if mse < 255.0 ** 2 * 1e-10:
        return PSNR_CAP
    return float(10.0 * math.log10(255.0 ** 2 / mse))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(xc ** 2)) * float(np.sum(yc ** 2)))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(xc * yc) / denom, -1.0, 1.0))


def cc(f, a, b) -> float:
    f, a, b = _as_2d(f), _as_2d(a), _as_2d(b)
    _check_same(f, a, b)
    return (_pearson(f, a) + _pearson(f, b)) / 2.0


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses with reflected borders."""
    p = np.pad(img, 1, mode="reflect") if min(img.shape) > 1 else np.pad(img, 1, mode="edge")
    h, w = img.shape

    def s(di, dj):
        return p[1 + di:1 + di + h, 1 + dj:1 + dj + w]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1)) - (s(1, -1) + 2 * s(1, 0) + s(1, 1))
    return gx, gy


def _edge_strength_orientation(img):
    gx, gy = sobel(img)
    strength = np.sqrt(gx ** 2 + gy ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        orientation = np.where(gx == 0, np.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return strength, orientation


def _preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    hi = np.maximum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_strength = np.where(hi > 0, np.minimum(g_src, g_f) / np.where(hi > 0, hi, 1.0), 0.0)
    rel_orient = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    tg, kg, dg = QABF_STRENGTH
    ta, ka, da = QABF_ORIENTATION
    q_strength = tg / (1.0 + np.exp(kg * (rel_strength - dg)))
    q_orient = ta / (1.0 + np.exp(ka * (rel_orient - da)))
    return q_strength * q_orient


def qabf(f, a, b) -> float:
    """Edge-preservation index of Xydeas and Petrovic, weighted by source edge strength."""
    f, a, b = _as_2d(f), _as_2d(a), _as_2d(b)
    _check_same(f, a, b)
    gf, af = _edge_strength_orientation(f)
    ga, aa = _edge_strength_orientation(a)
    gb, ab = _edge_strength_orientation(b)
    q_af = _preservation(ga, aa, gf, af)
    q_bf = _preservation(gb, ab, gf, af)
    denom = float(np.sum(ga + gb))
    if denom == 0.0:
        return 0.0
    return float(np.sum(q_af * ga + q_bf * gb) / denom)


def compute_metrics(fused, vis, ir) -> dict[str, float]:
    """All five metrics for images in ``[0, 1]`` (scaled to 8-bit range here)."""
    f, a, b = (_as_2d(x) * 255.0 for x in (fused, vis, ir))
    return {
        "AG": ag(f),
        "SF": sf(f),
        "PSNR": psnr(f, a, b),
        "CC": cc(f, a, b),
        "Qabf": qabf(f, a, b),
    }


@dataclass
class MetricReport:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rows:
            raise DataError("cannot build a metric report from an empty dataset")
        self.rows = sorted(self.rows, key=lambda r: r["id"])

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_NAMES}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("id",) + METRIC_NAMES)
        for row in self.rows + [{"id": "mean", **self.mean}]:
            writer.writerow([row["id"]] + [repr(float(row[k])) for k in METRIC_NAMES])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "rows": self.rows, "mean": self.mean}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_table(self) -> str:
        header = f"{'id':<16}" + "".join(f"{k:>10}" for k in METRIC_NAMES)
        lines = [header, "-" * len(header)]
        for row in self.rows + [{"id": "mean", **self.mean}]:
            lines.append(f"{str(row['id']):<16}" + "".join(f"{row[k]:>10.4f}" for k in METRIC_NAMES))
        return "\n".join(lines)


def evaluate_dataset(dataset, model=None, fused_dir=None, checkpoint_id: str | None = None) -> MetricReport:
    """Metrics for every pair of ``dataset``.

    Fused images come either from ``model`` (a :class:`~interfuse.model.FusionNet`)
    or from ``fused_dir/<id>.png``.
    """
    from .data import read_image

    if len(dataset) == 0:
        raise DataError(f"dataset {getattr(dataset, 'name', '')!r} is empty")
    if (model is None) == (fused_dir is None):
        raise ValueError("give exactly one of model or fused_dir")
    if fused_dir is not None:
        missing = [pid for pid in dataset.ids if not (Path(fused_dir) / f"{pid}.png").is_file()]
        if missing:
            raise DataError(f"no fused image in {fused_dir} for ids: {', '.join(missing)}")

    rows = []
    for pair in dataset:
        vis = pair.visible_luma
        if model is not None:
            fused = fuse_pair(model, pair)
        else:
            fused = read_image(Path(fused_dir) / f"{pair.id}.png", channels=1)
            if fused.shape != vis.shape:
                raise ShapeError(f"fused image for {pair.id} has shape {fused.shape}, sources {vis.shape}")
        rows.append({"id": pair.id, **compute_metrics(fused, vis, pair.infrared)})
    meta = {
        "dataset": getattr(dataset, "name", ""),
        "checkpoint": checkpoint_id,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return MetricReport(rows=rows, metadata=meta)


def fuse_pair(model, pair) -> np.ndarray:
    """Fused luminance ``[1,H,W]`` for an :class:`~interfuse.data.ImagePair`."""
    import torch

    dtype = next(model.parameters()).dtype
    ir = torch.as_tensor(pair.infrared, dtype=dtype)[None]
    vi = torch.as_tensor(pair.visible_luma, dtype=dtype)[None]
    return model.fuse(ir, vi)[0].numpy().astype(np.float32)
