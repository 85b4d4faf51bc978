"""Average treatment effect of each intervention on fusion quality.

For intervention ``t`` the estimate is the sample mean over pairs of
``Q(fuse(pair)) - Q(fuse(intervene_t(pair)))``, with ``Q`` a quality
functional of ``(fused, visible_luma, infrared)`` on the 8-bit scale and
measured against the *unmodified* sources.  Interventions:

    0 baseline, 1 complementary masking, 2 random shared masking,
    3 infrared dropout, 4 visible dropout

Masks are drawn per image from ``(seed, image id)`` with the training
samplers, so every per-sample delta is reproducible from
``(checkpoint, id, seed, t)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import derive_seed
from .errors import ConfigError, DataError
from .interventions import InterventionConfig, make_intervention_set
from .metrics import cc, psnr

INTERVENTIONS = {0: "baseline", 1: "complementary", 2: "random", 3: "ir_dropout", 4: "vi_dropout"}


def _q_psnr(fused, vis, ir):
    return psnr(fused * 255.0, vis * 255.0, ir * 255.0)


def _q_cc(fused, vis, ir):
    return cc(fused * 255.0, vis * 255.0, ir * 255.0)


QUALITY = {"PSNR": _q_psnr, "CC": _q_cc}


@dataclass
class ATERow:
    t: int
    intervention: str
    metric: str
    ate: float
    std: float
    n: int
    deltas: list[float]
    per_seed: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "t": self.t, "intervention": self.intervention, "metric": self.metric,
            "ate": self.ate, "std": self.std, "n": self.n,
            "per_seed": self.per_seed, "deltas": self.deltas,
        }


@dataclass
class ATEReport:
    rows: list[ATERow]
    baseline: dict[str, float]
    sanity: list[ATERow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def get(self, t: int, metric: str) -> ATERow:
        for row in self.rows + self.sanity:
            if row.t == t and row.metric == metric:
                return row
        raise KeyError((t, metric))

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "baseline": self.baseline,
            "sanity": [r.to_dict() for r in self.sanity],
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_csv(self, path=None, include_sanity: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "intervention", "metric", "ate", "std", "n"))
        for r in (self.sanity if include_sanity else []) + self.rows:
            w.writerow((r.t, r.intervention, r.metric, repr(r.ate), repr(r.std), r.n))
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def ate_from_qualities(baseline_q: Sequence[float], intervened_q: Sequence[float]) -> tuple[float, list[float]]:
    """The sample-average estimator on precomputed quality values."""
    if len(baseline_q) != len(intervened_q):
        raise ValueError("baseline and intervened quality lists differ in length")
    if len(baseline_q) == 0:
        raise DataError("ATE needs at least one sample")
    deltas = [float(b) - float(i) for b, i in zip(baseline_q, intervened_q)]
    return float(np.mean(deltas)), deltas


def _tensors(pair, dtype):
    ir = torch.as_tensor(pair.infrared, dtype=dtype)[None]
    vi = torch.as_tensor(pair.visible_luma, dtype=dtype)[None]
    return ir, vi


def intervened_inputs(pair, t: int, seed: int, config: InterventionConfig | None = None):
    """``(ir, vi)`` arrays ``[1,H,W]`` of ``pair`` under intervention ``t``."""
    ir, vi = pair.infrared, pair.visible_luma
    if t == 0:
        return ir, vi
    if t in (1, 2):
        h, w = pair.shape
        rng = np.random.default_rng(derive_seed(seed, "ate", pair.id))
        s = make_intervention_set(h, w, config or InterventionConfig(), rng)
        if t == 1:
            return ir * s.comp_ir.keep, vi * s.comp_vi.keep
        return ir * s.random_shared.keep, vi * s.random_shared.keep
    if t == 3:
        return np.zeros_like(ir), vi
    if t == 4:
        return ir, np.zeros_like(vi)
    raise ConfigError(f"unknown intervention t={t}; expected one of {sorted(INTERVENTIONS)}")


def _fuse(model, ir, vi):
    dtype = next(model.parameters()).dtype
    out = model.fuse(torch.as_tensor(ir, dtype=dtype)[None], torch.as_tensor(vi, dtype=dtype)[None])
    return out[0].numpy().astype(np.float64)


def estimate_ate(model, dataset, t: int, quality: str | Callable = "PSNR", seed: int = 0,
                 config: InterventionConfig | None = None, _baseline_cache: dict | None = None) -> ATERow:
    if t not in INTERVENTIONS:
        raise ConfigError(f"unknown intervention t={t}; expected one of {sorted(INTERVENTIONS)}")
    if len(dataset) == 0:
        raise DataError("ATE needs a non-empty dataset")
    if callable(quality):
        q, name = quality, getattr(quality, "__name__", "custom")
    elif quality in QUALITY:
        q, name = QUALITY[quality], quality
    else:
        raise ConfigError(f"unknown quality metric {quality!r}; expected one of {sorted(QUALITY)}")

    cache = _baseline_cache if _baseline_cache is not None else {}
    base_q, int_q = [], []
    for pair in dataset:
        vis, ir = pair.visible_luma, pair.infrared
        if pair.id not in cache:
            cache[pair.id] = _fuse(model, ir, vis)
        base = cache[pair.id]
        if t == 0:
            intervened = base
        else:
            ir_t, vi_t = intervened_inputs(pair, t, seed, config)
            intervened = _fuse(model, ir_t, vi_t)
        base_q.append(q(base, vis, ir))
        int_q.append(q(intervened, vis, ir))
    ate, deltas = ate_from_qualities(base_q, int_q)
    return ATERow(t=t, intervention=INTERVENTIONS[t], metric=name, ate=ate, std=0.0,
                  n=len(deltas), deltas=deltas, per_seed=[ate])


def run_ate_suite(model, dataset, seeds: Sequence[int] = (0,), metrics: Sequence[str] = ("PSNR", "CC"),
                  config: InterventionConfig | None = None, include_sanity: bool = True) -> ATEReport:
    """All four interventions x the given metrics x all seeds.

    ``ate`` is the mean over every (seed, image) delta; ``std`` is the
    across-seed standard deviation of the per-seed estimates.
    """
    if not seeds:
        raise ConfigError("need at least one seed")
    cache: dict = {}
    rows, sanity = [], []
    for t in (1, 2, 3, 4):
        for metric in metrics:
            per_seed, deltas = [], []
            for seed in seeds:
                row = estimate_ate(model, dataset, t, metric, seed, config, cache)
                per_seed.append(row.ate)
                deltas.extend(row.deltas)
            rows.append(ATERow(t=t, intervention=INTERVENTIONS[t], metric=metric,
                               ate=float(np.mean(deltas)), std=float(np.std(per_seed)),
                               n=len(deltas), deltas=deltas, per_seed=per_seed))
    if include_sanity:
        for metric in metrics:
            sanity.append(estimate_ate(model, dataset, 0, metric, seeds[0], config, cache))
    baseline = {}
    for metric in metrics:
        q = QUALITY[metric]
        baseline[metric] = float(np.mean([q(cache[p.id], p.visible_luma, p.infrared) for p in dataset]))
    meta = {"dataset": getattr(dataset, "name", ""), "seeds": list(seeds), "metrics": list(metrics)}
    return ATEReport(rows=rows, baseline=baseline, sanity=sanity, metadata=meta)
