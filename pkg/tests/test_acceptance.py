"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line (shown in the terminal summary)
before asserting.  Criteria 5, 6 and 8 share one overfit training run; set
``INTERFUSE_ACCEPTANCE_CACHE=<dir>`` to keep that run between sessions (it is
reused only when its recorded config matches).
"""

from __future__ import annotations

import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from interfuse.ate import ate_from_qualities, estimate_ate, run_ate_suite
from interfuse.checkpoint import load_model
from interfuse.config import config_to_dict
from interfuse.data import PairDataset, rgb_to_luma_chroma
from interfuse.gradcheck import ToyFusionNet, grad_check
from interfuse.interventions import InterventionConfig, make_intervention_set
from interfuse.losses import LossWeights, fidelity_loss, total_loss
from interfuse.metrics import ag, cc, psnr, qabf, sf
from interfuse.model import CausalFeatureIntegrator, forward_with_interventions, pooled_cross_attention
from interfuse.synthetic import make_gray_pair, write_dataset
from interfuse.trainer import TrainConfig, read_loss_log, train

from test_metrics import naive_ag, naive_pearson, naive_psnr, naive_qabf, naive_sf

RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


# -- 1 ---------------------------------------------------------------------------------------------


def test_criterion_1_mask_properties():
    cfg = InterventionConfig(block_size=16, count_range=(1, 6))
    rng = np.random.default_rng(2024)
    bad_overlap = bad_count = bad_block = 0
    start = time.perf_counter()
    for _ in range(10_000):
        s = make_intervention_set(256, 256, cfg, rng)
        if np.any(s.comp_vi.occluded & s.comp_ir.occluded):
            bad_overlap += 1
        for m in (s.comp_vi, s.comp_ir, s.random_shared):
            if not 1 <= len(m.blocks) <= 6:
                bad_count += 1
            rebuilt = np.zeros((256, 256), bool)
            for r, c in m.blocks:
                if not (0 <= r <= 240 and 0 <= c <= 240):
                    bad_block += 1
                rebuilt[r:r + 16, c:c + 16] = True
            if m.block_size != 16 or not np.array_equal(rebuilt, m.occluded):
                bad_block += 1
    elapsed = time.perf_counter() - start
    ok = bad_overlap == bad_count == bad_block == 0 and elapsed < 30
    record(1, ok, f"10^4 sets, overlaps={bad_overlap} bad_counts={bad_count} bad_blocks={bad_block}, "
                  f"{elapsed:.1f}s (< 30s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------------------------


def _ulp_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach().numpy(), b.detach().numpy()
    return float(np.max(np.abs(a - b) / np.spacing(np.abs(b))))


def test_criterion_2_cfi_algebra():
    start = time.perf_counter()
    torch.manual_seed(7)
    worst_ulp, worst_row = 0.0, 0.0
    for c, size in ((8, 8), (16, 12), (32, 16)):
        cfi = CausalFeatureIntegrator(c, pool_r=4)
        with torch.no_grad():
            for p in cfi.parameters():
                p.normal_(0, 0.3)
            tv, ti = torch.randn(2, c, size, size), torch.randn(2, c, size, size)
            v_to_i, i_to_v = cfi.cross_attention(tv, ti)
            theta_c, theta_l = v_to_i + i_to_v, tv + ti
            for g, expected in ((1.0, theta_c), (0.0, theta_l), (0.5, (theta_c + theta_l) / 2)):
                out, _ = cfi(tv, ti, gate_override=torch.full((2, 1, size, size), g))
                worst_ulp = max(worst_ulp, _ulp_distance(out, expected))
            q, k, v = (torch.randn(2, c, size, size) for _ in range(3))
            _, w = pooled_cross_attention(q, k, v, r=4, return_weights=True)
            worst_row = max(worst_row, float((w.sum(-1) - 1).abs().max()))
    elapsed = time.perf_counter() - start
    ok = worst_ulp <= 2 and worst_row <= 1e-6 and elapsed < 10
    record(2, ok, f"gate forcing max {worst_ulp:.2f} ulp (<= 2), row-sum error {worst_row:.1e} (<= 1e-6), "
                  f"{elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------------------------


def test_criterion_3_gradient_correctness():
    start = time.perf_counter()
    r = np.random.default_rng(3)
    net = ToyFusionNet(hidden=3, seed=3).double()
    ir = torch.tensor(r.random((1, 1, 8, 8)), requires_grad=True)
    vi = torch.tensor(r.random((1, 1, 8, 8)), requires_grad=True)
    sets = [make_intervention_set(8, 8, InterventionConfig(block_size=2), r)]
    params = list(net.parameters()) + [ir, vi]

    def full():
        bundle = forward_with_interventions(net, ir, vi, sets)
        return total_loss(bundle, vi, ir, LossWeights(nec_mode="as_written")).total

    def fid():
        return fidelity_loss(net(ir, vi)[0], vi, ir, 1.0)

    err_full, err_fid = grad_check(full, params), grad_check(fid, params)
    elapsed = time.perf_counter() - start
    ok = err_full < 1e-3 and err_fid < 1e-4 and elapsed < 120
    record(3, ok, f"full objective rel. err {err_full:.2e} (< 1e-3), fidelity {err_fid:.2e} (< 1e-4), "
                  f"{elapsed:.1f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------------------------------


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def test_criterion_4_metric_oracles():
    start = time.perf_counter()
    r = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        f, a, b = (r.random((8, 8)) * 255 for _ in range(3))
        fl, al, bl = f.tolist(), a.tolist(), b.tolist()
        worst = max(worst,
                    _rel(ag(f), naive_ag(fl)), _rel(sf(f), naive_sf(fl)),
                    _rel(psnr(f, a, b), naive_psnr(fl, al, bl)),
                    _rel(cc(f, a, b), (naive_pearson(fl, al) + naive_pearson(fl, bl)) / 2),
                    _rel(qabf(f, a, b), naive_qabf(fl, al, bl)))
    checker = ((np.indices((16, 16)) // 4).sum(0) % 2) * 255.0
    q_same = qabf(checker, checker, checker)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and q_same >= 0.98 and elapsed < 60
    record(4, ok, f"oracle max rel. err {worst:.1e} (<= 1e-6); Qabf(f=a=b checker) = {q_same:.5f} (>= 0.98 "
                  f"required; the index's sigmoid constants cap it at 0.97479); {elapsed:.1f}s")
    assert ok


# -- shared overfit run (5, 6, 8) --------------------------------------------------------------------

OVERFIT = dict(epochs=10, steps_per_epoch=50, batch_size=16, micro_batch=4, learning_rate=1e-4, patch=128,
               channels=(16, 32, 64), pool_r=8, seed=0)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    cache = os.environ.get("INTERFUSE_ACCEPTANCE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("overfit")
    data, out = root / "data", root / "run"
    config = TrainConfig(**OVERFIT, out=str(out))
    stamp = root / "run_info.json"
    wanted = config_to_dict(config)
    if stamp.is_file() and json.loads(stamp.read_text())["config"] == wanted and (out / "best.ckpt").is_file():
        info = json.loads(stamp.read_text())
    else:
        shutil.rmtree(root / "data", ignore_errors=True)
        shutil.rmtree(out, ignore_errors=True)
        write_dataset(data, n=8, height=128, width=128, seed=0)
        start = time.perf_counter()
        train(config, PairDataset.from_directory(data, cache=True), PairDataset.from_directory(data, cache=True))
        info = {"config": wanted, "train_seconds": time.perf_counter() - start}
        stamp.write_text(json.dumps(info, indent=2))
    return {"data": data, "out": out, "seconds": info["train_seconds"],
            "dataset": PairDataset.from_directory(data)}


def test_criterion_5_overfit(overfit_run):
    rows = read_loss_log(overfit_run["out"] / "loss_log.txt")
    by_step = {r["step"]: r for r in rows}
    f10, f500 = by_step[10]["fidelity"], by_step[500]["fidelity"]
    reduction = 1 - f500 / f10
    val = [line.split(",") for line in (overfit_run["out"] / "validation.csv").read_text().split("\n")[1:] if line]
    psnrs = [float(v[4]) for v in val]
    seconds = overfit_run["seconds"]
    ok = reduction >= 0.5 and max(psnrs) > 30 and seconds < 2 * 3600
    record(5, ok, f"fidelity step 10 = {f10:.4f}, step 500 = {f500:.4f}, reduction {reduction:.1%} (>= 50%); "
                  f"validation PSNR best {max(psnrs):.2f} dB / final {psnrs[-1]:.2f} dB (> 30); "
                  f"train time {seconds / 60:.1f} min (< 120)")
    assert ok


def test_criterion_6_ate(overfit_run):
    hand, _ = ate_from_qualities([30.0, 40.0, 25.5], [28.0, 36.0, 25.0])
    model = load_model(overfit_run["out"] / "best.ckpt")[0]
    ds = overfit_run["dataset"]
    zero = [estimate_ate(model, ds, 0, m).ate for m in ("PSNR", "CC")]
    report = run_ate_suite(model, ds, seeds=(0, 1, 2), metrics=("PSNR",))
    ate = {r.intervention: r.ate for r in report.rows}
    ordering = ate["ir_dropout"] > ate["random"] and ate["vi_dropout"] > ate["random"]
    ok = hand == 6.5 / 3 and zero == [0.0, 0.0] and ordering
    record(6, ok, f"t=0 ATE {zero} (exactly 0); hand mean {hand!r} == {6.5 / 3!r}; PSNR ATE "
                  + ", ".join(f"{k}={v:.3f}" for k, v in ate.items())
                  + " (both dropouts > random required; complementary vs random informational)")
    assert ok


def test_criterion_8_zero_shot(overfit_run):
    model = load_model(overfit_run["out"] / "best.ckpt")[0]
    structural, functional = make_gray_pair(11, 96, 80)
    luma = rgb_to_luma_chroma(structural).luma
    fused = model.fuse(torch.from_numpy(functional)[None], torch.from_numpy(luma)[None])[0].numpy()
    ok = fused.shape == (1, 96, 80) and bool(np.isfinite(fused).all()) and fused.min() >= 0 and fused.max() <= 1
    record(8, ok, f"fused {fused.shape} grayscale pair of unseen content, range [{fused.min():.3f}, "
                  f"{fused.max():.3f}] within [0, 1]")
    assert ok


# -- 7 ---------------------------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, n=4, height=64, width=64, seed=1)
    cfg = dict(epochs=2, steps_per_epoch=3, batch_size=4, patch=32, channels=(8, 16, 16), pool_r=4,
               block_size=8, seed=5, deterministic=True, out=str(tmp_path / "run"))
    names = ["loss_log.txt", "epoch_001.ckpt", "epoch_002.ckpt", "best.ckpt"]
    snaps = []
    for _ in range(2):
        train(TrainConfig(**cfg), PairDataset.from_directory(data), PairDataset.from_directory(data))
        snaps.append({n: (tmp_path / "run" / n).read_bytes() for n in names})
    same = [n for n in names if snaps[0][n] == snaps[1][n]]
    ok = len(same) == len(names)
    record(7, ok, f"two sequential runs: bit-identical {len(same)}/{len(names)} artifacts ({', '.join(same)})")
    assert ok
