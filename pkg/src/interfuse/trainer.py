"""Training loop, validation and checkpointed train state.

Each step draws its own generator from ``(seed, worker, epoch, step)``, so a
run is a pure function of its config and resuming from a checkpoint needs
only the step counter.  Batches may be split into micro-batches with
gradient accumulation; every loss term is a per-image mean, so the
accumulated gradient equals the full-batch gradient up to rounding.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model, save_model
from .config import config_to_dict, format_config
from .data import PairDataset, derive_seed, sample_patch
from .errors import ConfigError, DataError, NumericalError
from .interventions import InterventionConfig, make_intervention_set
from .losses import LossWeights, NEC_MODES, total_loss
from .metrics import METRIC_NAMES, MetricReport, evaluate_dataset
from .model import FusionNet, ModelConfig, forward_with_interventions
from .plotting import plot_loss_curve

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = "step fidelity inv nec reg total"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# auto micro-batching keeps each forward (x5 intervention passes) within this many input pixels per pass
MICRO_PIXEL_BUDGET = 256 * 256


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    patch: int = 256
    alpha: float = 0.1
    beta: float = 0.05
    lambda1: float = 1.0
    eta: float = 0.3
    block_size: int = 16
    mask_count_range: tuple[int, ...] = (1, 6)
    pool_r: int = 8
    attention_heads: int = 1
    channels: tuple[int, ...] = (32, 64, 128)
    nec_mode: str = "as_written"
    margin: float = 0.1
    flip_prob: float = 0.5
    grad_clip: float = 10.0
    steps_per_epoch: int = 0  # 0: ceil(len(train_set) / batch_size)
    micro_batch: int = 0  # 0: auto, see TrainConfig.micro_batch_size
    seed: int = 0
    deterministic: bool = True
    data: str = ""
    val: str = ""
    out: str = "runs/train"

    def __post_init__(self):
        self.mask_count_range = tuple(self.mask_count_range)
        self.channels = tuple(self.channels)
        if self.nec_mode not in NEC_MODES:
            raise ConfigError(f"unknown nec_mode {self.nec_mode!r}; expected one of {NEC_MODES}")
        if len(self.mask_count_range) != 2:
            raise ConfigError(f"mask_count_range needs two values, got {self.mask_count_range}")
        for name in ("epochs", "batch_size", "patch", "block_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        mb = self.micro_batch_size
        if self.batch_size % mb:
            raise ConfigError(f"micro_batch {mb} must divide batch_size {self.batch_size}")
        if self.patch % 4:
            raise ConfigError(f"patch {self.patch} must be a multiple of 4")
        smallest = self.patch // 4
        if self.pool_r > smallest:
            raise ConfigError(f"pool_r={self.pool_r} exceeds the coarsest feature map ({smallest}px)")

    @property
    def micro_batch_size(self) -> int:
        if self.micro_batch:
            return self.micro_batch
        fit = max(1, MICRO_PIXEL_BUDGET // (self.patch * self.patch))
        return max(d for d in range(1, self.batch_size + 1) if self.batch_size % d == 0 and d <= fit)

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, pool_r=self.pool_r,
                           attention_heads=self.attention_heads)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.lambda1, self.eta, self.nec_mode, self.margin)

    def intervention_config(self) -> InterventionConfig:
        return InterventionConfig(block_size=self.block_size,
                                  count_range=tuple(self.mask_count_range))


@dataclass
class TrainState:
    model: FusionNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    best_psnr: float = -math.inf
    history: list = field(default_factory=list)


def make_optimizer(model: FusionNet, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _optimizer_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            s = state.optimizer.state.get(p)
            if not s:
                continue
            name = names[id(p)]
            arrays[f"optim/{name}/exp_avg"] = s["exp_avg"].detach().numpy()
            arrays[f"optim/{name}/exp_avg_sq"] = s["exp_avg_sq"].detach().numpy()
            arrays[f"optim/{name}/step"] = np.array(float(s["step"]), dtype=np.float64)
    return arrays


def save_train_state(path, state: TrainState, config: TrainConfig, val_report: MetricReport | None = None):
    meta = {
        "kind": "train_state",
        "train_config": config_to_dict(config),
        "step": state.step,
        "epoch": state.epoch,
        "best_psnr": state.best_psnr if math.isfinite(state.best_psnr) else None,
        "validation_mean": val_report.mean if val_report is not None else None,
    }
    return save_model(path, state.model, meta, extra_arrays=_optimizer_arrays(state))


def load_train_state(path, config: TrainConfig) -> TrainState:
    model, meta, arrays = load_model(path)
    model.train()
    optimizer = make_optimizer(model, config.learning_rate)
    for name, p in model.named_parameters():
        key = f"optim/{name}/exp_avg"
        if key in arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"optim/{name}/step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()),
            }
    best = meta.get("best_psnr")
    return TrainState(model=model, optimizer=optimizer, step=int(meta["step"]),
                      epoch=int(meta["epoch"]), best_psnr=-math.inf if best is None else best)


def sample_batch(config: TrainConfig, train_set, step: int, epoch: int, worker: int = 0):
    """Patches and intervention sets for one step, from a step-derived generator."""
    rng = np.random.default_rng(derive_seed(config.seed, worker, epoch, step))
    idx = rng.integers(0, len(train_set), size=config.batch_size)
    patches = [sample_patch(train_set[int(i)], config.patch, rng, config.flip_prob) for i in idx]
    icfg = config.intervention_config()
    sets = [make_intervention_set(config.patch, config.patch, icfg, rng) for _ in patches]
    ir = torch.from_numpy(np.stack([p.infrared for p in patches]))
    vi = torch.from_numpy(np.stack([p.visible_luma for p in patches]))
    return ir, vi, sets


def train_step(state: TrainState, config: TrainConfig, ir, vi, sets) -> dict[str, float]:
    """One optimizer step with micro-batch accumulation; returns the loss breakdown."""
    model, opt = state.model, state.optimizer
    weights = config.loss_weights()
    model.train()
    opt.zero_grad(set_to_none=True)
    b = ir.shape[0]
    mb = min(config.micro_batch_size, b)
    totals = {k: 0.0 for k in ("fidelity", "inv", "nec", "reg", "total")}
    for start in range(0, b, mb):
        sl = slice(start, start + mb)
        bundle = forward_with_interventions(model, ir[sl], vi[sl], sets[sl])
        breakdown = total_loss(bundle, vi[sl], ir[sl], weights)
        parts = breakdown.as_floats()
        if not all(math.isfinite(v) for v in parts.values()):
            raise NumericalError(f"non-finite loss at step {state.step + 1}: {parts}", parts)
        (breakdown.total * (ir[sl].shape[0] / b)).backward()
        for k, v in parts.items():
            totals[k] += v * ir[sl].shape[0] / b
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    if float(norm) > config.grad_clip:
        logger.info("step %d: gradient norm %.4g clipped to %.4g", state.step + 1, float(norm),
                    config.grad_clip)
    opt.step()
    state.step += 1
    return totals


def validate(model_or_checkpoint, val_set, checkpoint_id: str | None = None) -> MetricReport:
    if isinstance(model_or_checkpoint, (str, Path)):
        checkpoint_id = checkpoint_id or Path(model_or_checkpoint).name
        model = load_model(model_or_checkpoint)[0]
    else:
        model = model_or_checkpoint
    return evaluate_dataset(val_set, model=model, checkpoint_id=checkpoint_id)


def _format_loss_line(step: int, parts: dict[str, float]) -> str:
    return " ".join([str(step)] + [repr(parts[k]) for k in ("fidelity", "inv", "nec", "reg", "total")])


def read_loss_log(path) -> list[dict[str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        fields = line.split()
        rows.append({"step": int(fields[0]), **dict(zip(
            ("fidelity", "inv", "nec", "reg", "total"), map(float, fields[1:])))})
    return rows


def train(config: TrainConfig, train_set: PairDataset, val_set: PairDataset,
          resume=None, max_steps: int | None = None) -> Path:
    """Train per ``config``; returns the best-validation-PSNR checkpoint path.

    Writes to ``config.out``: ``train_config.txt``, ``loss_log.txt``,
    ``validation.csv``, ``epoch_NNN.ckpt``, ``best.ckpt`` and ``loss_curve.png``.
    ``max_steps`` stops early (mid-epoch) without saving; meant for tests.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if len(val_set) == 0:
        raise DataError("validation set is empty")
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(format_config(config), encoding="utf-8")

    if resume is not None:
        state = load_train_state(resume, config)
    else:
        model = FusionNet(config.model_config(), seed=config.seed)
        state = TrainState(model=model, optimizer=make_optimizer(model, config.learning_rate))
    steps_per_epoch = config.steps_per_epoch or math.ceil(len(train_set) / config.batch_size)

    log_path, val_path = out / "loss_log.txt", out / "validation.csv"
    if resume is None or not log_path.exists():
        log_path.write_text(LOSS_LOG_HEADER + "\n")
        with open(val_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(("epoch", "step") + METRIC_NAMES)
    best_path = out / "best.ckpt"

    with open(log_path, "a") as log:
        while state.epoch < config.epochs:
            epoch_start = state.epoch * steps_per_epoch
            while state.step < epoch_start + steps_per_epoch:
                if max_steps is not None and state.step >= max_steps:
                    return best_path
                ir, vi, sets = sample_batch(config, train_set, state.step, state.epoch)
                parts = train_step(state, config, ir, vi, sets)
                log.write(_format_loss_line(state.step, parts) + "\n")
                log.flush()
            state.epoch += 1
            report = validate(state.model, val_set, checkpoint_id=f"epoch_{state.epoch:03d}")
            mean = report.mean
            with open(val_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [state.epoch, state.step] + [repr(mean[k]) for k in METRIC_NAMES])
            logger.info("epoch %d step %d validation %s", state.epoch, state.step,
                        {k: round(v, 4) for k, v in mean.items()})
            improved = mean["PSNR"] > state.best_psnr
            if improved:
                state.best_psnr = mean["PSNR"]
            epoch_path = save_train_state(out / f"epoch_{state.epoch:03d}.ckpt", state, config, report)
            if improved:
                best_path.write_bytes(epoch_path.read_bytes())

    plot_loss_curve(log_path, out / "loss_curve.png")
    return best_path
