"""Training loop, evaluation and k-sweep harness.

Modes
-----
ncct
    after warm-up: CE on confident samples (pcc, weak view) plus top-k masked
    consistency of the ncc head on non-confident samples.
baseline_ce
    CE on every sample for the whole run.
pc_only
    CE on confident samples; non-confident samples are dropped.
single_head_consistency
    like ncct but without the ncc head: the consistency term uses pcc and
    keeps each row's k least probable classes.

All modes run identical warm-up epochs (CE on every sample).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as M
from .augment import augment_batch
from .dataset import Dataset, inject_asymmetric_noise, inject_symmetric_noise
from .losses import LossReport, leastk_mask, topk_mask
from .selection import BatchPartition, select_confident

log = logging.getLogger(__name__)

MODES = ("ncct", "baseline_ce", "pc_only", "single_head_consistency")
OPTIMIZERS = ("adam", "sgd")
_SHUFFLE_TAG = 0x5348


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        msg = f"training diverged at epoch {epoch}, batch {batch}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 40
    warmup_epochs: int = 5
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    k: int = 4
    mode: str = "ncct"
    seed: int = 0
    conv1_channels: int = 16
    conv2_channels: int = 32
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self, num_classes: int | None = None) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0 or not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError(
                f"need 0 <= warmup_epochs <= epochs, got warmup={self.warmup_epochs}, epochs={self.epochs}"
            )
        if self.k < 1 or (num_classes is not None and self.k > num_classes):
            raise ValueError(f"k must satisfy 1 <= k <= C, got k={self.k}, C={num_classes}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr_backbone < 0 or self.lr_heads < 0:
            raise ValueError("learning rates must be non-negative")

    @classmethod
    def reference_preset(cls, **overrides) -> "TrainConfig":
        """Full-scale schedule: batch 128, Adam, lr 1e-4 backbone / 1e-3 heads, 40 epochs."""
        base = dict(batch_size=128, epochs=40, lr_backbone=1e-4, lr_heads=1e-3, optimizer="adam", k=4)
        base.update(overrides)
        return cls(**base)

    def arch(self, num_classes: int) -> M.ArchConfig:
        return M.ArchConfig(
            num_classes=num_classes,
            conv1_channels=self.conv1_channels,
            conv2_channels=self.conv2_channels,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"int": int, "float": float, "str": str}
        return {f.name: hints[f.type] for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = cls.field_types()
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**{k: types[k](v) for k, v in values.items()})


# --------------------------------------------------------------------------
# optimisers


def param_group(name: str) -> str:
    return "backbone" if name in M.BACKBONE_KEYS else "heads"


class Adam:
    def __init__(self, params: M.Params, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs, self.beta1, self.beta2, self.eps = lrs, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: M.Params, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = self.lrs[param_group(name)]
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params: M.Params, lrs: dict[str, float], momentum=0.9):
        self.lrs, self.momentum = lrs, momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: M.Params, grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            b = self.buf[name]
            b *= self.momentum
            b += grads[name]
            p -= (self.lrs[param_group(name)] * b).astype(p.dtype)


def make_optimizer(config: TrainConfig, params: M.Params):
    lrs = {"backbone": config.lr_backbone, "heads": config.lr_heads}
    if config.optimizer == "adam":
        return Adam(params, lrs, config.beta1, config.beta2, config.eps)
    return SGD(params, lrs, config.momentum)


# --------------------------------------------------------------------------
# results


@dataclass
class Metrics:
    accuracy: float
    confusion_matrix: np.ndarray  # rows: true class, cols: predicted


@dataclass
class EpochStats:
    epoch: int
    test_acc: float
    L_s: float
    L_c: float
    confident_frac: float
    seconds: float
    class_confident_frac: list[float]
    warmup: bool


@dataclass
class TrainResult:
    config: TrainConfig
    epochs: list[EpochStats]
    confusion_matrix: np.ndarray
    params: M.Params
    step_losses: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [e.test_acc for e in self.epochs]

    @property
    def max_accuracy(self) -> float:
        return max(self.accuracies) if self.epochs else float("nan")

    @property
    def last5_mean(self) -> float:
        tail = self.accuracies[-5:]
        return float(np.mean(tail)) if tail else float("nan")


def evaluate(params: M.Params, test_set: Dataset, batch_size: int = 256) -> Metrics:
    """Argmax of pcc on un-augmented images against the true labels."""
    c = params["pcc.w"].shape[1]
    if test_set.num_classes != c:
        raise ValueError(f"model has {c} classes, dataset has {test_set.num_classes}")
    probs = M.predict(params, test_set.images(params["conv1.w"].dtype), batch_size)
    pred = np.argmax(probs, axis=1) if len(probs) else np.zeros(0, dtype=np.int64)
    cm = confusion_matrix(test_set.true_labels, pred, c)
    total = cm.sum()
    return Metrics(float(np.trace(cm) / total) if total else float("nan"), cm)


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


# --------------------------------------------------------------------------
# training


def _shuffle(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, _SHUFFLE_TAG])).permutation(n)


def _loss_terms(mode: str) -> M.LossTerms:
    if mode == "baseline_ce":
        return M.LossTerms(supervised=True, consistency=False)
    if mode == "pc_only":
        return M.LossTerms(supervised=True, consistency=False)
    if mode == "single_head_consistency":
        return M.LossTerms(supervised=True, consistency=True, consistency_head="pcc")
    return M.LossTerms(supervised=True, consistency=True, consistency_head="ncc")


def train_step(
    params: M.Params,
    weak: np.ndarray,
    strong: np.ndarray | None,
    labels: np.ndarray,
    mode: str,
    k: int,
    warmup: bool,
) -> tuple[M.GradientReport, BatchPartition]:
    """Selection plus loss/gradient for one mini-batch (no parameter update)."""
    n = len(labels)
    if warmup or mode == "baseline_ce":
        bundle = M.forward(params, weak)
        part = BatchPartition.everything_confident(n)
        rep = M.backward(params, M.Batch(weak, labels), part, None, M.LossTerms(True, False), bundle)
        return rep, part
    terms = _loss_terms(mode)
    bundle = M.forward(params, weak, strong if terms.consistency else None)
    _, part = select_confident(bundle.p_w_p, labels)
    mask = None
    if terms.consistency:
        if terms.consistency_head == "ncc":
            mask = topk_mask(bundle.p_w_n, k)
        else:
            mask = leastk_mask(bundle.p_w_p, k)
    rep = M.backward(params, M.Batch(weak, labels, strong), part, mask, terms, bundle)
    return rep, part


def train(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    *,
    init: M.Params | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Run the configured mode for ``config.epochs`` epochs.

    Epochs 1..warmup_epochs train CE on every sample; later epochs apply the
    mode's selection and losses. Test accuracy is recorded after each epoch.
    """
    if (train_set.num_classes, train_set.height, train_set.width) != (
        test_set.num_classes, test_set.height, test_set.width,
    ):
        raise ValueError("train and test sets must share (C, H, W)")
    c = train_set.num_classes
    config.validate(c)
    dtype = np.dtype(config.dtype)
    params = M.cast_params(init, dtype) if init is not None else M.init_params(config.arch(c), config.seed, dtype)
    opt = make_optimizer(config, params)
    images = train_set.images(dtype)
    labels_all = train_set.train_labels
    ids_all = train_set.ids
    n = len(train_set)
    needs_strong = config.mode in ("ncct", "single_head_consistency")

    history: list[EpochStats] = []
    step_losses: list[float] = []
    checkpoints: list[str] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        warmup = epoch <= config.warmup_epochs
        order = _shuffle(config.seed, epoch, n)
        sum_s = sum_c = 0.0
        batches = 0
        conf_count = np.zeros(c, dtype=np.int64)
        seen_count = np.zeros(c, dtype=np.int64)
        for b, start in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[start : start + config.batch_size]
            labels = labels_all[idx]
            weak, strong = augment_batch(
                images[idx], ids_all[idx], config.seed, epoch, strong=needs_strong and not warmup
            )
            try:
                rep, part = train_step(params, weak, strong, labels, config.mode, config.k, warmup)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            loss = rep.loss
            if not math.isfinite(loss.L_overall):
                raise TrainingDiverged(epoch, b, f"loss {loss.L_overall}")
            opt.step(params, rep.grads)
            step_losses.append(loss.L_overall)
            sum_s += loss.L_s
            sum_c += loss.L_c
            batches += 1
            np.add.at(conf_count, labels[part.confident], 1)
            np.add.at(seen_count, labels, 1)
        metrics = evaluate(params, test_set)
        with np.errstate(invalid="ignore", divide="ignore"):
            class_frac = np.where(seen_count > 0, conf_count / np.maximum(seen_count, 1), np.nan)
        stats = EpochStats(
            epoch=epoch,
            test_acc=metrics.accuracy,
            L_s=sum_s / max(batches, 1),
            L_c=sum_c / max(batches, 1),
            confident_frac=float(conf_count.sum() / max(seen_count.sum(), 1)),
            seconds=time.perf_counter() - t0,
            class_confident_frac=[float(x) for x in class_frac],
            warmup=warmup,
        )
        history.append(stats)
        log.info(
            "epoch %d acc %.4f L_s %.4f L_c %.4f conf %.3f (%.1fs)",
            epoch, stats.test_acc, stats.L_s, stats.L_c, stats.confident_frac, stats.seconds,
        )
        if on_epoch is not None:
            on_epoch(stats)
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"epoch{epoch:03d}.ncpt"
            M.save_checkpoint(params, path)
            checkpoints.append(str(path))

    final = evaluate(params, test_set)
    return TrainResult(config, history, final.confusion_matrix, params, step_losses, checkpoints)


def run_mode_single_head(config: TrainConfig, train_set: Dataset, test_set: Dataset, **kwargs) -> TrainResult:
    """Single-classifier ablation: least-k consistency on the pcc head."""
    if config.mode != "single_head_consistency":
        raise ValueError(f"run_mode_single_head needs mode='single_head_consistency', got {config.mode!r}")
    return train(config, train_set, test_set, **kwargs)


# --------------------------------------------------------------------------
# CSV artifacts

METRICS_COLUMNS = ("epoch", "test_acc", "L_s", "L_c", "confident_frac", "seconds")
SWEEP_COLUMNS = ("mode", "noise_kind", "noise_rate", "k", "seed", "max_acc", "last5_mean", "ncct_gap")


def _fmt(x) -> str:
    # repr round-trips a 64-bit float exactly
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def metrics_csv(result: TrainResult, timing: bool = False) -> str:
    """Per-epoch CSV; ``seconds`` is ``nan`` unless ``timing`` is set."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for e in result.epochs:
        w.writerow([e.epoch, _fmt(e.test_acc), _fmt(e.L_s), _fmt(e.L_c), _fmt(e.confident_frac),
                    _fmt(e.seconds if timing else float("nan"))])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()})
    return out


@dataclass
class SweepRow:
    mode: str
    noise_kind: str
    noise_rate: float
    k: int
    seed: int
    max_acc: float
    last5_mean: float
    ncct_gap: float = float("nan")

    def as_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in SWEEP_COLUMNS]

    def __eq__(self, other):
        if not isinstance(other, SweepRow):
            return NotImplemented
        return [_fmt(getattr(self, c)) for c in SWEEP_COLUMNS] == [_fmt(getattr(other, c)) for c in SWEEP_COLUMNS]


def fill_ncct_gaps(rows: list[SweepRow]) -> list[SweepRow]:
    """Set ``ncct_gap`` = last5_mean of the ncct run at the same noise, seed
    and k minus this row's last5_mean (nan when there is no such ncct run)."""
    ref = {(r.noise_kind, r.noise_rate, r.seed, r.k): r.last5_mean for r in rows if r.mode == "ncct"}
    return [replace(r, ncct_gap=ref.get((r.noise_kind, r.noise_rate, r.seed, r.k), float("nan")) - r.last5_mean)
            for r in rows]


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(r.as_row())
    return buf.getvalue()


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as f:
        return [
            SweepRow(r["mode"], r["noise_kind"], float(r["noise_rate"]), int(r["k"]), int(r["seed"]),
                     float(r["max_acc"]), float(r["last5_mean"]), float(r.get("ncct_gap", "nan")))
            for r in csv.DictReader(f)
        ]


# --------------------------------------------------------------------------
# sweeps


def make_noisy(train_set: Dataset, kind: str, rate: float, seed: int, pairs=None) -> Dataset:
    if kind == "sym":
        return inject_symmetric_noise(train_set, rate, seed)
    if kind == "asym":
        return inject_asymmetric_noise(train_set, rate, pairs, seed)
    if kind == "none":
        return train_set
    raise ValueError(f"noise kind must be 'sym', 'asym' or 'none', got {kind!r}")


def _sweep_job(job):
    config, train_set, test_set, kind, rate = job
    result = train(config, train_set, test_set)
    return SweepRow(config.mode, kind, rate, config.k, config.seed, result.max_accuracy, result.last5_mean)


def worker_count() -> int:
    try:
        cap = int(os.environ.get("NCCT_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, cap)


K_MODES = ("ncct", "single_head_consistency")


def sweep_k(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    k_values: Sequence[int],
    noise_rates: Sequence[float] | None = None,
    noise_kind: str = "sym",
    pairs=None,
    noise_seed: int | None = None,
    workers: int | None = None,
    modes: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
) -> list[SweepRow]:
    """One training run per (mode, seed, noise rate, k).

    Modes without a k (baseline_ce, pc_only) run once per noise rate at
    ``config.k``. With ``noise_rates=None`` the given train set is used as is
    and its realised noise rate is reported; otherwise noise is injected into
    ``train_set`` (assumed clean) once per (seed, rate), using the run seed
    unless ``noise_seed`` is given. Rows carry the gap to the matching ncct run.
    """
    for k in k_values:
        if not (1 <= k <= train_set.num_classes):
            raise ValueError(f"k values must lie in [1, {train_set.num_classes}], got {k}")
    modes = [config.mode] if modes is None else list(modes)
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    seeds = [config.seed] if seeds is None else list(seeds)
    jobs = []
    for seed in seeds:
        if noise_rates is None:
            rate = train_set.noise_rate()
            sets = [("none" if rate == 0 else noise_kind, rate, train_set)]
        else:
            nseed = seed if noise_seed is None else noise_seed
            sets = [(noise_kind, r, make_noisy(train_set, noise_kind, r, nseed, pairs)) for r in noise_rates]
        for mode in modes:
            ks = list(k_values) if mode in K_MODES else [config.k]
            for kind, rate, ds in sets:
                for k in ks:
                    jobs.append((replace(config, k=k, mode=mode, seed=seed), ds, test_set, kind, rate))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    return fill_ncct_gaps(rows)
