"""Training loop for every supervision mode.

Modes:

* ``full``        cross-entropy on every pixel
* ``partial_ce``  cross-entropy on the weakly labeled pixels only
* ``penalty``     partial cross-entropy plus the size penalty
* ``lagrangian``  cross-entropy against constrained proposals
* ``hybrid``      full cross-entropy on ``n_full`` images, penalty loss with
  common bounds on the rest

Per-image losses are averaged over the batch, except with ``volume3d``
bounds, where each batch is one volume and the losses are summed.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import lagrangian as lag
from . import losses, segnet
from .bounds import BoundScheme, bounds_for, group_bounds
from .data import Dataset, Sample, binarize, dice
from .losses import Bounds
from .optim import Adam, PlateauSchedule

MODES = ("full", "partial_ce", "penalty", "lagrangian", "hybrid")
CSV_HEADER = ("epoch", "loss_ce", "loss_penalty", "val_dice", "violation_rate", "ms_per_batch", "lr")


class ConfigError(ValueError):
    """Malformed training configuration; the message starts with the offending key path."""


@dataclass(frozen=True)
class LagrangianConfig:
    step: float = lag.DEFAULT_STEP
    max_iters: int = lag.DEFAULT_MAX_ITERS
    early_stop: bool = True
    window: int = lag.DEFAULT_WINDOW
    tol: float = lag.DEFAULT_TOL
    workers: int = 1

    def dual(self) -> lag.DualState:
        return lag.DualState(
            step=self.step, max_iters=self.max_iters, early_stop=self.early_stop, window=self.window, tol=self.tol
        )


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "penalty"
    bounds: BoundScheme = field(default_factory=BoundScheme)
    weight: float = losses.DEFAULT_WEIGHT
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 20
    decay: float = 2.0
    min_delta: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    n_full: int = 0
    # train on a seeded subset of this many training images (None: all)
    train_subset: int | None = None
    seed: int = 0
    network: segnet.NetworkConfig = field(default_factory=segnet.NetworkConfig)
    lagrangian: LagrangianConfig = field(default_factory=LagrangianConfig)

    def validate(self, n_train: int | None = None) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.mode == "lagrangian" and self.bounds.kind == "volume3d":
            raise ConfigError("bounds.kind: the lagrangian mode has no volume3d variant")
        if self.mode == "hybrid":
            if self.bounds.kind != "common":
                raise ConfigError("bounds.kind: hybrid training uses common bounds")
            if self.n_full <= 0 or (n_train is not None and self.n_full >= n_train):
                raise ConfigError(f"n_full: need 0 < n_full < {n_train}, got {self.n_full}")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.weight < 0:
            raise ConfigError("weight: must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.train_subset is not None and not (0 < self.train_subset <= (n_train or self.train_subset)):
            raise ConfigError(f"train_subset: need 0 < train_subset <= {n_train}")
        self.network.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return _build(cls, raw, "")

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


_NESTED = {"bounds": BoundScheme, "network": segnet.NetworkConfig, "lagrangian": LagrangianConfig}
_OPTIONAL_FLOAT = {"lower", "upper"}
_OPTIONAL_INT = {"train_subset"}


def _check_type(value: Any, default: Any, key: str, path: str) -> Any:
    if key in _OPTIONAL_FLOAT or key in _OPTIONAL_INT:
        if value is None:
            return None
        kind = float if key in _OPTIONAL_FLOAT else int
    else:
        kind = type(default)
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{path}: expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"{path}: unknown key")
        if key in _NESTED and cls is TrainConfig:
            kwargs[key] = _build(_NESTED[key], value, path)
        else:
            kwargs[key] = _check_type(value, getattr(defaults, key), key, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{prefix or '<root>'}: {exc}") from None


@dataclass
class MetricsRecord:
    epoch: int
    loss_ce: float
    loss_penalty: float
    val_dice: float
    violation_rate: float
    ms_per_batch: float
    lr: float
    val_dice_3d: float = float("nan")

    def row(self) -> list:
        return [getattr(self, k) for k in CSV_HEADER]


@dataclass
class TrainResult:
    params: segnet.Parameters
    records: list[MetricsRecord]
    best_params: segnet.Parameters
    best_epoch: int
    best_dice: float

    def __iter__(self):
        return iter((self.params, self.records))


@dataclass
class Evaluation:
    mean_dice: float
    per_sample: list[float]
    mean_dice_3d: float
    per_group: dict[int, float]
    predicted_sizes: list[float]


# ---------------------------------------------------------------------------
# evaluation


def predict(params: segnet.Parameters, dataset: Dataset, samples: Sequence[Sample], batch: int = 16) -> np.ndarray:
    """Foreground probabilities ``[N, H, W]`` for ``samples``."""
    out = []
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        pred = segnet.forward_batch(params, dataset.normalized(chunk))
        out.append(pred.foreground.copy())
    return np.concatenate(out) if out else np.zeros((0, dataset.height, dataset.width))


def score(fg: np.ndarray, samples: Sequence[Sample]) -> Evaluation:
    """Dice of thresholded foreground maps ``fg`` ``[N, H, W]`` against the samples' masks."""
    if not len(samples):
        raise ValueError("score: no samples")
    masks = binarize(fg)
    per_sample = [dice(m, s.mask) for m, s in zip(masks, samples)]
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.group, []).append(i)
    per_group = {
        g: dice(masks[idx], np.stack([samples[i].mask for i in idx])) for g, idx in groups.items()
    }
    return Evaluation(
        float(np.mean(per_sample)),
        per_sample,
        float(np.mean(list(per_group.values()))),
        per_group,
        [float(v) for v in np.asarray(fg).sum(axis=(1, 2))],
    )


def evaluate(params: segnet.Parameters, dataset: Dataset, split: str | Sequence[Sample] = "val") -> Evaluation:
    """Mean per-slice Dice on a split, plus per-volume Dice on stacked slices."""
    samples = dataset.split(split) if isinstance(split, str) else list(split)
    if not samples:
        raise ValueError(f"evaluate: split {split!r} is empty")
    return score(predict(params, dataset, samples), samples)


# ---------------------------------------------------------------------------
# training


def weak_codes(sample: Sample) -> np.ndarray:
    if sample.weak is None:
        raise ValueError(f"sample {sample.id} has no weak mask; run the weaken step first")
    return np.where(sample.weak > 0, losses.LABELED_FG, losses.UNLABELED)


def full_codes(sample: Sample) -> np.ndarray:
    return np.where(sample.mask > 0, losses.LABELED_FG, losses.LABELED_BG)


def select_subset(n: int, k: int, seed: int) -> np.ndarray:
    """Sorted indices of ``k`` of ``n`` training images, fixed by ``seed``."""
    rng = np.random.default_rng([seed, 7919])
    return np.sort(rng.permutation(n)[:k])


@dataclass
class StepStats:
    loss_ce: float
    loss_penalty: float
    violations: int
    count: int
    dual_iterations: int = 0


class Session:
    """Parameters, optimizer and per-sample supervision for one training run."""

    def __init__(self, config: TrainConfig, dataset: Dataset):
        train = dataset.train
        config.validate(len(train))
        if (config.network.height, config.network.width) != (dataset.height, dataset.width):
            config = replace(config, network=replace(config.network, height=dataset.height, width=dataset.width))
        self.config = config
        self.dataset = dataset
        if config.train_subset is not None:
            train = [train[i] for i in select_subset(len(train), config.train_subset, config.seed)]
        self.samples = train
        self.images = dataset.normalized(train)
        self.params = segnet.init(config.network, config.seed)
        self.optimizer = Adam(self.params, config.lr, config.beta1, config.beta2, config.eps)
        self.rng = np.random.default_rng(config.seed)
        self.domain = dataset.domain_size
        self._prepare()

    def _prepare(self) -> None:
        cfg, train = self.config, self.samples
        n = len(train)
        mode = cfg.mode
        self.volume = mode == "penalty" and cfg.bounds.kind == "volume3d"
        self.full_mask = np.zeros(n, dtype=bool)
        if mode == "hybrid":
            self.full_mask[select_subset(n, cfg.n_full, cfg.seed)] = True
        if mode == "full":
            self.codes = np.stack([full_codes(s) for s in train])
        else:
            self.codes = np.stack(
                [full_codes(s) if self.full_mask[i] else weak_codes(s) for i, s in enumerate(train)]
            )
        self.weak_fg = self.codes == losses.LABELED_FG
        if self.volume:
            gb = group_bounds(cfg.bounds, train)
            self.groups = {}
            for i, s in enumerate(train):
                self.groups.setdefault(s.group, []).append(i)
            self.group_bounds = gb
            self.bounds = None
        else:
            ref = self.dataset.train
            self.bounds = bounds_for(cfg.bounds, train, self.domain, reference=ref)
            everything = Bounds(0.0, float(self.domain))
            self.bounds = [everything if self.full_mask[i] else b for i, b in enumerate(self.bounds)]

    def batches(self) -> list[np.ndarray]:
        """Shuffled batches for one epoch (whole volumes for ``volume3d``)."""
        if self.volume:
            order = self.rng.permutation(sorted(self.groups))
            return [np.asarray(self.groups[int(g)]) for g in order]
        perm = self.rng.permutation(len(self.samples))
        bs = self.config.batch_size
        return [perm[i : i + bs] for i in range(0, len(perm), bs)]

    def step(self, idx: np.ndarray) -> StepStats:
        """Forward, loss, backward and one optimizer update on ``idx``."""
        cfg = self.config
        pred = segnet.forward_batch(self.params, self.images[idx])
        codes = self.codes[idx]
        n = len(idx)
        dual_iters = 0
        if self.volume:
            bounds = self.group_bounds[self.samples[idx[0]].group]
            ce = ad.sum_all(losses.partial_cross_entropy(pred, codes))
            volume = ad.sum_all(losses.predicted_size(pred))
            pen = ad.scalar_mul(losses.size_penalty(volume, bounds), cfg.weight)
            loss = ad.add(ce, pen)
            ce_value, pen_value = ce.item(), pen.item()
            violations, count = int(not bounds.contains(volume.item())), 1
        else:
            bounds = [self.bounds[i] for i in idx]
            sizes = pred.foreground.sum(axis=(1, 2))
            violations = sum(int(not b.contains(v)) for b, v in zip(bounds, sizes))
            count = n
            if cfg.mode == "lagrangian":
                fg = pred.foreground
                logp = pred.log().data
                q, states = lag.synthesize_batch(
                    fg, bounds, cfg.lagrangian.dual(), self.weak_fg[idx],
                    logp[:, 1], logp[:, 0], workers=cfg.lagrangian.workers,
                )
                dual_iters = sum(s.iterations for s in states)
                loss = lag.proposal_loss(pred, q)
                ce_value, pen_value = loss.item(), 0.0
            else:
                ce = losses.partial_cross_entropy(pred, codes)
                ce_mean = ad.scalar_mul(ad.sum_all(ce), 1.0 / n)
                if cfg.mode in ("penalty", "hybrid") and cfg.weight > 0:
                    pen = losses.size_penalty(losses.predicted_size(pred), bounds)
                    pen_mean = ad.scalar_mul(ad.sum_all(pen), cfg.weight / n)
                    loss = ad.add(ce_mean, pen_mean)
                    pen_value = pen_mean.item()
                else:
                    loss = ce_mean
                    pen_value = 0.0
                ce_value = ce_mean.item()
        grads = ad.gradients(loss, list(self.params))
        self.optimizer.step(self.params, grads)
        return StepStats(ce_value, pen_value, violations, count, dual_iters)


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir: str | Path | None = None,
    log: Callable[[MetricsRecord], None] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs, evaluating on the validation split after each.

    With ``out_dir`` set, writes ``config.json``, ``metrics.csv`` (one row per
    epoch), ``best.ckpt`` (best validation Dice) and ``last.ckpt``.
    """
    session = Session(config, dataset)
    config = session.config
    schedule = PlateauSchedule(config.lr, config.patience, config.decay, config.min_delta)
    val = dataset.val
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n")
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
    records: list[MetricsRecord] = []
    best = (-np.inf, 0, session.params.copy())
    try:
        for epoch in range(1, config.epochs + 1):
            lr = schedule.lr
            session.optimizer.lr = lr
            ce = pen = 0.0
            viol = count = 0
            elapsed = 0.0
            batches = session.batches()
            for idx in batches:
                t0 = time.perf_counter()
                st = session.step(idx)
                elapsed += time.perf_counter() - t0
                ce += st.loss_ce
                pen += st.loss_penalty
                viol += st.violations
                count += st.count
            nb = max(len(batches), 1)
            if val:
                ev = evaluate(session.params, dataset, val)
                vd, vd3 = ev.mean_dice, ev.mean_dice_3d
            else:
                vd = vd3 = float("nan")
            rec = MetricsRecord(
                epoch, ce / nb, pen / nb, vd, viol / max(count, 1), 1000.0 * elapsed / nb, lr, vd3
            )
            records.append(rec)
            if vd > best[0]:
                best = (vd, epoch, session.params.copy())
            schedule.update(vd)
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
            if log is not None:
                log(rec)
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        segnet.save_checkpoint(session.params, out / "last.ckpt")
        segnet.save_checkpoint(best[2], out / "best.ckpt")
        summary = {"best_epoch": best[1], "best_val_dice": best[0], "epochs": config.epochs}
        (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return TrainResult(session.params, records, best[2], best[1], float(best[0]))


def benchmark_step_time(
    mode: str, config: TrainConfig, dataset: Dataset, n_batches: int = 100, warmup: int = 5
) -> float:
    """Mean wall-clock milliseconds of one full training step, after ``warmup`` untimed steps."""
    session = Session(replace(config, mode=mode), dataset)
    order: list[np.ndarray] = []
    while len(order) < warmup + n_batches:
        order.extend(session.batches())
    for idx in order[:warmup]:
        session.step(idx)
    times = []
    for idx in order[warmup : warmup + n_batches]:
        t0 = time.perf_counter()
        session.step(idx)
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.mean(times))


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricsRecord(int(r["epoch"]), *(float(r[k]) for k in CSV_HEADER[1:]))
            for r in reader
        ]
