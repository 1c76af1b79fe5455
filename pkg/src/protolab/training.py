"""Loss, Adam, plateau/early-stop controllers, augmentation and the fit loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .metrics import confusion, overlap_metrics
from .model import PrototypeLab, load_checkpoint, save_checkpoint
from .nn import load_params, save_params
from .tensor import Tensor, make_rng

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "val_loss", "val_dsc", "lr")
BCE_CLAMP = 1e-7


# -------------------------------------------------------------------- loss


def _check_gt(gt: np.ndarray) -> None:
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth must be binary {0,1}")


def bce_loss(pred: Tensor, gt) -> Tensor:
    g = T.as_tensor(gt)
    p = T.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = g * T.log(p) + (1.0 - g) * T.log(1.0 - p)
    return -ll.mean()


def dice_loss(pred: Tensor, gt, smooth: float = 1.0) -> Tensor:
    g = T.as_tensor(gt)
    inter = (pred * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + g.sum() + smooth)


def bce_dice_loss(pred: Tensor, gt, smooth: float = 1.0) -> Tensor:
    """Equal-weight BCE + soft Dice over the whole batch."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    _check_gt(gt)
    return 0.5 * bce_loss(pred, gt) + 0.5 * dice_loss(pred, gt, smooth)


def downsample_mask(gt: np.ndarray, factor: int) -> np.ndarray:
    """Area-average ``factor`` x ``factor`` cells, then threshold at 0.5."""
    n, c, h, w = gt.shape
    cells = gt.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return (cells >= 0.5).astype(np.float32)


# --------------------------------------------------------------- optimiser


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise RuntimeError(f"no gradient for parameter(s): {', '.join(missing)}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for n, p in self.params:
            g = p.grad.astype(np.float32)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state(self) -> dict:
        out = {}
        for n, _ in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict, step_count: int) -> None:
        for n, _ in self.params:
            self.m[n][...] = arrays[f"m.{n}"]
            self.v[n][...] = arrays[f"v.{n}"]
        self.step_count = step_count


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    floor: float = 1e-7
    best: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"plateau factor must be in (0,1), got {self.factor}")
        if self.patience < 1:
            raise ValueError("plateau patience must be >= 1")

    def step(self, metric: float) -> float:
        if metric < self.best - self.min_delta:
            self.best, self.wait = metric, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.wait = 0
        return self.lr


@dataclass
class EarlyStopping:
    patience: int = 10
    min_delta: float = 1e-4
    best: float = math.inf
    best_epoch: int = -1
    wait: int = 0
    improved: bool = False

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("early-stop patience must be >= 1")

    def step(self, metric: float, epoch: int = 0) -> bool:
        """Record ``metric``; True once ``patience`` epochs passed without improvement."""
        self.improved = metric < self.best - self.min_delta
        if self.improved:
            self.best, self.best_epoch, self.wait = metric, epoch, 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def plateau_schedule(st: PlateauScheduler, val_metric: float) -> float:
    return st.step(val_metric)


def early_stop(st: EarlyStopping, val_metric: float, epoch: int = 0) -> bool:
    return st.step(val_metric, epoch)


# ------------------------------------------------------------ augmentation


@dataclass
class AugmentConfig:
    p_rotate: float = 0.5
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_dropout: float = 0.5
    max_angle: float = 30.0
    max_holes: int = 4
    max_hole_area: float = 0.12


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Paired random rotation, flips and (image-only) coarse dropout.

    ``image`` is (C,H,W), ``mask`` is (1,H,W). Every random draw is made
    regardless of whether the transform fires, so the stream layout is fixed.
    """
    cfg = cfg or AugmentConfig()
    u = rng.random(4)
    angle = rng.uniform(-cfg.max_angle, cfg.max_angle)
    img, msk = image, mask
    if u[0] < cfg.p_rotate:
        img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
        msk = ndimage.rotate(msk, angle, axes=(2, 1), reshape=False, order=0, mode="reflect")
    if u[1] < cfg.p_hflip:
        img, msk = img[:, :, ::-1], msk[:, :, ::-1]
    if u[2] < cfg.p_vflip:
        img, msk = img[:, ::-1, :], msk[:, ::-1, :]
    h, w = img.shape[-2:]
    holes = int(rng.integers(1, cfg.max_holes + 1))
    side = math.sqrt(cfg.max_hole_area)
    boxes = []
    for _ in range(holes):
        hh = int(rng.integers(max(1, h // 16), max(2, int(side * h)) + 1))
        ww = int(rng.integers(max(1, w // 16), max(2, int(side * w)) + 1))
        y0 = int(rng.integers(0, h - hh + 1))
        x0 = int(rng.integers(0, w - ww + 1))
        boxes.append((y0, x0, hh, ww))
    img = np.array(img, dtype=np.float32)
    msk = np.array(msk, dtype=np.float32)
    if u[3] < cfg.p_dropout:
        for y0, x0, hh, ww in boxes:
            img[:, y0:y0 + hh, x0:x0 + ww] = 0.0
    return img, msk


# -------------------------------------------------------------------- fit


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_delta: float = 1e-4
    lr_floor: float = 1e-7
    stop_patience: int = 10
    seed: int = 0
    deep_supervision: bool = True
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentConfig(**self.augmentation)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        PlateauScheduler(self.lr, self.plateau_factor, self.plateau_patience)
        EarlyStopping(self.stop_patience)


@dataclass
class FitResult:
    rows: list
    best_checkpoint: Path
    last_checkpoint: Path
    stopped_early: bool


def training_loss(model: PrototypeLab, images: np.ndarray, masks: np.ndarray, deep_supervision: bool) -> Tensor:
    out = model(Tensor(images))
    loss = bce_dice_loss(out.final_mask, masks)
    if deep_supervision and out.coarse_mask is not None:
        factor = masks.shape[-1] // out.coarse_mask.shape[-1]
        loss = loss + bce_dice_loss(out.coarse_mask, downsample_mask(masks, factor))
    return loss


def validate(model: PrototypeLab, samples) -> tuple[float, float]:
    """Mean per-image final-mask loss and DSC (eval mode, batch of one)."""
    model.eval()
    losses, dscs = [], []
    with T.no_grad():
        for s in samples:
            pred = model(Tensor(s.image[None])).final_mask
            losses.append(float(bce_dice_loss(pred, s.mask[None]).data))
            dscs.append(overlap_metrics(confusion(pred.data[0, 0] >= 0.5, s.mask[0] > 0.5))["dsc"])
    model.train()
    return float(np.mean(losses)), float(np.mean(dscs))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_log(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[k]) for k in LOG_HEADER[1:]])
    return path


def _save_trainer(directory: Path, model, opt: Adam, sched, stopper, epoch: int, rows) -> None:
    save_checkpoint(model, directory)
    save_params(directory / "optim.bin", opt.state())
    state = {"epoch": epoch, "step": opt.step_count, "scheduler": asdict(sched),
             "early_stop": asdict(stopper), "rows": rows}
    (directory / "trainer.json").write_text(json.dumps(state, indent=2, sort_keys=True))


def fit(model: PrototypeLab, train_set, val_set, cfg: TrainConfig, out_dir,
        resume_from=None) -> FitResult:
    """Train with Adam, plateau LR decay and early stopping on validation loss.

    Writes ``log.csv``, ``best/`` (lowest val loss) and ``last/`` (resumable,
    with optimiser state) under ``out_dir``.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    overlap = {s.id for s in train_set} & {s.id for s in val_set}
    if overlap:
        raise ValueError(f"train and val splits overlap: {sorted(overlap)[:5]}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_dir, last_dir = out_dir / "best", out_dir / "last"

    opt = Adam(model.named_parameters(), lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta, cfg.lr_floor)
    stopper = EarlyStopping(cfg.stop_patience, cfg.min_delta)
    rows: list = []
    start = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        st = json.loads((resume_from / "trainer.json").read_text())
        model.load_state_dict(load_checkpoint(resume_from).state_dict())
        opt.load_state(load_params(resume_from / "optim.bin"), st["step"])
        sched = PlateauScheduler(**st["scheduler"])
        stopper = EarlyStopping(**st["early_stop"])
        rows = st["rows"]
        start = st["epoch"] + 1

    model.train()
    stopped = False
    n = len(train_set)
    for epoch in range(start, cfg.epochs):
        lr = sched.lr
        opt.lr = lr
        order = make_rng(cfg.seed, 1, epoch).permutation(n)
        total, count = 0.0, 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            imgs, msks = [], []
            for i in idx:
                s = train_set[i]
                if cfg.augment:
                    im, mk = augment(s.image, s.mask, make_rng(cfg.seed, 2, epoch, int(i)), cfg.augmentation)
                else:
                    im, mk = s.image, s.mask
                imgs.append(im)
                msks.append(mk)
            loss = training_loss(model, np.stack(imgs), np.stack(msks), cfg.deep_supervision)
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * len(idx)
            count += len(idx)
        val_loss, val_dsc = validate(model, val_set)
        rows.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss,
                     "val_dsc": val_dsc, "lr": lr})
        log.info("epoch %d train %.4f val %.4f dsc %.4f lr %.2e", epoch, total / count, val_loss, val_dsc, lr)
        stop = stopper.step(val_loss, epoch)
        if stopper.improved:
            save_checkpoint(model, best_dir)
        sched.step(val_loss)
        _save_trainer(last_dir, model, opt, sched, stopper, epoch, rows)
        write_log(rows, out_dir / "log.csv")
        if stop:
            stopped = True
            break
    if not rows:
        write_log(rows, out_dir / "log.csv")
    if not best_dir.exists():
        save_checkpoint(model, best_dir)
    return FitResult(rows, best_dir, last_dir, stopped)
