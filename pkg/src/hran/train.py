"""L1 objective, Adam, step learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PairedDataset, sample_batch, stack_batch
from .errors import ConfigError, NumericalError, ShapeError
from .model import HRAN, ModelConfig, ParamStore, init_params
from .rng import Rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 16
    patch: int = 64
    lr0: float = 1e-4
    halve_every: int = 200_000
    max_iters: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    window: int = 50

    def __post_init__(self):
        for key in ("batch", "patch", "halve_every", "checkpoint_every", "log_every", "window"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be non-negative, got {self.max_iters}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam hyperparameters out of range")


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient ``sign(pred - target) / N``."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target.astype(pred.dtype, copy=False)
    n = diff.size
    loss = float(np.abs(diff).mean(dtype=np.float64))
    grad = np.sign(diff) / diff.dtype.type(n)
    return loss, grad


def lr_at(t: int, lr0: float = 1e-4, halve_every: int = 200_000) -> float:
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    return lr0 * 0.5 ** (t // halve_every)


def adam_step(store: ParamStore, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update (``t`` is 1-based); zeroes the gradients."""
    if t < 1:
        raise ValueError(f"Adam step index is 1-based, got {t}")
    for name, p in store.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r} at step {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for _, p in store.items():
        g = p.grad
        dt = p.value.dtype.type
        p.m *= dt(beta1)
        p.m += dt(1.0 - beta1) * g
        p.v *= dt(beta2)
        p.v += dt(1.0 - beta2) * (g * g)
        mhat = p.m / dt(bc1)
        vhat = p.v / dt(bc2)
        p.value -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
        g[...] = 0
    store.mark_updated()


@dataclass
class TrainState:
    t: int = 0
    rng: Rng = field(default_factory=Rng)
    losses: deque = field(default_factory=deque)

    def windowed_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


@dataclass
class TrainResult:
    model: HRAN
    state: TrainState
    history: list[tuple[int, float, float]]
    checkpoint: Path | None


def _log_line(t, lr, loss) -> str:
    return f"{t}\t{lr:.9g}\t{loss:.9g}\n"


def train_step(model: HRAN, batch_lr, batch_hr, t: int, tcfg: TrainConfig) -> tuple[float, float]:
    """Forward, L1, backward and Adam for iteration ``t`` (0-based). Returns ``(loss, lr)``."""
    lr = lr_at(t, tcfg.lr0, tcfg.halve_every)
    out = model.forward(batch_lr)
    loss, grad = l1_loss(out, batch_hr)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at iteration {t + 1}")
    model.backward(grad)
    adam_step(model.store, t + 1, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    return loss, lr


def train_loop(cfg: ModelConfig, tcfg: TrainConfig, dataset: PairedDataset, out_dir=None,
               resume=None, store: ParamStore | None = None) -> TrainResult:
    """Run training up to ``tcfg.max_iters`` total iterations.

    With ``out_dir`` the loop writes ``loss.log`` (``iter\\tlr\\tloss`` lines),
    ``iter_<t>.ckpt`` every ``checkpoint_every`` iterations and ``last.ckpt``
    at the start and end. ``resume`` names a training checkpoint to continue
    from; the continuation is bit-identical to an uninterrupted run.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if dataset.scale != cfg.scale:
        raise ConfigError(f"dataset scale {dataset.scale} != model scale {cfg.scale}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt = load_checkpoint(resume, expect=cfg)
        if not ckpt.has_optimizer:
            raise ConfigError(f"{resume} has no optimizer state; cannot resume")
        state = TrainState(ckpt.iteration, Rng(ckpt.rng_state))
        model = HRAN(cfg, ckpt.store)
    else:
        state = TrainState(0, Rng(tcfg.seed))
        model = HRAN(cfg, store if store is not None else init_params(cfg, tcfg.seed))
    state.losses = deque(maxlen=tcfg.window)

    log = None
    if out_dir is not None:
        log_path = out_dir / "loss.log"
        kept = []
        if resume is not None and log_path.exists():
            for line in log_path.read_text(encoding="utf-8").splitlines(keepends=True):
                if line.strip() and int(line.split("\t", 1)[0]) <= state.t:
                    kept.append(line)
        log_path.write_text("".join(kept), encoding="utf-8")
        log = open(log_path, "a", encoding="utf-8", newline="\n")

    def checkpoint(name):
        path = out_dir / name
        save_checkpoint(path, cfg, model.store, state.t, state.rng.state)
        return path

    history = []
    last = None
    try:
        if out_dir is not None and resume is None:
            last = checkpoint("last.ckpt")
        while state.t < tcfg.max_iters:
            t = state.t
            patches = sample_batch(dataset, state.rng, tcfg.batch, tcfg.patch)
            batch_lr, batch_hr = stack_batch(patches)
            loss, lr = train_step(model, batch_lr, batch_hr, t, tcfg)
            state.t = t + 1
            state.losses.append(loss)
            history.append((state.t, lr, loss))
            if log is not None and state.t % tcfg.log_every == 0:
                log.write(_log_line(state.t, lr, loss))
                log.flush()
            if out_dir is not None and state.t % tcfg.checkpoint_every == 0:
                checkpoint(f"iter_{state.t:07d}.ckpt")
            if state.t % 100 == 0:
                logger.info("iter %d lr %.3g loss %.5f (window %.5f)", state.t, lr, loss, state.windowed_loss())
        if out_dir is not None:
            last = checkpoint("last.ckpt")
    finally:
        if log is not None:
            log.close()
    return TrainResult(model, state, history, last)
