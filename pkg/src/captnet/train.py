"""Adam + cosine-annealed training on paired restoration data."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .degrade import Label, PairedSample
from .model import CaptNet, forward, psnr_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    lr_final: float = 1e-7
    total_iters: int = 2000
    patch_size: int = 32
    batch_size: int = 4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.lr_final < self.lr_init:
            raise ValueError(f"lr_final ({self.lr_final}) must be below lr_init ({self.lr_init})")
        if self.patch_size <= 0 or self.patch_size % 8:
            raise ValueError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and total_iters >= 0")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Batch:
    degraded: np.ndarray
    clean: np.ndarray
    labels: list[Label]


@dataclass
class LossRecord:
    iter: int
    lr: float
    loss_db: float


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied to ``params`` in place.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)


def cosine_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    if cfg.total_iters == 0:
        return cfg.lr_init
    if it == cfg.total_iters:
        return cfg.lr_final
    cos = math.cos(math.pi * it / cfg.total_iters)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + cos)


def sample_batch(dataset: Sequence[PairedSample], cfg: TrainConfig, it: int) -> Batch:
    """Aligned random crops of ``batch_size`` pairs, with shared flips when augmenting."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, 0xBA7C]))
    p = cfg.patch_size
    idx = rng.choice(len(dataset), size=cfg.batch_size, replace=cfg.batch_size > len(dataset))
    deg, cln, labels = [], [], []
    for i in idx:
        s = dataset[int(i)]
        h, w = s.clean.shape[1:]
        if p > h or p > w:
            raise ValueError(f"patch {p} larger than image {h}x{w}")
        y0 = int(rng.integers(0, h - p + 1))
        x0 = int(rng.integers(0, w - p + 1))
        d = s.degraded[:, y0:y0 + p, x0:x0 + p]
        c = s.clean[:, y0:y0 + p, x0:x0 + p]
        if cfg.augment:
            flip_h, flip_v = rng.random(2) < 0.5
            if flip_h:
                d, c = d[:, :, ::-1], c[:, :, ::-1]
            if flip_v:
                d, c = d[:, ::-1, :], c[:, ::-1, :]
        deg.append(d)
        cln.append(c)
        labels.append(s.label)
    return Batch(np.stack(deg).astype(np.float32), np.stack(cln).astype(np.float32), labels)


def _grad_norms(params: dict[str, T.Tensor]) -> str:
    norms = {n: float(np.linalg.norm(p.grad)) for n, p in params.items() if p.grad is not None}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
    return ", ".join(f"{n}={v:.3g}" for n, v in worst)


def train(
    model: CaptNet,
    dataset: Sequence[PairedSample],
    cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int | None = None,
    on_step: Callable[[LossRecord], None] | None = None,
) -> list[LossRecord]:
    """Run ``cfg.total_iters`` Adam steps on the negative-PSNR loss; ``model`` is updated in place."""
    if not dataset:
        raise ValueError("empty dataset")
    params = model.named_parameters()
    state = AdamState()
    trace: list[LossRecord] = []
    for it in range(cfg.total_iters):
        lr = cosine_lr(it, cfg)
        batch = sample_batch(dataset, cfg, it)
        model.zero_grad()
        try:
            out = forward(model, T.Tensor(batch.degraded))
            loss = psnr_loss(out, T.Tensor(batch.clean))
            T.backward(loss)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite value at iteration {it} (lr={lr:.3g}): {exc}; largest grads: {_grad_norms(params)}"
            ) from exc
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        bad = [n for n, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise TrainingDiverged(f"non-finite gradient at iteration {it} (lr={lr:.3g}) in {bad[:3]}")
        adam_step(params, grads, state, lr)
        rec = LossRecord(it, lr, float(loss.data))
        trace.append(rec)
        if on_step is not None:
            on_step(rec)
        if it % 100 == 0:
            log.debug("iter %d lr %.3g loss %.4f dB", it, lr, rec.loss_db)
        if checkpoint_path is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            _save(model, checkpoint_path)
    model.zero_grad()
    if checkpoint_path is not None:
        _save(model, checkpoint_path)
    return trace


def _save(model: CaptNet, path: str | Path) -> None:
    from .io import save_checkpoint

    save_checkpoint(model, path)
