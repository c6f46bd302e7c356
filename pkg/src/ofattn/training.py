"""Training loops, inference and evaluation over in-memory datasets."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import Dataset
from .engine import Tape
from .grid import apply_multiscale_mask, sample_cell_mask
from .metrics import MapReport, compute_map
from .model import Adam, Batch, VitConfig, forward, init_params, mae_step, prepare_patches, train_step
from .pam import build_pam

MODES = ("baseline", "ofa", "mae", "mae+ofa")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ofa"
    epochs: int = 16
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    mae_steps: int = 1000
    mae_batch_size: int = 32
    # "pretrain": MAE first, then OFA finetune; "joint": OFA also drives the encoder during MAE
    mae_ofa_order: str = "pretrain"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.mae_batch_size < 1 or self.mae_steps < 0:
            raise ValueError("epochs, steps and batch sizes must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mae_ofa_order not in ("pretrain", "joint"):
            raise ValueError("mae_ofa_order must be 'pretrain' or 'joint'")


@dataclass
class Prepared:
    """Model-ready arrays for a dataset."""
    patches: np.ndarray
    labels: np.ndarray
    B_dprime: np.ndarray | None
    object_rows: np.ndarray | None

    def batch(self, idx) -> Batch:
        return Batch(self.patches[idx], self.labels[idx],
                     None if self.B_dprime is None else self.B_dprime[idx],
                     None if self.object_rows is None else self.object_rows[idx])


def prepare(ds: Dataset, cfg: VitConfig, with_pam: bool = True) -> Prepared:
    patches = prepare_patches(ds.images, cfg)
    if not with_pam:
        return Prepared(patches, ds.labels, None, None)
    scales = cfg.scale_set
    pams = [build_pam(m, scales) for m in ds.region_maps]
    return Prepared(patches, ds.labels, np.stack([p.B_dprime for p in pams]),
                    np.stack([p.object_rows for p in pams]).astype(np.float64))


def effective_config(cfg: VitConfig, mode: str) -> VitConfig:
    """Baseline and MAE-only runs carry ``alpha = 0``."""
    if mode in ("baseline", "mae"):
        return replace(cfg, ofa=replace(cfg.ofa, alpha=0.0))
    return cfg


def _mae_masks(cfg: VitConfig, rng, n: int) -> np.ndarray:
    scales = cfg.scale_set
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return np.stack([apply_multiscale_mask(sample_cell_mask(scales.reference, cfg.mae_ratio, int(s)), scales)
                     for s in seeds])


def mae_pretrain(data: Prepared, params, cfg: VitConfig, tcfg: TrainConfig, log: Callable | None = None,
                 steps: int | None = None) -> list[float]:
    """Masked-patch reconstruction on ``data.patches``; returns the loss per step."""
    steps = tcfg.mae_steps if steps is None else steps
    rng = np.random.default_rng([tcfg.seed, 1])
    opt = Adam(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    n = len(data.patches)
    losses = []
    for step in range(steps):
        idx = rng.choice(n, size=min(tcfg.mae_batch_size, n), replace=False)
        loss = mae_step(data.patches[idx], _mae_masks(cfg, rng, len(idx)), params, opt, cfg)
        losses.append(loss)
        if log:
            log({"phase": "mae", "step": step, "mae": loss})
    return losses


def fit(data: Prepared, cfg: VitConfig, tcfg: TrainConfig, log: Callable | None = None, params=None,
        on_epoch: Callable | None = None):
    """Train from ``init_params(cfg, seed)`` (or ``params``). Returns ``(params, history)``.

    ``on_epoch(epoch, params)`` runs after every epoch.
    """
    cfg = effective_config(cfg, tcfg.mode)
    params = init_params(cfg, tcfg.seed) if params is None else params
    if tcfg.mode in ("mae", "mae+ofa") and tcfg.mae_steps:
        mae_pretrain(data, params, cfg, tcfg, log)
    use_pam = tcfg.mode in ("ofa", "mae+ofa")
    if use_pam and data.B_dprime is None:
        raise ValueError(f"mode {tcfg.mode!r} needs region maps")
    rng = np.random.default_rng([tcfg.seed, 0])
    opt = Adam(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    n = len(data.patches)
    history = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            batch = data.batch(idx)
            if not use_pam:
                batch = Batch(batch.patches, batch.labels)
            out = train_step(batch, params, opt, cfg)
            rec = {"epoch": epoch, "step": step, "task": out["task"],
                   "ofa_total": out["ofa_total"] if use_pam else None, "total": out["total"]}
            history.append(rec)
            if log:
                log(rec)
            step += 1
        if on_epoch:
            on_epoch(epoch, params)
    return params, history


def predict(params, cfg: VitConfig, patches: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Sigmoid class scores, ``[n, C]``. Uses no region maps."""
    out = []
    for start in range(0, len(patches), batch_size):
        tape = Tape(grad=False)
        logits = forward(tape, patches[start:start + batch_size], params, cfg, capture=()).logits.value
        tape.release()
        out.append(1.0 / (1.0 + np.exp(-logits)))
    return np.concatenate(out)


def evaluate(params, cfg: VitConfig, images: np.ndarray, labels: np.ndarray) -> MapReport:
    return compute_map(predict(params, cfg, prepare_patches(images, cfg)), labels)

