"""Self-attention with the object-focused attention (OFA) loss branch."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import ContractError, Var


@dataclass(frozen=True)
class OfaConfig:
    alpha: float = 0.7
    ofa_layers: tuple[int, ...] = (1, 3, 6)
    decay: float = 0.9

    def __post_init__(self):
        layers = tuple(int(x) for x in self.ofa_layers)
        object.__setattr__(self, "ofa_layers", layers)
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.decay <= 1:
            raise ContractError(f"decay must be in (0, 1], got {self.decay}")
        if list(layers) != sorted(set(layers)) or any(x < 1 for x in layers):
            raise ContractError(f"ofa_layers must be ascending 1-based indices, got {layers}")

    def check_depth(self, depth: int):
        if self.ofa_layers and self.ofa_layers[-1] > depth:
            raise ContractError(f"ofa layer {self.ofa_layers[-1]} exceeds model depth {depth}")

    def weights(self) -> dict[int, float]:
        """Layer -> decay**(m - j + 1): the last OFA layer weighs ``decay``."""
        m = len(self.ofa_layers)
        return {layer: self.decay ** (m - j) for j, layer in enumerate(self.ofa_layers)}


@dataclass
class AttentionTrace:
    S: list[Var]          # scaled pre-attention, one per head
    A: list[Var]          # row softmax of S (this is S')
    Y: Var
    S_dprime: list[Var] = field(default_factory=list)

    @property
    def S_prime(self) -> list[Var]:
        return self.A


def attention_forward(X: Var, wq: Var, wk: Var, wv: Var, heads: int) -> AttentionTrace:
    """Multi-head scaled dot-product attention without output projection.

    ``X`` is ``[N, d]`` or ``[B, N, d]``; each weight is ``[d, d]`` and is split
    column-wise into ``heads`` blocks of width ``d // heads``.
    """
    d = X.shape[-1]
    for w in (wq, wk, wv):
        if w.shape != (d, d):
            raise ContractError(f"attention weight {w.shape} does not match model dim {d}")
    if d % heads:
        raise ContractError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    Q, K, V = E.matmul(X, wq), E.matmul(X, wk), E.matmul(X, wv)
    S, A, Ys = [], [], []
    for h in range(heads):
        cols = (Ellipsis, slice(h * dh, (h + 1) * dh))
        q, k, v = (Q, K, V) if heads == 1 else (E.take(Q, cols), E.take(K, cols), E.take(V, cols))
        s = E.scale(E.matmul(q, E.transpose(k)), 1.0 / math.sqrt(dh))
        a = E.row_softmax(s)
        S.append(s)
        A.append(a)
        Ys.append(E.matmul(a, v))
    Y = Ys[0] if heads == 1 else E.concat(Ys, axis=-1)
    return AttentionTrace(S, A, Y)


def mask_S(trace: AttentionTrace, object_rows, cls_token: bool = True) -> list[Var]:
    """S'': patch-to-patch block of S' with background rows set to zero.

    With a CLS token the first row and column are dropped *after* the softmax,
    so object rows keep the mass they give the CLS column out of the comparison.
    """
    rows = np.asarray(object_rows, dtype=np.float64)[..., :, None]
    out = []
    for a in trace.A:
        block = E.take(a, (Ellipsis, slice(1, None), slice(1, None))) if cls_token else a
        if rows.shape[-2] != block.shape[-2]:
            raise ContractError(f"object_rows covers {rows.shape[-2]} patches, attention has {block.shape[-2]}")
        out.append(E.mul(block, rows))
    trace.S_dprime = out
    return out


def ofa_layer_loss(s_dprime: list[Var], B_dprime) -> Var:
    """Mean over heads (and batch) of the Frobenius distance ``||S'' - B''||``."""
    target = np.asarray(B_dprime, dtype=np.float64)
    per_head = []
    for s in s_dprime:
        if s.shape != target.shape:
            raise ContractError(f"S'' {s.shape} vs B'' {target.shape}")
        if s.ndim == 3:
            per_head.append(E.mean(E.batch_frobenius(s, target)))
        else:
            per_head.append(E.frobenius_distance(s, target))
    total = per_head[0]
    for x in per_head[1:]:
        total = E.add(total, x)
    return total if len(per_head) == 1 else E.scale(total, 1.0 / len(per_head))


def combine_layer_losses(losses: dict, cfg: OfaConfig):
    """Decay-weighted mean of per-layer OFA losses (later layers weigh more).

    Accepts tape ``Var`` values or plain floats.
    """
    if sorted(losses) != list(cfg.ofa_layers):
        raise ContractError(f"losses for layers {sorted(losses)} do not match ofa_layers {list(cfg.ofa_layers)}")
    weights = cfg.weights()
    m = len(cfg.ofa_layers)
    terms = [(weights[layer], losses[layer]) for layer in cfg.ofa_layers]
    if any(isinstance(v, Var) for _, v in terms):
        total = None
        for w, v in terms:
            t = E.scale(v, w)
            total = t if total is None else E.add(total, t)
        return E.scale(total, 1.0 / m)
    return sum(w * float(v) for w, v in terms) / m


def total_loss(task, ofa_total, alpha: float):
    """``task + alpha * ofa_total`` on tape values or floats."""
    if isinstance(task, Var) or isinstance(ofa_total, Var):
        return E.add(task, E.scale(ofa_total, alpha) if isinstance(ofa_total, Var) else alpha * ofa_total)
    return task + alpha * ofa_total
