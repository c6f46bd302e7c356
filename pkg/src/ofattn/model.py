"""Mini multiscale vision transformer, MAE head, Adam and the training step."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import ContractError, NonFiniteError, Parameter, Tape, Var
from .grid import ScaleSet, patchify, pyramid
from .ofa import OfaConfig, attention_forward, combine_layer_losses, mask_S, ofa_layer_loss, total_loss


@dataclass(frozen=True)
class VitConfig:
    depth: int = 6
    dim: int = 64
    heads: int = 2
    patch_size: int = 8
    scales: tuple[int, ...] = (64,)
    n_classes: int = 8
    mlp_ratio: int = 4
    channels: int = 3
    ofa: OfaConfig = field(default_factory=OfaConfig)
    mae_ratio: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if isinstance(self.ofa, dict):
            object.__setattr__(self, "ofa", OfaConfig(**self.ofa))
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0 < self.mae_ratio < 1:
            raise ContractError("mae_ratio must be in (0, 1)")
        self.ofa.check_depth(self.depth)
        self.scale_set  # validates sizes

    @property
    def scale_set(self) -> ScaleSet:
        return ScaleSet.square(self.scales, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_json(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["ofa"]["ofa_layers"] = list(self.ofa.ofa_layers)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "VitConfig":
        return cls(**d)


def param_shapes(cfg: VitConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter in declaration order."""
    d, P = cfg.dim, cfg.patch_dim
    hidden = cfg.mlp_ratio * d
    n_pos = len(cfg.scales) * cfg.scale_set.reference.n_cells
    shapes = [
        ("patch_embed.w", (P, d)), ("patch_embed.b", (d,)),
        ("pos_embed", (n_pos, d)), ("cls_token", (d,)),
    ]
    for i in range(1, cfg.depth + 1):
        b = f"blocks.{i}."
        shapes += [
            (b + "ln1.g", (d,)), (b + "ln1.b", (d,)),
            (b + "attn.wq", (d, d)), (b + "attn.wk", (d, d)), (b + "attn.wv", (d, d)),
            (b + "attn.wo", (d, d)), (b + "attn.bo", (d,)),
            (b + "ln2.g", (d,)), (b + "ln2.b", (d,)),
            (b + "mlp.w1", (d, hidden)), (b + "mlp.b1", (hidden,)),
            (b + "mlp.w2", (hidden, d)), (b + "mlp.b2", (d,)),
        ]
    shapes += [
        ("norm.g", (d,)), ("norm.b", (d,)),
        ("head.w", (d, cfg.n_classes)), ("head.b", (cfg.n_classes,)),
        ("mae.w", (d, P)), ("mae.b", (P,)), ("mask_token", (d,)),
    ]
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_params(cfg: VitConfig, seed: int) -> dict[str, Parameter]:
    """Weights ~ N(0, 0.02) truncated at 2 std; biases 0; norm gains 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif leaf in ("b", "bo", "b1", "b2"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = Parameter(name, value)
    return params


def prepare_patches(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """uint8 ``[B, H, W, C]`` images -> ``[B, N_total, patch_dim]`` floats in [-1, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    scales = cfg.scale_set
    if images.shape[1:3] != scales.sizes[0]:
        raise ContractError(f"images {images.shape[1:3]} do not match base scale {scales.sizes[0]}")
    x = images.astype(np.float64) / 127.5 - 1.0
    out = []
    for img in x:
        out.append(np.concatenate([patchify(level, spec) for level, spec in zip(pyramid(img, scales), scales.specs)]))
    return np.stack(out)


def pos_index(cfg: VitConfig) -> np.ndarray:
    """Row of the positional table for each token: ``scale * cells + cell``."""
    scales = cfg.scale_set
    return scales.token_coords()[:, 0] * scales.reference.n_cells + scales.token_cells()


@dataclass
class ForwardOutput:
    logits: Var
    traces: dict
    tokens: Var


def embed_tokens(tape: Tape, patches, params, cfg: VitConfig, token_mask=None) -> Var:
    """Patch embedding (+ mask-token substitution) + positional lookup, CLS first."""
    patches = np.asarray(patches, dtype=np.float64)
    n_tok = cfg.scale_set.n_tokens
    if patches.shape[-2:] != (n_tok, cfg.patch_dim):
        raise ContractError(f"patches {patches.shape} do not match {n_tok} tokens of dim {cfg.patch_dim}")
    p = {k: tape.param(v) for k, v in params.items() if k in ("patch_embed.w", "patch_embed.b", "pos_embed", "cls_token", "mask_token")}
    e = E.linear(patches, p["patch_embed.w"], p["patch_embed.b"])
    if token_mask is not None:
        m = np.broadcast_to(np.asarray(token_mask, dtype=bool)[..., None], e.shape)
        e = E.where(m, p["mask_token"], e)
    e = E.add(e, E.gather_rows(p["pos_embed"], pos_index(cfg)))
    if e.ndim == 3:
        cls = E.reshape(E.expand(p["cls_token"], e.shape[0]), (e.shape[0], 1, cfg.dim))
    else:
        cls = E.reshape(p["cls_token"], (1, cfg.dim))
    return E.concat([cls, e], axis=-2)


def encoder_forward(tape: Tape, X0: Var, params, cfg: VitConfig, capture=None) -> tuple[Var, dict]:
    """Pre-norm blocks; returns final tokens and attention traces for ``capture`` layers."""
    capture = set(cfg.ofa.ofa_layers if capture is None else capture)
    x = X0
    traces = {}
    for i in range(1, cfg.depth + 1):
        w = {k[len(f"blocks.{i}."):]: tape.param(v) for k, v in params.items() if k.startswith(f"blocks.{i}.")}
        h = E.layer_norm(x, w["ln1.g"], w["ln1.b"])
        tr = attention_forward(h, w["attn.wq"], w["attn.wk"], w["attn.wv"], cfg.heads)
        x = E.add(x, E.linear(tr.Y, w["attn.wo"], w["attn.bo"]))
        h = E.layer_norm(x, w["ln2.g"], w["ln2.b"])
        h = E.gelu(E.linear(h, w["mlp.w1"], w["mlp.b1"]))
        x = E.add(x, E.linear(h, w["mlp.w2"], w["mlp.b2"]))
        if i in capture:
            traces[i] = tr
    x = E.layer_norm(x, tape.param(params["norm.g"]), tape.param(params["norm.b"]))
    return x, traces


def forward(tape: Tape, patches, params, cfg: VitConfig, capture=None) -> ForwardOutput:
    """Classification forward pass; needs no region map."""
    x, traces = encoder_forward(tape, embed_tokens(tape, patches, params, cfg), params, cfg, capture)
    cls = E.take(x, (Ellipsis, 0, slice(None)))
    logits = E.linear(E.reshape(cls, (-1, cfg.dim)), tape.param(params["head.w"]), tape.param(params["head.b"]))
    if np.ndim(patches) == 2:
        logits = E.reshape(logits, (cfg.n_classes,))
    return ForwardOutput(logits, traces, x)


def mae_forward(tape: Tape, patches, token_mask, params, cfg: VitConfig) -> Var:
    """Masked-patch reconstruction loss (MSE over the pixels of masked tokens)."""
    token_mask = np.asarray(token_mask, dtype=bool)
    if not token_mask.any():
        raise ContractError("MAE mask covers no tokens")
    patches = np.asarray(patches, dtype=np.float64)
    x, _ = encoder_forward(tape, embed_tokens(tape, patches, params, cfg, token_mask), params, cfg, capture=())
    tokens = E.take(x, (Ellipsis, slice(1, None), slice(None)))
    pred = E.linear(tokens, tape.param(params["mae.w"]), tape.param(params["mae.b"]))
    m = np.broadcast_to(token_mask[..., None], pred.shape)
    return E.masked_mse(pred, patches, m)


# ----------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Parameter]):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.value.ndim >= 2:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update


@dataclass
class Batch:
    patches: np.ndarray             # [B, N, P]
    labels: np.ndarray              # [B, C]
    B_dprime: np.ndarray | None = None      # [B, N, N]
    object_rows: np.ndarray | None = None   # [B, N]


def compute_losses(tape: Tape, batch: Batch, params, cfg: VitConfig, alpha: float | None = None):
    """Task, per-layer OFA, combined OFA and total loss on ``tape``.

    With ``alpha == 0`` the OFA terms are still evaluated for reporting but
    kept out of the differentiated total.
    """
    alpha = cfg.ofa.alpha if alpha is None else alpha
    use_ofa = batch.B_dprime is not None and bool(cfg.ofa.ofa_layers)
    out = forward(tape, batch.patches, params, cfg, capture=cfg.ofa.ofa_layers if use_ofa else ())
    task = E.bce_with_logits(out.logits, batch.labels)
    per_layer = {}
    ofa_total = None
    if use_ofa:
        for layer, tr in out.traces.items():
            per_layer[layer] = ofa_layer_loss(mask_S(tr, batch.object_rows), batch.B_dprime)
        ofa_total = combine_layer_losses(per_layer, cfg.ofa)
    total = total_loss(task, ofa_total, alpha) if (ofa_total is not None and alpha != 0) else task
    return task, per_layer, ofa_total, total


def train_step(batch: Batch, params, opt: Adam, cfg: VitConfig, alpha: float | None = None) -> dict:
    """One forward/backward/Adam update. Returns the loss breakdown."""
    alpha = cfg.ofa.alpha if alpha is None else alpha
    tape = Tape()
    task, per_layer, ofa_total, total = compute_losses(tape, batch, params, cfg, alpha)
    if not np.isfinite(total.value):
        raise NonFiniteError(tape.first_nonfinite or "unknown")
    for p in params.values():
        p.zero_grad()
    tape.backward(total)
    tape.release()
    opt.step(params)
    ofa_value = float(ofa_total.value) if ofa_total is not None else 0.0
    return {
        "task": float(task.value),
        "ofa_per_layer": {int(k): float(v.value) for k, v in per_layer.items()},
        "ofa_total": ofa_value,
        "total": float(total.value),
    }


def mae_step(patches, token_mask, params, opt: Adam, cfg: VitConfig) -> float:
    tape = Tape()
    loss = mae_forward(tape, patches, token_mask, params, cfg)
    if not np.isfinite(loss.value):
        raise NonFiniteError(tape.first_nonfinite or "unknown")
    for p in params.values():
        p.zero_grad()
    tape.backward(loss)
    tape.release()
    opt.step(params)
    return float(loss.value)


# ----------------------------------------------------------------------------
# checkpoint: "OFA1" | u32 len | config JSON | u32 count | per tensor:
#   u32 name len | name | u32 ndim | u32 dims... | little-endian f64 data

MAGIC = b"OFA1"


def save_checkpoint(path, config: dict, params: dict[str, Parameter]):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(params))]
    for name, p in params.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", p.value.ndim),
                  struct.pack(f"<{p.value.ndim}I", *p.value.shape), p.value.astype("<f8").tobytes()]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, Parameter]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an OFA1 checkpoint")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return v

    n = u32()
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    params = {}
    for _ in range(u32()):
        ln = u32()
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        ndim = u32()
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = math.prod(shape)
        if pos + 8 * count > len(data):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        value = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        params[name] = Parameter(name, value)
    return config, params


def param_count(params) -> int:
    return sum(p.value.size for p in params.values())


def tiny_config() -> VitConfig:
    """L=2, d=8, H=1, one 16x16 scale with patch 8 (N=4), 2 classes, OFA at [1, 2], alpha 0.7."""
    return VitConfig(depth=2, dim=8, heads=1, patch_size=8, scales=(16,), n_classes=2,
                     ofa=OfaConfig(alpha=0.7, ofa_layers=(1, 2)))


def gradcheck_tiny(seed: int = 0, eps: float = 1e-5) -> float:
    """Finite-difference check of the full classification + OFA loss at the tiny config.

    Parameters are the seeded init plus N(0, 0.5) noise so that no path sits
    in a flat, near-zero-gradient regime where differences are pure round-off.
    """
    from .pam import build_pam

    cfg = tiny_config()
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.value = p.value + rng.normal(size=p.value.shape) * 0.5
    images = rng.integers(0, 256, (2, 16, 16, 3))
    maps = np.zeros((2, 16, 16), np.uint8)
    maps[0, 2:10, 3:12] = 1
    maps[1, 8:, 8:] = 1
    pams = [build_pam(m, cfg.scale_set) for m in maps]
    batch = Batch(prepare_patches(images, cfg), rng.integers(0, 2, (2, 2)),
                  np.stack([p.B_dprime for p in pams]), np.stack([p.object_rows for p in pams]))
    return E.grad_check(lambda tape: compute_losses(tape, batch, params, cfg)[3], list(params.values()), eps)
