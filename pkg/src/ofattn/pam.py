"""Patch adjacency matrices built from a region map.

``B`` links two patches iff they touch a common object region, ``B'`` spreads
each nonempty row uniformly over its ones (masked softmax) and ``B''`` zeroes
the rows of background patches. Label 0 is background; 1..r are objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .grid import GridError, GridSpec, ScaleSet


@dataclass(frozen=True)
class PatchRegionIncidence:
    regions: tuple[frozenset, ...]

    @property
    def object_rows(self) -> np.ndarray:
        return np.array([bool(r) for r in self.regions])

    def __len__(self):
        return len(self.regions)


@dataclass(frozen=True)
class PamMatrices:
    B: np.ndarray
    B_prime: np.ndarray
    B_dprime: np.ndarray
    object_rows: np.ndarray


def patch_region_incidence(region_map: np.ndarray, spec: GridSpec, factor: int = 1) -> PatchRegionIncidence:
    """Object regions touched by each patch (any-overlap rule).

    ``spec`` describes the patch grid of an image downscaled by ``factor`` from
    ``region_map``; each patch is judged on its full-resolution footprint.
    """
    region_map = np.asarray(region_map)
    h, w = region_map.shape
    if (h, w) != (spec.image_height * factor, spec.image_width * factor):
        raise GridError(f"region map {h}x{w} does not match grid {spec.image_height}x{spec.image_width} at factor {factor}")
    fp = spec.patch_size * factor
    blocks = region_map.reshape(spec.rows, fp, spec.cols, fp).transpose(0, 2, 1, 3).reshape(spec.n_patches, -1)
    regions = []
    for block in blocks:
        labels = np.unique(block)
        regions.append(frozenset(int(v) for v in labels if v != 0))
    return PatchRegionIncidence(tuple(regions))


def token_incidence(region_map: np.ndarray, scales: ScaleSet) -> PatchRegionIncidence:
    """Incidence for every token of every scale, in token order."""
    out: list[frozenset] = []
    for s, spec in enumerate(scales.specs):
        out.extend(patch_region_incidence(region_map, spec, scales.factor(s)).regions)
    return PatchRegionIncidence(tuple(out))


def build_B(inc: PatchRegionIncidence) -> np.ndarray:
    n = len(inc)
    labels = sorted(set().union(*inc.regions)) if n else []
    col = {lab: j for j, lab in enumerate(labels)}
    member = np.zeros((n, len(labels)))
    for i, regs in enumerate(inc.regions):
        for lab in regs:
            member[i, col[lab]] = 1.0
    return (member @ member.T > 0).astype(np.float64)


def build_B_prime(B: np.ndarray) -> np.ndarray:
    """Row softmax of ``B`` restricted to its ones: each one becomes ``1/k``."""
    B = np.asarray(B, dtype=np.float64)
    tape = engine.Tape()
    return engine.row_softmax(tape.const(B), B).value


def build_B_dprime(B_prime: np.ndarray, object_rows) -> np.ndarray:
    rows = np.asarray(object_rows, dtype=bool)
    if rows.shape != (B_prime.shape[0],):
        raise GridError(f"object_rows of length {rows.size} vs matrix {B_prime.shape}")
    return np.where(rows[:, None], B_prime, 0.0)


def build_pam(region_map: np.ndarray, scales: ScaleSet) -> PamMatrices:
    inc = token_incidence(region_map, scales)
    B = build_B(inc)
    Bp = build_B_prime(B)
    rows = inc.object_rows
    return PamMatrices(B, Bp, build_B_dprime(Bp, rows), rows)


def adjacency_stats(B: np.ndarray, object_rows=None) -> dict:
    """Edge counts of the restricted attention graph against the complete one.

    Directed counts include self-loops (``sum(B)`` vs ``N**2``); the undirected
    counterparts use ``N(N+1)/2`` for the complete graph.
    """
    B = np.asarray(B)
    n = B.shape[0]
    restricted = int(B.sum())
    full = n * n
    undirected = (restricted + int(np.trace(B))) // 2
    stats = {
        "restricted_edges": restricted,
        "full_edges": full,
        "retained_fraction": restricted / full if full else 0.0,
        "restricted_edges_undirected": undirected,
        "full_edges_undirected": n * (n + 1) // 2,
    }
    if object_rows is not None:
        stats["object_patches"] = int(np.sum(object_rows))
    return stats
