"""Patch-grid geometry, the multiscale reference grid, and cell masking.

Every token carries ``(scale, row, col)`` coordinates. Tokens of any scale are
tied to a cell of the reference grid (the full-scale patch grid) by the cell
that contains the patch's normalized center. The same mapping indexes the
positional embeddings and carries MAE cell masks over to every scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    image_height: int
    image_width: int
    patch_size: int

    def __post_init__(self):
        ps = self.patch_size
        if ps < 1 or self.image_height < ps or self.image_width < ps:
            raise GridError(f"patch size {ps} does not fit {self.image_height}x{self.image_width}")
        if self.image_height % ps or self.image_width % ps:
            raise GridError(f"patch size {ps} must divide {self.image_height}x{self.image_width}")

    @property
    def rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ReferenceGrid:
    rows: int
    cols: int

    @classmethod
    def from_spec(cls, spec: GridSpec) -> "ReferenceGrid":
        return cls(spec.rows, spec.cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ScaleSet:
    """Full-resolution scale first, then integer-factor downscales."""

    sizes: tuple[tuple[int, int], ...]
    patch_size: int
    specs: tuple[GridSpec, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.sizes:
            raise GridError("at least one scale is required")
        h0, w0 = self.sizes[0]
        for h, w in self.sizes[1:]:
            if h0 % h or w0 % w or h0 // h != w0 // w:
                raise GridError(f"scale {h}x{w} is not an integer downscale of {h0}x{w0}")
        specs = tuple(GridSpec(h, w, self.patch_size) for h, w in self.sizes)
        object.__setattr__(self, "specs", specs)

    @classmethod
    def square(cls, sizes, patch_size: int) -> "ScaleSet":
        return cls(tuple((int(s), int(s)) for s in sizes), patch_size)

    @property
    def reference(self) -> ReferenceGrid:
        return ReferenceGrid.from_spec(self.specs[0])

    @property
    def n_tokens(self) -> int:
        return sum(s.n_patches for s in self.specs)

    def factor(self, scale: int) -> int:
        return self.sizes[0][0] // self.sizes[scale][0]

    def token_coords(self) -> np.ndarray:
        """``[n_tokens, 3]`` int array of (scale, row, col), scales in order, row-major."""
        out = []
        for s, spec in enumerate(self.specs):
            r, c = np.divmod(np.arange(spec.n_patches), spec.cols)
            out.append(np.stack([np.full_like(r, s), r, c], axis=1))
        return np.concatenate(out, axis=0)

    def token_cells(self) -> np.ndarray:
        ref = self.reference
        return np.array([map_patch_to_cell(self.specs[s], r, c, ref) for s, r, c in self.token_coords()])


def patchify(image: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Cut an ``H x W x C`` image into row-major flattened patches ``[N, ps*ps*C]``."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if (h, w) != (spec.image_height, spec.image_width):
        raise GridError(f"image {h}x{w} does not match grid {spec.image_height}x{spec.image_width}")
    ps = spec.patch_size
    blocks = image.reshape(spec.rows, ps, spec.cols, ps, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(spec.n_patches, ps * ps * c)


def unpatchify(patches: np.ndarray, spec: GridSpec, channels: int) -> np.ndarray:
    ps = spec.patch_size
    patches = np.asarray(patches)
    if patches.shape != (spec.n_patches, ps * ps * channels):
        raise GridError(f"patch array {patches.shape} does not match grid {spec}")
    blocks = patches.reshape(spec.rows, spec.cols, ps, ps, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(spec.image_height, spec.image_width, channels)


def downscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average pooling by an integer factor."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise GridError(f"factor {factor} does not divide {h}x{w}")
    rest = image.shape[2:]
    return np.asarray(image, dtype=np.float64).reshape(h // factor, factor, w // factor, factor, *rest).mean(axis=(1, 3))


def pyramid(image: np.ndarray, scales: ScaleSet) -> list[np.ndarray]:
    return [downscale(image, scales.factor(s)) for s in range(len(scales.sizes))]


def map_patch_to_cell(spec: GridSpec, row: int, col: int, ref: ReferenceGrid) -> int:
    """Reference cell containing the normalized center of patch ``(row, col)``.

    Integer form of ``floor((row + 0.5) / rows * ref.rows)``, clamped.
    """
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise GridError(f"patch ({row}, {col}) outside {spec.rows}x{spec.cols} grid")
    cr = min((2 * row + 1) * ref.rows // (2 * spec.rows), ref.rows - 1)
    cc = min((2 * col + 1) * ref.cols // (2 * spec.cols), ref.cols - 1)
    return int(cr * ref.cols + cc)


@dataclass(frozen=True)
class CellMask:
    cells: np.ndarray  # bool, one entry per reference cell
    ratio: float
    seed: int | None = None


def sample_cell_mask(ref: ReferenceGrid, ratio: float, seed) -> CellMask:
    """Mask ``floor(ratio * cells)`` cells chosen uniformly without replacement."""
    if not 0.0 < ratio < 1.0:
        raise GridError(f"mask ratio must be in (0, 1), got {ratio}")
    n = ref.n_cells
    rng = np.random.default_rng(seed)
    cells = np.zeros(n, dtype=bool)
    cells[rng.choice(n, size=int(np.floor(ratio * n)), replace=False)] = True
    return CellMask(cells, ratio, seed)


def apply_multiscale_mask(mask: CellMask, scales: ScaleSet) -> np.ndarray:
    """Per-token masked flag: a token is masked iff its reference cell is."""
    cells = np.asarray(mask.cells, dtype=bool)
    if cells.size != scales.reference.n_cells:
        raise GridError(f"cell mask has {cells.size} cells, reference grid has {scales.reference.n_cells}")
    return cells[scales.token_cells()]
