import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofattn.grid import (
    CellMask, GridError, GridSpec, ReferenceGrid, ScaleSet, apply_multiscale_mask, downscale,
    map_patch_to_cell, patchify, sample_cell_mask, unpatchify,
)


def center_rule(row, col, rows, cols, ref):
    """Float oracle: floor(normalized center * ref size), clamped."""
    cy, cx = (row + 0.5) / rows, (col + 0.5) / cols
    return min(math.floor(cy * ref.rows), ref.rows - 1) * ref.cols + min(math.floor(cx * ref.cols), ref.cols - 1)


def test_patch_counts():
    img = np.zeros((64, 64, 3))
    assert patchify(img, GridSpec(64, 64, 16)).shape == (16, 16 * 16 * 3)
    one = np.random.default_rng(0).normal(size=(16, 16, 3))
    np.testing.assert_array_equal(patchify(one, GridSpec(16, 16, 16))[0], one.reshape(-1))


def test_patch_order_is_row_major():
    img = np.zeros((4, 6, 1))
    img[0:2, 4:6] = 1  # patch (0, 2)
    p = patchify(img, GridSpec(4, 6, 2))
    assert p.sum(axis=1).tolist() == [0, 0, 4, 0, 0, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_round_trip(rows, cols, ps, c, seed):
    spec = GridSpec(rows * ps, cols * ps, ps)
    img = np.random.default_rng(seed).normal(size=(rows * ps, cols * ps, c))
    back = unpatchify(patchify(img, spec), spec, c)
    assert back.tobytes() == img.tobytes()


def test_bad_specs():
    with pytest.raises(GridError):
        GridSpec(30, 32, 8)
    with pytest.raises(GridError):
        patchify(np.zeros((32, 32, 3)), GridSpec(64, 64, 8))
    with pytest.raises(GridError):
        ScaleSet.square([64, 48], 8)


def test_downscale_is_area_average():
    img = np.arange(16, dtype=float).reshape(4, 4)
    np.testing.assert_array_equal(downscale(img, 2), [[2.5, 4.5], [10.5, 12.5]])


class TestCellMapping:
    ref = ReferenceGrid(4, 4)

    def test_full_scale_identity(self):
        spec = GridSpec(64, 64, 16)
        for i in range(4):
            for j in range(4):
                assert map_patch_to_cell(spec, i, j, self.ref) == i * 4 + j

    def test_half_scale_centers(self):
        half = GridSpec(32, 32, 16)
        assert map_patch_to_cell(half, 0, 0, self.ref) == 1 * 4 + 1
        assert map_patch_to_cell(half, 1, 1, self.ref) == 3 * 4 + 3

    @pytest.mark.parametrize("base,sizes,ps", [(64, [64, 32, 16], 8), (48, [48, 24, 16, 12], 4), (32, [32, 16], 8)])
    def test_total_and_matches_float_oracle(self, base, sizes, ps):
        scales = ScaleSet.square(sizes, ps)
        ref = scales.reference
        cells = scales.token_cells()
        coords = scales.token_coords()
        assert len(cells) == scales.n_tokens
        for (s, r, c), cell in zip(coords, cells):
            spec = scales.specs[s]
            assert 0 <= cell < ref.n_cells
            assert cell == center_rule(r, c, spec.rows, spec.cols, ref)


class TestCellMask:
    ref = ReferenceGrid(4, 4)

    def test_count(self):
        assert sample_cell_mask(self.ref, 0.5, 1).cells.sum() == 8
        assert sample_cell_mask(ReferenceGrid(3, 3), 0.5, 1).cells.sum() == 4

    def test_deterministic(self):
        a, b = sample_cell_mask(self.ref, 0.3, 42), sample_cell_mask(self.ref, 0.3, 42)
        assert a.cells.tolist() == b.cells.tolist()

    def test_bad_ratio(self):
        for r in (0.0, 1.0, -0.1):
            with pytest.raises(GridError):
                sample_cell_mask(self.ref, r, 0)

    def test_uniform_frequency(self):
        freq = np.mean([sample_cell_mask(self.ref, 0.5, s).cells for s in range(10_000)], axis=0)
        assert np.all(np.abs(freq - 0.5) <= 0.02)


class TestMultiscaleMask:
    scales = ScaleSet.square([64, 32], 16)

    def _mask(self, *cells):
        m = np.zeros(16, dtype=bool)
        m[list(cells)] = True
        return CellMask(m, len(cells) / 16)

    def test_corner_cell(self):
        tok = apply_multiscale_mask(self._mask(0), self.scales)
        assert tok.sum() == 1 and tok[0]
        assert not tok[16]  # half-scale (0, 0) sits on cell (1, 1)

    def test_cell_1_1(self):
        tok = apply_multiscale_mask(self._mask(5), self.scales)
        assert np.flatnonzero(tok).tolist() == [5, 16]

    def test_empty(self):
        assert not apply_multiscale_mask(self._mask(), self.scales).any()

    def test_full_scale_tokens_equal_cell_set(self):
        rng = np.random.default_rng(0)
        for seed in range(50):
            m = sample_cell_mask(self.scales.reference, rng.uniform(0.05, 0.95), seed)
            tok = apply_multiscale_mask(m, self.scales)
            assert tok[:16].tolist() == m.cells.tolist()
