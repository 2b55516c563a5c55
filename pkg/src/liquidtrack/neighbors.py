"""Spatial hash grid for fixed-radius neighbor queries.

Particles are binned into uniform cubic cells whose edge equals the query
radius, so all neighbors of a point live in the surrounding 3x3x3 block of
cells. Pair generation is fully vectorized and deterministic: candidates
are emitted in sorted-cell order, so downstream reductions see a fixed
ordering for identical inputs.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


__all__ = ["NeighborIndex"]


def _ranges(starts, counts):
    """Concatenate integer ranges [s, s+c) for paired starts/counts."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    rep = np.repeat(starts, counts)
    csum = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return rep + (np.arange(total, dtype=np.int64) - np.repeat(csum, counts))


# Half of the 26 cell offsets, lexicographically positive, so every
# cross-cell pair is generated exactly once.
_HALF_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) > (0, 0, 0)
    ],
    dtype=np.int64,
)


@njit(cache=True)
def _pairs_kernel(pos, order, cell_keys, starts, counts, cell_coords, dims, offsets, r2):
    """Emit all unordered in-radius pairs with displacements and distances.

    Two passes over the half stencil: count, then fill. Emission order is
    fixed by (cell, offset, member) order, keeping reductions downstream
    deterministic. Returned indices are original particle ids.
    """
    n_cells = len(cell_keys)
    n_off = offsets.shape[0]
    total = 0
    out_i = np.empty(0, np.int64)
    out_j = np.empty(0, np.int64)
    out_disp = np.empty((0, 3))
    out_dist = np.empty(0)
    for phase in range(2):
        if phase == 1:
            out_i = np.empty(total, np.int64)
            out_j = np.empty(total, np.int64)
            out_disp = np.empty((total, 3))
            out_dist = np.empty(total)
        k = 0
        for m in range(n_cells):
            sa, ca = starts[m], counts[m]
            # Same cell: members in sorted order, a < b.
            for ai in range(sa, sa + ca):
                for bi in range(ai + 1, sa + ca):
                    dx = pos[ai, 0] - pos[bi, 0]
                    dy = pos[ai, 1] - pos[bi, 1]
                    dz = pos[ai, 2] - pos[bi, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= r2:
                        if phase == 1:
                            out_i[k] = order[ai]
                            out_j[k] = order[bi]
                            out_disp[k, 0] = dx
                            out_disp[k, 1] = dy
                            out_disp[k, 2] = dz
                            out_dist[k] = np.sqrt(d2)
                        k += 1
            for o in range(n_off):
                cx = cell_coords[m, 0] + offsets[o, 0]
                cy = cell_coords[m, 1] + offsets[o, 1]
                cz = cell_coords[m, 2] + offsets[o, 2]
                if cx < 0 or cy < 0 or cz < 0 or cx >= dims[0] or cy >= dims[1] or cz >= dims[2]:
                    continue
                key = (cx * dims[1] + cy) * dims[2] + cz
                lo, hi = 0, n_cells
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cell_keys[mid] < key:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo >= n_cells or cell_keys[lo] != key:
                    continue
                sb, cb = starts[lo], counts[lo]
                for ai in range(sa, sa + ca):
                    for bi in range(sb, sb + cb):
                        dx = pos[ai, 0] - pos[bi, 0]
                        dy = pos[ai, 1] - pos[bi, 1]
                        dz = pos[ai, 2] - pos[bi, 2]
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 <= r2:
                            if phase == 1:
                                out_i[k] = order[ai]
                                out_j[k] = order[bi]
                                out_disp[k, 0] = dx
                                out_disp[k, 1] = dy
                                out_disp[k, 2] = dz
                                out_dist[k] = np.sqrt(d2)
                            k += 1
        if phase == 0:
            total = k
    return out_i, out_j, out_disp, out_dist


class NeighborIndex:
    """Uniform grid over particle positions with cell size equal to the radius."""

    def __init__(self, positions: np.ndarray, cell_size: float):
        if cell_size <= 0.0:
            raise ValueError(f"cell size must be positive, got {cell_size}")
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        self.cell_size = float(cell_size)
        n = self.positions.shape[0]
        if n == 0:
            self._order = np.empty(0, dtype=np.int64)
            self._cell_coords = np.empty((0, 3), dtype=np.int64)
            self._starts = np.empty(0, dtype=np.int64)
            self._counts = np.empty(0, dtype=np.int64)
            self._dims = np.ones(3, dtype=np.int64)
            self._origin = np.zeros(3, dtype=np.int64)
            return
        cells = np.floor(self.positions / self.cell_size).astype(np.int64)
        self._origin = cells.min(axis=0)
        rel = cells - self._origin
        self._dims = rel.max(axis=0) + 1
        keys = (rel[:, 0] * self._dims[1] + rel[:, 1]) * self._dims[2] + rel[:, 2]
        order = np.argsort(keys, kind="stable")
        self._order = order
        sorted_keys = keys[order]
        unique_keys, starts, counts = np.unique(
            sorted_keys, return_index=True, return_counts=True
        )
        self._unique_keys = unique_keys
        self._starts = starts.astype(np.int64)
        self._counts = counts.astype(np.int64)
        # 3D coordinates of each occupied cell, for offset arithmetic.
        self._cell_coords = rel[order[starts]]

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def _keys_of(self, coords):
        """Linear keys for relative cell coordinates; -1 where out of range."""
        valid = np.all((coords >= 0) & (coords < self._dims), axis=1)
        keys = (coords[:, 0] * self._dims[1] + coords[:, 1]) * self._dims[2] + coords[:, 2]
        return np.where(valid, keys, -1)

    def query(self, point, radius: float) -> np.ndarray:
        """Indices of all particles within `radius` of `point` (inclusive)."""
        if self.n == 0:
            return np.empty(0, dtype=np.int64)
        point = np.asarray(point, dtype=np.float64)
        lo = np.floor((point - radius) / self.cell_size).astype(np.int64) - self._origin
        hi = np.floor((point + radius) / self.cell_size).astype(np.int64) - self._origin
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self._dims - 1)
        if np.any(hi < lo):
            return np.empty(0, dtype=np.int64)
        axes = [np.arange(lo[k], hi[k] + 1) for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        keys = self._keys_of(grid)
        pos = np.searchsorted(self._unique_keys, keys)
        pos = np.clip(pos, 0, len(self._unique_keys) - 1)
        hit = (keys >= 0) & (self._unique_keys[pos] == keys)
        members = _ranges(self._starts[pos[hit]], self._counts[pos[hit]])
        ids = self._order[members]
        d2 = np.sum((self.positions[ids] - point) ** 2, axis=1)
        return ids[d2 <= radius * radius]

    def pairs(self):
        """All unordered pairs (i, j) within the cell size of each other.

        Returns (i, j, disp, dist) where disp = positions[i] - positions[j].
        Each pair appears exactly once; the inclusive radius is cell_size.
        """
        if self.n < 2:
            e = np.empty(0, dtype=np.int64)
            return e, e, np.empty((0, 3)), np.empty(0)
        pos_sorted = self.positions[self._order]
        if _HAVE_NUMBA:
            return _pairs_kernel(
                pos_sorted,
                self._order,
                self._unique_keys,
                self._starts,
                self._counts,
                self._cell_coords,
                self._dims,
                _HALF_OFFSETS,
                self.cell_size * self.cell_size,
            )
        a_parts = []
        b_parts = []

        # Same-cell pairs: cartesian product filtered to sorted-order a < b.
        a, b = self._cell_cartesian(self._matched_self())
        keep = a < b
        a_parts.append(a[keep])
        b_parts.append(b[keep])

        for off in _HALF_OFFSETS:
            matched = self._matched_offset(off)
            if matched is None:
                continue
            a, b = self._cell_cartesian(matched)
            a_parts.append(a)
            b_parts.append(b)

        cand_a = np.concatenate(a_parts)
        cand_b = np.concatenate(b_parts)
        dx = pos_sorted[cand_a, 0] - pos_sorted[cand_b, 0]
        dy = pos_sorted[cand_a, 1] - pos_sorted[cand_b, 1]
        dz = pos_sorted[cand_a, 2] - pos_sorted[cand_b, 2]
        d2 = dx * dx
        d2 += dy * dy
        d2 += dz * dz
        keep = d2 <= self.cell_size * self.cell_size
        cand_a, cand_b = cand_a[keep], cand_b[keep]
        disp = np.column_stack([dx[keep], dy[keep], dz[keep]])
        return self._order[cand_a], self._order[cand_b], disp, np.sqrt(d2[keep])

    def _matched_self(self):
        idx = np.arange(len(self._starts), dtype=np.int64)
        return idx, idx

    def _matched_offset(self, off):
        tgt = self._cell_coords + off
        keys = self._keys_of(tgt)
        pos = np.searchsorted(self._unique_keys, keys)
        pos = np.clip(pos, 0, len(self._unique_keys) - 1)
        hit = (keys >= 0) & (self._unique_keys[pos] == keys)
        if not np.any(hit):
            return None
        src = np.nonzero(hit)[0].astype(np.int64)
        return src, pos[hit]

    def _cell_cartesian(self, matched):
        """Sorted-order index pairs for the cartesian product of matched cells."""
        src, tgt = matched
        sa, ca = self._starts[src], self._counts[src]
        sb, cb = self._starts[tgt], self._counts[tgt]
        members_a = _ranges(sa, ca)
        per_member_cnt = np.repeat(cb, ca)
        per_member_start = np.repeat(sb, ca)
        a = np.repeat(members_a, per_member_cnt)
        b = _ranges(per_member_start, per_member_cnt)
        return a, b
