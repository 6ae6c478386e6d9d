import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import consensus_rig, consensus_trial, ring_rig
from mvconsensus.autodiff import check_grad
from mvconsensus.errors import EmptySupport, InvalidSpec
from mvconsensus.proposal_grid import (
    GridSpec2D, ProbMap2D, VoxelDistribution, build_grid, cell_index, fuse, marginalize, visible_support, voxel_cells,
)


def test_build_grid_small_lattice():
    g = build_grid((0, 0, 0), 2.0, (2, 2, 2))
    expected = set(itertools.product((-0.5, 0.5), repeat=3))
    assert {tuple(map(float, c)) for c in g.centers} == expected


@pytest.mark.parametrize("dims,side,V", [(16, 8.0, 4096), (10, 4.0, 1000), (16, 12.0, 4096), (6, 4.0, 216), (24, 8.0, 13824)])
def test_build_grid_published_sizes(dims, side, V):
    g = build_grid((1.0, -2.0, 0.5), side, dims)
    assert g.V == V
    lo = g.centers.min(dim=0).values
    hi = g.centers.max(dim=0).values
    np.testing.assert_allclose((hi - lo).numpy(), side - side / dims, atol=1e-9)
    np.testing.assert_allclose(g.centers.mean(dim=0).numpy(), [1.0, -2.0, 0.5], atol=1e-9)


def test_build_grid_rejects_bad_specs():
    for dims, side in (((1, 2, 2), 1.0), ((2, 2), 1.0), ((2, 2, 2), 0.0), ((2, 2, 2), float("inf"))):
        with pytest.raises(InvalidSpec):
            build_grid((0, 0, 0), side, dims)


def test_cell_index_examples():
    spec = GridSpec2D()
    assert cell_index(spec, 0, 0) == 0
    assert cell_index(spec, 64, 0) == 4
    assert cell_index(spec, 128, 50) is None
    assert cell_index(spec, -0.1, 50) is None
    assert cell_index(spec, 127.9, 127.9) == 63


def test_gridspec_validation():
    with pytest.raises(InvalidSpec):
        GridSpec2D(1, 8)
    with pytest.raises(InvalidSpec):
        GridSpec2D(8, 8, 0, 10)


def test_probmap_check():
    spec = GridSpec2D()
    p = spec.interior_mask().double()
    ProbMap2D(spec, p / p.sum()).check()
    with pytest.raises(InvalidSpec):
        ProbMap2D(spec, torch.full((64,), 1 / 64)).check()
    with pytest.raises(InvalidSpec):
        ProbMap2D(spec, p).check()


def _uniform_interior():
    p = GridSpec2D().interior_mask().double()
    return p / p.sum()


def _product_oracle(maps, cells, support):
    q = np.zeros(cells.shape[1])
    for j in support:
        q[j] = np.prod([max(float(m[cells[c, j]]), 1e-12) for c, m in enumerate(maps)])
    return q / q.sum()


def test_fuse_uniform_maps_give_uniform_q():
    rig = ring_rig(3, 8.0)
    grid = build_grid((0, 0, 0), 2.0, 6)
    dist = fuse([_uniform_interior()] * 3, rig, grid)
    sup = torch.from_numpy(dist.support)
    inner = dist.q[sup]
    interior_cells = GridSpec2D().interior_mask().numpy()[voxel_cells(rig, grid)[:, dist.support]].all(axis=0)
    np.testing.assert_allclose(inner[torch.from_numpy(interior_cells)].numpy(), float(inner.max()), rtol=1e-12)
    assert abs(float(dist.q.sum()) - 1) < 1e-9


def _separated_pair(cells, support):
    """Two voxels whose cells differ in every view and that no third voxel can mimic."""
    for a, b in itertools.combinations(support, 2):
        if (cells[:, a] == cells[:, b]).any():
            continue
        allowed = np.stack([np.isin(cells[c], [cells[c, a], cells[c, b]]) for c in range(cells.shape[0])]).all(axis=0)
        if set(np.flatnonzero(allowed)) == {a, b}:
            return a, b
    raise AssertionError("no separated voxel pair")


def test_fuse_two_camera_example():
    rig = consensus_rig(2)
    grid = build_grid((0, 0, 0), 4.0, 4)
    cells = voxel_cells(rig, grid)
    a, b = _separated_pair(cells, visible_support(cells))
    maps = []
    for c, (pa, pb) in enumerate(((0.8, 0.2), (0.6, 0.4))):
        p = torch.zeros(64, dtype=torch.float64)
        p[cells[c, a]] = pa
        p[cells[c, b]] = pb
        maps.append(p)
    q = fuse(maps, rig, grid).q
    assert abs(float(q[a]) - 6 / 7) < 1e-9
    assert abs(float(q[b]) - 1 / 7) < 1e-9


def test_fuse_zero_probability_suppresses():
    rig = consensus_rig(3)
    grid = build_grid((0, 0, 0), 4.0, 4)
    cells = voxel_cells(rig, grid)
    sup = visible_support(cells)
    a = int(sup[0])
    maps = [_uniform_interior().clone() for _ in range(3)]
    maps[1][cells[1, a]] = 0.0
    maps[1] /= maps[1].sum()
    q = fuse(maps, rig, grid).q
    others = q[torch.from_numpy(sup)]
    assert float(q[a]) < 1e-6 * float(others.max())


def test_fuse_matches_product_oracle(rng):
    rig = consensus_rig(3)
    grid = build_grid((0, 0, 0), 4.0, 5)
    cells = voxel_cells(rig, grid)
    for _ in range(5):
        maps = [torch.tensor(rng.dirichlet(np.ones(64))) for _ in range(3)]
        dist = fuse(maps, rig, grid)
        np.testing.assert_allclose(dist.q.numpy(), _product_oracle(maps, cells, dist.support), rtol=1e-9, atol=1e-15)


def test_fuse_support_excludes_invisible_voxels():
    rig = ring_rig(3, 8.0)
    grid = build_grid((0, 0, 0), 12.0, 6)
    dist = fuse([_uniform_interior()] * 3, rig, grid)
    assert 0 < len(dist.support) < grid.V
    outside = np.setdiff1d(np.arange(grid.V), dist.support)
    assert float(dist.q[torch.from_numpy(outside)].abs().max()) == 0.0


def test_fuse_errors():
    rig = ring_rig(3, 8.0)
    with pytest.raises(EmptySupport):
        fuse([_uniform_interior()] * 3, rig, build_grid((0, 0, 200.0), 1.0, 2))
    with pytest.raises(InvalidSpec):
        fuse([_uniform_interior()] * 2, rig, build_grid((0, 0, 0), 1.0, 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), perm=st.permutations([0, 1, 2]))
def test_fuse_permutation_invariant(seed, perm):
    rng = np.random.default_rng(seed)
    rig = consensus_rig(3)
    grid = build_grid((0, 0, 0), 4.0, 4)
    maps = [torch.tensor(rng.dirichlet(np.ones(64))) for _ in range(3)]
    from mvconsensus.camera import CameraRig
    shuffled = CameraRig(tuple(rig[i] for i in perm))
    a = fuse(maps, rig, grid).q
    b = fuse([maps[i] for i in perm], shuffled, grid).q
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fuse_normalized(seed):
    rng = np.random.default_rng(seed)
    maps = [torch.tensor(rng.dirichlet(np.full(64, 0.3))) for _ in range(3)]
    q = fuse(maps, consensus_rig(3), build_grid((0, 0, 0), 4.0, 4)).q
    assert abs(float(q.sum()) - 1) <= 1e-9
    assert float(q.min()) >= 0


def test_fuse_gradient():
    rng = np.random.default_rng(3)
    rig = consensus_rig(2)
    grid = build_grid((0, 0, 0), 4.0, 4)
    x0 = np.concatenate([rng.dirichlet(np.ones(64)) for _ in range(2)])
    weights = torch.tensor(rng.normal(size=grid.V))

    def f(x):
        return (fuse([x[:64], x[64:]], rig, grid).q * weights).sum()

    rep = check_grad(f, x0, h=1e-7, tol=1e-4, engine="torch")
    assert rep.ok, rep


def test_fuse_monotone_in_own_cell():
    rng = np.random.default_rng(9)
    rig = consensus_rig(3)
    grid = build_grid((0, 0, 0), 4.0, 4)
    cells = voxel_cells(rig, grid)
    maps = [torch.tensor(rng.dirichlet(np.ones(64))) for _ in range(3)]
    j = int(visible_support(cells)[5])
    base = fuse(maps, rig, grid).q
    maps[0] = maps[0].clone()
    maps[0][cells[0, j]] += 0.3
    maps[0] /= maps[0].sum()
    raised = fuse(maps, rig, grid).q
    peers = [k for k in visible_support(cells) if (cells[1:, k] == cells[1:, j]).all()]
    rank = lambda q: sum(float(q[k]) > float(q[j]) for k in peers)
    assert rank(raised) <= rank(base)


def test_concentration_small_sample():
    rng = np.random.default_rng(0)
    grid = build_grid((0, 0, 0), 4.0, 4)
    for C in (2, 3, 4):
        rig = consensus_rig(C)
        hits = sum(a == b for a, b in (consensus_trial(rng, rig, grid) for _ in range(100)))
        assert hits >= 99


def test_marginalize_single_voxel():
    rig = ring_rig(3, 8.0)
    grid = build_grid((0, 0, 0), 2.0, 4)
    cells = voxel_cells(rig, grid)
    sup = visible_support(cells)
    q = torch.zeros(grid.V, dtype=torch.float64)
    q[sup[3]] = 1.0
    m = marginalize(VoxelDistribution(grid, q, sup), rig, 1)
    assert int((m != 0).sum()) == 1
    assert float(m[cells[1, sup[3]]]) == 1.0


def test_marginalize_uniform_counts(rng):
    rig = ring_rig(3, 8.0)
    grid = build_grid((0, 0, 0), 2.0, 4)
    cells = voxel_cells(rig, grid)
    sup = visible_support(cells)
    q = torch.zeros(grid.V, dtype=torch.float64)
    q[sup] = 1.0 / len(sup)
    m = marginalize(VoxelDistribution(grid, q, sup), rig, 2)
    counts = np.bincount(cells[2, sup], minlength=64) / len(sup)
    np.testing.assert_allclose(m.numpy(), counts, atol=1e-15)

    r = torch.zeros(grid.V, dtype=torch.float64)
    r[sup] = torch.tensor(rng.dirichlet(np.ones(len(sup))))
    assert abs(float(marginalize(VoxelDistribution(grid, r, sup), rig, 0).sum()) - 1) <= 1e-9
