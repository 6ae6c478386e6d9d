import numpy as np
import pytest
import torch

from mvconsensus.camera import CameraRig, Line3, look_at
from mvconsensus.simulator import SceneConfig, make_scene

torch.set_default_dtype(torch.float64)


def random_camera(rng: np.random.Generator, width: int = 128, height: int = 96):
    """Camera at a random spot 4-12 m from the origin, looking near it."""
    direction = rng.normal(size=3)
    direction[2] = abs(direction[2]) * 0.3
    direction /= np.linalg.norm(direction)
    eye = direction * rng.uniform(4.0, 12.0)
    target = rng.normal(scale=0.5, size=3)
    return look_at(eye, target, focal=rng.uniform(80.0, 300.0), width=width, height=height)


def ring_rig(n: int = 4, radius: float = 10.0, target=(0.0, 0.0, 0.0), height: float = 0.0, size=(128, 128)) -> CameraRig:
    cams = []
    for c in range(n):
        a = 2 * np.pi * c / n
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height]) + np.asarray(target)
        cams.append(look_at(eye, target, focal=200.0, width=size[0], height=size[1]))
    return CameraRig(tuple(cams))


def random_lines(rng: np.random.Generator, n: int) -> list[Line3]:
    return [Line3.from_points(rng.uniform(-2, 2, 3), rng.normal(size=3)) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_scene():
    return make_scene(SceneConfig(frames=20))


def consensus_rig(C: int, radius: float = 8.0) -> CameraRig:
    """Ring of C cameras; two cameras sit 90 degrees apart so their rays are not collinear."""
    from mvconsensus.camera import look_at as _look_at
    angles = [0.0, np.pi / 2] if C == 2 else [2 * np.pi * c / C for c in range(C)]
    return CameraRig(tuple(
        _look_at((radius * np.cos(a), radius * np.sin(a), 1.0), (0.0, 0.0, 0.0), 200.0, 128, 128) for a in angles
    ))


def consensus_trial(rng, rig, grid, eta: float = 0.2, distractor: float = 0.0):
    """One randomized fusion trial; returns (argmax voxel, true voxel).

    The subject sits at a random supported voxel center. Every view puts
    ``1 - eta`` on the cell it projects to and spreads ``eta`` randomly over
    the other interior cells. With ``distractor > 0`` camera 0 additionally
    moves a random share (up to ``distractor``) of its mass onto one wrong cell.
    """
    from mvconsensus.camera import project as _project
    from mvconsensus.proposal_grid import GridSpec2D, cell_index, fuse, visible_support, voxel_cells

    spec = GridSpec2D()
    interior = spec.interior_mask().numpy()
    support = visible_support(voxel_cells(rig, grid))
    true_voxel = int(rng.choice(support))
    X = grid.centers[true_voxel]
    maps = []
    for c, cam in enumerate(rig):
        i = cell_index(spec, *(float(x) for x in _project(cam, X)))
        others = np.flatnonzero(interior & (np.arange(spec.n_cells) != i))
        p = np.zeros(spec.n_cells)
        p[others] = rng.dirichlet(np.ones(len(others))) * eta
        p[i] = 1 - eta
        if distractor > 0 and c == 0:
            m = rng.uniform(0.0, distractor)
            p *= 1 - m
            p[int(rng.choice(others))] += m
        maps.append(torch.tensor(p))
    q = fuse(maps, rig, grid).q
    return int(torch.argmax(q)), true_voxel
