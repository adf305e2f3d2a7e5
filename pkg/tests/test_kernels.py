import os
import subprocess
import sys

import numpy as np
import pytest

from samdistill import synthworld as S
from samdistill.kernels import _numpy

nb = pytest.importorskip("samdistill.kernels._numba")


def _room_args(seed):
    room = S.sample_room(seed)
    a, b = room.segments
    return room, a, b


@pytest.mark.parametrize("seed", range(5))
def test_ray_segment_distances_agree(seed):
    room, a, b = _room_args(seed)
    th = np.random.default_rng(seed).uniform(0, 2 * np.pi, 50)
    d0, i0 = _numpy.ray_segment_distances(room.agent_position, th, a, b)
    d1, i1 = nb.ray_segment_distances(room.agent_position, th, a, b)
    assert np.allclose(d0, d1, rtol=0, atol=1e-12) and np.array_equal(i0, i1)


@pytest.mark.parametrize("seed", [0, 3, 8, 21])
def test_raycast_panorama_agree(seed):
    room, a, b = _room_args(seed)
    args = (room.agent_position, 1.5, room.ceiling_height, room.agent_heading, a, b, room.wall_materials,
            room.furniture, room.furniture_materials, 64, 32, S.FLOOR, S.CEILING)
    d0, s0 = _numpy.raycast_panorama(*args)
    d1, s1 = nb.raycast_panorama(*args)
    assert np.abs(d0 - d1).max() < 1e-12 and np.array_equal(s0, s1)


@pytest.mark.parametrize("seed", range(5))
def test_points_in_polygon_and_voxels_agree(seed):
    room, _, _ = _room_args(seed)
    pts = np.random.default_rng(seed).uniform(-5, 5, (500, 3))
    assert np.array_equal(_numpy.points_in_polygon(pts[:, :2], room.polygon), nb.points_in_polygon(pts[:, :2], room.polygon))
    assert np.array_equal(
        _numpy.voxel_solid(pts, room.polygon, room.ceiling_height, room.furniture),
        nb.voxel_solid(pts, room.polygon, room.ceiling_height, room.furniture),
    )


def test_nearest_l1_agree(rng):
    p, q = rng.random((40, 3)), rng.random((30, 3))
    d0, j0 = _numpy.nearest_l1(p, q)
    d1, j1 = nb.nearest_l1(p, q)
    assert np.allclose(d0, d1, atol=1e-15) and np.array_equal(j0, j1)


def test_env_switch_selects_numpy():
    env = dict(os.environ, SAMDISTILL_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "import samdistill.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_samples_identical_across_backends(tmp_path):
    code = ("import sys, numpy as np; from samdistill import synthworld as S;"
            "np.save(sys.argv[1], np.concatenate([v.ravel() for v in S.generate_sample(12).as_arrays().values()]))")
    runs = []
    for flag in ("0", "1"):
        out = tmp_path / f"sample_{flag}.npy"
        env = dict(os.environ, SAMDISTILL_NUMBA=flag)
        subprocess.run([sys.executable, "-c", code, str(out)], env=env, check=True)
        runs.append(np.load(out))
    assert np.abs(runs[0] - runs[1]).max() < 1e-12
