"""Compare the numba and numpy kernel backends on generator-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from samdistill import synthworld as S
from samdistill.kernels import _numba, _numpy


def timed(fn, args, repeat):
    fn(*args)  # warm-up (includes JIT compile for numba)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def cases():
    cfg = S.WorldConfig()
    room = next(r for r in map(S.sample_room, range(100)) if len(r.furniture))
    a, b = room.segments
    rng = np.random.default_rng(0)
    centers = S.voxel_centers(room, cfg, cfg.voxel_hi)
    surf = rng.random((600, 3)), rng.random((600, 3))
    return {
        "ray_segment_distances": lambda k: (k.ray_segment_distances,
                                            (room.agent_position, np.linspace(0, 2 * np.pi, 64, endpoint=False), a, b)),
        "raycast_panorama": lambda k: (k.raycast_panorama,
                                       (room.agent_position, cfg.agent_height, room.ceiling_height, room.agent_heading,
                                        a, b, room.wall_materials, room.furniture, room.furniture_materials,
                                        cfg.pano_width, cfg.pano_height, S.FLOOR, S.CEILING)),
        "voxel_solid": lambda k: (k.voxel_solid, (centers, room.polygon, room.ceiling_height, room.furniture)),
        "nearest_l1": lambda k: (k.nearest_l1, surf),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, make in cases().items():
        t_np = timed(*make(_numpy), args.repeat)
        t_nb = timed(*make(_numba), args.repeat)
        print(f"{name:24s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
