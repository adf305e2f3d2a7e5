import math

import numpy as np
import pytest

from oracles import audio_oracle, ray_oracle

from samdistill import synthworld as S
from samdistill.errors import ConfigError, ContractError, GenerationError

CFG = S.WorldConfig()


def square_room(half=2.0, ceiling=2.4, heading=0.0, agent=(0.0, 0.0)):
    poly = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    return S.Room(poly, np.full(4, S.WALL), ceiling, agent_position=np.array(agent, float), agent_heading=heading)


# -- rooms -----------------------------------------------------------------


class TestRooms:
    def test_deterministic(self):
        a, b = S.sample_room(17), S.sample_room(17)
        assert np.array_equal(a.polygon, b.polygon) and np.array_equal(a.furniture, b.furniture)
        assert a.ceiling_height == b.ceiling_height and a.agent_heading == b.agent_heading

    def test_hundred_valid_rooms(self):
        for seed in range(100):
            room = S.sample_room(seed)
            S.validate_room(room)
            assert 3 <= len(room.polygon) <= 8

    def test_area_sweep_reaches_bounds(self):
        lo, hi = CFG.area_range
        areas = np.array([S.sample_room(s).area for s in range(1000)])
        assert areas.min() >= lo and areas.max() <= hi
        slack = 0.05 * (hi - lo)
        assert areas.min() <= lo + slack and areas.max() >= hi - slack

    def test_rejection_budget(self):
        cfg = S.WorldConfig(area_range=(500.0, 600.0))
        with pytest.raises(GenerationError):
            S.sample_room(0, cfg)

    def test_validate_rejects_agent_outside(self):
        with pytest.raises(ContractError):
            S.validate_room(square_room(agent=(3.0, 0.0)))

    def test_validate_rejects_low_ceiling(self):
        with pytest.raises(ContractError):
            S.validate_room(square_room(ceiling=1.0))


# -- labels ----------------------------------------------------------------


class TestLabels:
    def test_square_room_wall_normal_distance(self):
        room = square_room()
        d = S.horizontal_distance(room, [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])
        assert np.allclose(d, 2.0, atol=1e-12)
        depth, sem = S.raycast(room)
        phis = math.pi / 2 - math.pi * (np.arange(CFG.pano_height) + 0.5) / CFG.pano_height
        wall_rows = sem[:, 0] == S.WALL
        assert wall_rows.any()
        assert np.allclose(depth[wall_rows, 0] * np.cos(phis[wall_rows]), 2.0, atol=1e-12)

    def test_empty_room_voxels(self):
        room = square_room(half=6.0, ceiling=2.4)
        _, hi = S.voxelize(room)
        z = -CFG.voxel_floor_offset + (np.arange(CFG.voxel_hi) + 0.5) * CFG.voxel_extent[2] / CFG.voxel_hi
        for k, zk in enumerate(z):
            layer = hi[:, :, k]
            if zk < 0 or zk > room.ceiling_height:
                assert layer.all()
            else:
                assert not layer.any()

    def test_lo_grid_is_block_max(self):
        lo, hi = S.voxelize(S.sample_room(3))
        assert lo.shape == (8, 8, 8)
        assert np.array_equal(lo, hi.reshape(8, 2, 8, 2, 8, 2).max(axis=(1, 3, 5)))

    @pytest.mark.parametrize("seed", [0, 5, 11])
    def test_raycast_matches_brute_force(self, seed):
        room = S.sample_room(seed)
        depth, sem = S.raycast(room)
        ref_d, ref_s = ray_oracle(room)
        assert np.abs(depth - ref_d).max() < 1e-9
        assert np.array_equal(sem, ref_s)

    def test_raycast_with_furniture(self):
        room = next(r for r in map(S.sample_room, range(200)) if len(r.furniture))
        depth, sem = S.raycast(room)
        ref_d, ref_s = ray_oracle(room)
        assert np.abs(depth - ref_d).max() < 1e-9
        assert np.array_equal(sem, ref_s)
        assert np.isin(sem, S.FURNITURE_MATERIALS).any()

    def test_sample_invariants(self):
        for seed in range(10):
            s = S.generate_sample(seed)
            assert (s.depth > 0).all() and np.isfinite(s.depth).all()
            assert s.semantics.min() >= 0 and s.semantics.max() < S.NUM_CLASSES
            assert set(np.unique(s.voxels_hi)) <= {0, 1}
            assert s.audio.shape == (CFG.spec_time, CFG.spec_freq, 2)
            assert s.visual.shape == (3, CFG.pano_height, CFG.pano_width)

    def test_geometric_consistency(self):
        pitch = CFG.voxel_extent[0] / CFG.voxel_hi
        phis = math.pi / 2 - math.pi * (np.arange(CFG.pano_height) + 0.5) / CFG.pano_height
        for seed in range(5):
            room = S.sample_room(seed)
            depth, sem = S.raycast(room)
            _, hi = S.voxelize(room)
            centers = S.voxel_centers(room, CFG, CFG.voxel_hi).reshape(16, 16, 16, 3)
            k = 8  # layer just below agent height, above all furniture
            layer, solid = centers[:, :, k, :2], hi[:, :, k].astype(bool)
            a, b = room.segments
            for col in range(CFG.pano_width):
                rows = np.isin(sem[:, col], S.WALL_MATERIALS)
                th = room.agent_heading + 2 * math.pi * col / CFG.pano_width
                r = depth[rows, col] * np.cos(phis[rows])
                # depth map agrees with the polygon
                assert np.allclose(r, S.horizontal_distance(room, th)[0], atol=1e-9)
                hit = room.agent_position + r[0] * np.array([math.cos(th), math.sin(th)])
                assert S.wall_distances(room, hit).min() < 1e-9
                # the voxel grid has a solid cell next to every in-range wall hit
                c, sn = math.cos(room.agent_heading), math.sin(room.agent_heading)
                dx, dy = hit - room.agent_position
                local = np.abs([c * dx + sn * dy, -sn * dx + c * dy])
                if local.max() < CFG.voxel_extent[0] / 2 - pitch:
                    # distance from the hit to the nearest solid cell (as a square, axes in grid frame)
                    off = layer[solid] - hit
                    off = np.stack([c * off[:, 0] + sn * off[:, 1], -sn * off[:, 0] + c * off[:, 1]], 1)
                    gap = np.maximum(np.abs(off) - pitch / 2, 0.0)
                    assert np.linalg.norm(gap, axis=1).min() <= pitch
            # no solid cell sits strictly in front of the first wall along its azimuth
            rel = layer[solid] - room.agent_position
            rho = np.linalg.norm(rel, axis=1)
            wall = S.horizontal_distance(room, np.arctan2(rel[:, 1], rel[:, 0]))
            assert (rho >= wall - pitch * math.sqrt(0.5)).all()


# -- audio -----------------------------------------------------------------


class TestAudio:
    @pytest.mark.parametrize("seed", [0, 1, 2, 7])
    def test_matches_loop_oracle(self, seed):
        room = S.sample_room(seed)
        assert np.abs(S.synthesize_audio(room) - audio_oracle(room)).max() < 1e-9

    def test_left_wall_is_louder_left(self):
        room = square_room(half=2.0, agent=(0.0, 1.0))
        left = [a for a in S.arrivals(room) if a.azimuth is not None and abs(math.sin(a.azimuth) - 1) < 1e-12]
        assert len(left) == 1
        spec = S.arrival_spectrum(left[0], CFG)
        assert (spec[:, 0] >= spec[:, 1]).all() and (spec[:, 0] > spec[:, 1]).any()

    def test_scaling_shifts_wall_arrivals(self):
        room = square_room(half=1.5, agent=(0.3, -0.2), heading=0.4)
        big = room.scaled(2.0)
        wa = sorted(a.path_length for a in S.arrivals(room) if a.azimuth is not None)
        wb = sorted(a.path_length for a in S.arrivals(big) if a.azimuth is not None)
        assert np.allclose(np.array(wb), 2 * np.array(wa), atol=1e-12)
        bins = lambda xs: np.floor(np.array(xs) / CFG.path_per_bin)
        assert (np.abs(bins(wb) - 2 * bins(wa)) <= 1).all()

    def test_noise_is_seeded(self):
        room = S.sample_room(4)
        a = S.synthesize_audio(room, noise_seed=9)
        assert np.array_equal(a, S.synthesize_audio(room, noise_seed=9))
        assert not np.array_equal(a, S.synthesize_audio(room, noise_seed=10))
        assert not np.array_equal(a, S.synthesize_audio(room))

    def test_information_probe(self):
        samples = [S.generate_sample(s) for s in range(200)]
        nn, mean = S.information_probe(np.stack([s.audio for s in samples]), np.stack([s.depth for s in samples]))
        assert nn < mean


# -- datasets --------------------------------------------------------------


class TestDataset:
    def test_split_counts(self):
        assert S.split_counts(100, (0.7, 0.1, 0.2)) == [70, 10, 20]
        assert S.split_counts(2800, S.DEFAULT_SPLIT_RATIOS) == [2000, 300, 500]
        assert sum(S.split_counts(7, (0.5, 0.25, 0.25))) == 7

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            S.split_counts(10, (0.5, 0.6, -0.1))

    def test_disjoint_seeds(self):
        seeds = S.dataset_seeds(100, 3, (0.7, 0.1, 0.2))
        flat = [s for v in seeds.values() for s in v]
        assert len(flat) == len(set(flat)) == 100

    def test_build_is_byte_identical(self, tmp_path):
        m = S.build_dataset(20, 1, tmp_path / "a", (0.7, 0.1, 0.2))
        S.build_dataset(20, 1, tmp_path / "b", (0.7, 0.1, 0.2))
        for name in ("train.sdds", "val.sdds", "test.sdds", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert m["counts"] == {"train": 14, "val": 2, "test": 4}
        assert m["generator_digest"] == CFG.digest()

    def test_load_roundtrip(self, tmp_path):
        S.build_dataset(10, 2, tmp_path, (0.7, 0.1, 0.2))
        train = S.load_split(tmp_path / "train.sdds")
        first = S.generate_sample(2 * S.SEED_STRIDE)
        assert train["audio"].shape == (7, 32, 16, 2)
        assert np.array_equal(train["depth"][0], first.depth)
        assert np.array_equal(train["voxels_hi"][0], first.voxels_hi)
        manifest = S.load_manifest(tmp_path)
        assert S.world_config_from_manifest(manifest) == CFG
