import numpy as np
import pytest

from samdistill import engine as E
from samdistill import models as M
from samdistill import tensor as T
from samdistill.errors import ConfigError, DimensionError
from samdistill.features import FeatureMap

B = 2


def spec(rng, b=B):
    return rng.random((b, 32, 16, 2))


class TestPatchify:
    @pytest.mark.parametrize("mode,tokens,dim", [
        ("TIME_BANDS", 32, 32), ("FREQ_BANDS", 16, 64), ("GRID_2D", 32, 32), ("MONO", 32, 16),
    ])
    def test_shapes(self, mode, tokens, dim, rng):
        assert M.raw_patches(spec(rng), mode).shape == (B, tokens, dim)

    def test_time_band_is_one_column(self, rng):
        s = spec(rng)
        assert np.array_equal(M.raw_patches(s, "TIME_BANDS")[1, 5], s[1, 5].ravel())

    def test_freq_band_is_one_row(self, rng):
        s = spec(rng)
        assert np.array_equal(M.raw_patches(s, "FREQ_BANDS")[0, 3], s[0, :, 3].ravel())

    def test_grid_patch_block(self, rng):
        s = spec(rng)
        # token (1, 2) of a 8 x 4 grid covers time 4..7, freq 8..11
        assert np.array_equal(M.raw_patches(s, "GRID_2D", 4)[0, 1 * 4 + 2], s[0, 4:8, 8:12].ravel())

    def test_grid_needs_divisible_patch(self, rng):
        with pytest.raises(ConfigError):
            M.raw_patches(spec(rng), "GRID_2D", 5)

    def test_needs_two_channels(self, rng):
        with pytest.raises(DimensionError):
            M.raw_patches(rng.random((1, 32, 16, 3)), "TIME_BANDS")

    def test_zero_spectrogram_gives_bias(self, rng):
        p = M.Patchify("TIME_BANDS", (32, 16), 8, rng)
        out = p(np.zeros((1, 32, 16, 2))).values.data
        assert np.array_equal(out, np.broadcast_to(p.proj.bias.data, out.shape))


def _student(task="depth", **kw):
    return M.build_student(M.ModelConfig(task=task, channels=8, num_heads=2, k_last=4, **kw), seed=1)


class TestShapes:
    @pytest.mark.parametrize("task,shape", [("depth", (B, 32, 64)), ("segmentation", (B, 9, 32, 64))])
    def test_2d_teacher(self, task, shape, rng):
        net = M.build_teacher(M.ModelConfig(task=task, channels=8, num_heads=2))
        p = net(rng.random((B, 3, 32, 64)))
        assert p.out.shape == shape
        assert {i: p.features[i].grid for i in p.features} == {1: (16, 32), 2: (8, 16), 3: (4, 8), 4: (2, 4)}
        assert (p.aux is not None) == (task == "segmentation")

    def test_depth_is_positive_and_starts_near_two(self, rng):
        net = M.build_teacher(M.ModelConfig(task="depth", channels=8, num_heads=2))
        out = net(rng.random((B, 3, 32, 64))).out.data
        assert (out > 0).all() and abs(np.median(out) - 2.0) < 0.5

    @pytest.mark.parametrize("task", ["depth", "segmentation"])
    @pytest.mark.parametrize("mode", ["TIME_BANDS", "FREQ_BANDS", "GRID_2D", "MONO"])
    def test_2d_student(self, task, mode, rng):
        net = _student(task, patch_mode=mode)
        p = net(spec(rng))
        assert p.out.shape[-2:] == (32, 64)
        for i in (3, 4):
            assert p.features[i].values.shape == (B, np.prod(net.cfg.visual_grid(i)), 8)

    def test_voxel_teacher_and_3d_student(self, rng):
        cfg = M.ModelConfig(task="voxel", channels=8, num_heads=2, k_last=4)
        teacher = M.build_teacher(cfg)
        tp = teacher(rng.random((B, 8, 8, 8)))
        assert tp.out.shape == (B, 16, 16, 16)
        assert tp.features[3].grid == (8, 8, 8) and tp.features[4].grid == (4, 4, 4)
        student = M.build_3d_student(cfg, 0, teacher)
        sp = student(spec(rng))
        assert sp.out.shape == (B, 16, 16, 16)
        assert student.sam_blocks[3].config.audio_resolution == (4, 1)
        assert sp.features[3].grid == (8, 8, 8) and sp.features[3].values.shape == (B, 512, 8)

    def test_3d_student_rejects_mismatched_teacher(self):
        t = M.build_teacher(M.ModelConfig(task="voxel", channels=16, num_heads=2))
        with pytest.raises(ConfigError):
            M.build_3d_student(M.ModelConfig(task="voxel", channels=8, num_heads=2), 0, t)

    def test_voxel_levels_only(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(task="voxel", sam_layers=(1, 3))

    def test_k_schedule_applied(self):
        net = M.build_student(M.ModelConfig(channels=8, num_heads=2, sam_layers=(1, 2, 3, 4), k_last=64))
        assert [net.sam_blocks[i].bank.num_embeddings for i in (1, 2, 3, 4)] == [1, 4, 16, 64]


class TestBehaviour:
    def test_mono_ignores_channel_swap(self, rng):
        net = _student(patch_mode="MONO")
        s = spec(rng)
        a = net(s).out.data
        b = net(s[..., ::-1]).out.data
        assert np.array_equal(a, b)

    def test_binaural_sees_channel_swap(self, rng):
        net = _student(patch_mode="TIME_BANDS")
        for p in net.parameters():
            p.data = rng.normal(0, 0.3, p.shape)
        s = spec(rng)
        assert not np.allclose(net(s).out.data, net(s[..., ::-1]).out.data)

    def test_oracle_reads_teacher_features(self, rng):
        cfg = M.ModelConfig(channels=8, num_heads=2, sam_layers=(), oracle_layers=(1, 2, 3, 4))
        net = M.build_student(cfg)
        with pytest.raises(ConfigError):
            net(spec(rng))
        feats = {i: FeatureMap(T.Tensor(rng.random((B, np.prod(cfg.visual_grid(i)), 8))), cfg.visual_grid(i))
                 for i in cfg.levels}
        p = net(spec(rng), feats)
        assert np.array_equal(p.features[3].values.data, feats[3].values.data)

    def test_same_seed_same_parameters(self):
        a, b = _student(), _student()
        assert a.checksum() == b.checksum()
        assert M.build_student(a.cfg, seed=2).checksum() != a.checksum()

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        cfg = E.TrainConfig(channels=8, num_heads=2, k_last=4, seed=3)
        net = M.build_student(cfg.model_config(), cfg.seed)
        for p in net.parameters():
            p.data = rng.normal(0, 0.1, p.shape)
        E.save_model(tmp_path / "s.sdck", net, cfg.resolved())
        back, cfg2 = E.load_model(tmp_path / "s.sdck")
        s = spec(rng)
        assert cfg2 == cfg.resolved()
        assert np.array_equal(back(s).out.data, net(s).out.data)
