"""Toy teacher and student networks.

2-D tasks (depth, segmentation) share a four-stage stride-2 pyramid:
visual levels 1..4 sit on 16x32, 8x16, 4x8 and 2x4 grids for a 32x64 panorama.
The 3-D teacher is a two-level U-Net over the 8^3 occupancy grid; its
features are exposed as levels 3 (8^3) and 4 (4^3, the bottleneck) so the
same SAM layer names apply to every task.

A student turns the spectrogram into a token grid, runs a stride-2 token
encoder to get a_1..a_4, and feeds each decoder level either a SAM-aligned
feature, a nearest-resampled audio feature, or (oracle ablation) the
teacher's own feature.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .features import FeatureMap, nearest_resample
from .nn import Conv, Linear, Module
from .sam import SamBlock, SamConfig, k_schedule, oracle_substitute
from .tensor import Tensor

NUM_CLASSES = 9
DEPTH_INIT = 2.0


class PatchMode(str, enum.Enum):
    TIME_BANDS = "TIME_BANDS"
    FREQ_BANDS = "FREQ_BANDS"
    GRID_2D = "GRID_2D"
    MONO = "MONO"


def _canon_task(task: str) -> str:
    task = "voxel" if task == "3d" else task
    if task not in ("depth", "segmentation", "voxel"):
        raise ConfigError(f"unknown task {task!r}")
    return task


@dataclass(frozen=True)
class ModelConfig:
    task: str = "depth"
    channels: int = 32
    visual_shape: tuple[int, int] = (32, 64)
    spec_shape: tuple[int, int] = (32, 16)
    voxel_lo: int = 8
    voxel_hi: int = 16
    patch_mode: PatchMode = PatchMode.TIME_BANDS
    patch_size: int = 4
    sam_layers: tuple[int, ...] = (3, 4)
    oracle_layers: tuple[int, ...] = ()
    k_last: int = 64
    num_heads: int = 4
    temperature: float = 1.0
    spatial: bool = True

    def __post_init__(self):
        object.__setattr__(self, "task", _canon_task(self.task))
        object.__setattr__(self, "patch_mode", PatchMode(self.patch_mode))
        object.__setattr__(self, "sam_layers", tuple(sorted(set(self.sam_layers))))
        object.__setattr__(self, "oracle_layers", tuple(sorted(set(self.oracle_layers))))
        bad = set(self.sam_layers) | set(self.oracle_layers)
        if not bad <= set(self.levels):
            raise ConfigError(f"task {self.task} has levels {self.levels}; got SAM/oracle layers {sorted(bad)}")
        if set(self.sam_layers) & set(self.oracle_layers):
            raise ConfigError("a layer cannot be both SAM-aligned and oracle-substituted")
        if self.channels % self.num_heads:
            raise ConfigError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")
        h, w = self.visual_shape
        if h % 16 or w % 16:
            raise ConfigError(f"visual shape {self.visual_shape} must be divisible by 16")
        if self.voxel_hi != 2 * self.voxel_lo or self.voxel_lo % 2:
            raise ConfigError("voxel_hi must be 2 * voxel_lo and voxel_lo even")

    @property
    def levels(self) -> tuple[int, ...]:
        return (3, 4) if self.task == "voxel" else (1, 2, 3, 4)

    def visual_grid(self, level: int) -> tuple[int, ...]:
        if self.task == "voxel":
            n = self.voxel_lo // (2 ** (level - 3))
            return (n, n, n)
        h, w = self.visual_shape
        return (h // 2**level, w // 2**level)

    @property
    def out_channels(self) -> int:
        return NUM_CLASSES if self.task == "segmentation" else 1


# -- audio side ------------------------------------------------------------


def patch_grid(mode: PatchMode, spec_shape: tuple[int, int], patch_size: int) -> tuple[tuple[int, int], int]:
    """(token grid, raw patch dimension) for a W' x H' x 2 spectrogram."""
    mode = PatchMode(mode)
    wt, hf = spec_shape
    if mode is PatchMode.TIME_BANDS:
        return (wt, 1), 2 * hf
    if mode is PatchMode.MONO:
        return (wt, 1), hf
    if mode is PatchMode.FREQ_BANDS:
        return (1, hf), 2 * wt
    if wt % patch_size or hf % patch_size:
        raise ConfigError(f"spectrogram {spec_shape} not divisible by patch size {patch_size}")
    return (wt // patch_size, hf // patch_size), 2 * patch_size * patch_size


def raw_patches(spec: np.ndarray, mode: PatchMode, patch_size: int = 4) -> np.ndarray:
    """(B, W', H', 2) spectrograms -> (B, A, D) flattened patches."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim == 3:
        spec = spec[None]
    b, wt, hf, ch = spec.shape
    if ch != 2:
        raise DimensionError(f"expected 2 audio channels, got {ch}")
    mode = PatchMode(mode)
    if mode is PatchMode.TIME_BANDS:
        return spec.reshape(b, wt, hf * 2)
    if mode is PatchMode.MONO:
        return spec.mean(-1)
    if mode is PatchMode.FREQ_BANDS:
        return spec.transpose(0, 2, 1, 3).reshape(b, hf, wt * 2)
    p = patch_size
    if wt % p or hf % p:
        raise ConfigError(f"spectrogram ({wt}, {hf}) not divisible by patch size {p}")
    x = spec.reshape(b, wt // p, p, hf // p, p, 2).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (wt // p) * (hf // p), p * p * 2)


class Patchify(Module):
    def __init__(self, mode: PatchMode, spec_shape: tuple[int, int], channels: int, rng: np.random.Generator,
                 patch_size: int = 4):
        self.mode = PatchMode(mode)
        self.patch_size = patch_size
        self.grid, dim = patch_grid(self.mode, spec_shape, patch_size)
        self.proj = Linear(dim, channels, rng)

    def __call__(self, spec) -> FeatureMap:
        return FeatureMap(self.proj(Tensor(raw_patches(spec, self.mode, self.patch_size))), self.grid)


def _stage_geometry(grid: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    kernel = tuple(3 if g >= 2 else 1 for g in grid)
    stride = tuple(2 if g >= 2 else 1 for g in grid)
    return kernel, stride


def _downsampled(grid: tuple[int, ...]) -> tuple[int, ...]:
    return tuple((g + 1) // 2 if g >= 2 else 1 for g in grid)


class AudioEncoder(Module):
    """Four stride-2 stages over the token grid; axes of length 1 are left alone."""

    def __init__(self, grid: tuple[int, int], channels: int, rng: np.random.Generator):
        self.grids = []
        self.stages = []
        g = tuple(grid)
        for _ in range(4):
            kernel, stride = _stage_geometry(g)
            self.stages.append(Conv(channels, channels, kernel, rng, stride=stride))
            g = _downsampled(g)
            self.grids.append(g)

    def __call__(self, tokens: FeatureMap) -> dict[int, FeatureMap]:
        x = tokens.to_dense()
        feats = {}
        for i, stage in enumerate(self.stages, start=1):
            x = T.relu(stage(x))
            feats[i] = FeatureMap.from_dense(x)
        return feats


# -- visual side -----------------------------------------------------------


class VisualEncoder2D(Module):
    def __init__(self, in_channels: int, channels: int, rng: np.random.Generator):
        self.stem = Conv(in_channels, channels, 3, rng, stride=2)
        self.stages = [Conv(channels, channels, 3, rng, stride=2) for _ in range(3)]

    def __call__(self, x: Tensor) -> dict[int, Tensor]:
        x = T.relu(self.stem(x))
        feats = {1: x}
        for i, stage in enumerate(self.stages, start=2):
            x = T.relu(stage(x))
            feats[i] = x
        return feats


class PyramidDecoder2D(Module):
    """Coarse-to-fine decoder: concat skip feature, 1x1 fuse, 3x3 refine.

    The finest level is fused only; a 3x3 there costs as much as the rest of
    the decoder.
    """

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator, aux_channels: int = 0):
        self.top = Conv(channels, channels, 1, rng)
        self.fuse = {i: Conv(2 * channels, channels, 1, rng) for i in (1, 2, 3)}
        self.refine = {i: Conv(channels, channels, 3, rng) for i in (2, 3)}
        self.head = Conv(channels, out_channels, 1, rng)
        self.aux = Conv(channels, aux_channels, 1, rng) if aux_channels else None

    def __call__(self, feats: dict[int, Tensor], out_shape: tuple[int, int]) -> tuple[Tensor, Tensor | None]:
        d = T.relu(self.top(feats[4]))
        aux = None
        for i in (3, 2, 1):
            up = T.upsample_nearest(d, (2, 2))
            d = T.relu(self.fuse[i](T.concat([up, feats[i]], axis=1)))
            if i in self.refine:
                d = T.relu(self.refine[i](d))
            if i == 3 and self.aux is not None:
                aux = T.upsample_linear(self.aux(d), out_shape)
        return T.upsample_linear(self.head(d), out_shape), aux


class VoxelDecoder(Module):
    """4^3 bottleneck (3^3 refine) -> 8^3 skip fusion -> trilinear 16^3 logits.

    The 3^3 conv runs on the bottleneck, where it is 8x cheaper than at 8^3.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.top = Conv(channels, channels, 1, rng, ndim=3)
        self.refine = Conv(channels, channels, 3, rng, ndim=3)
        self.fuse = Conv(2 * channels, channels, 1, rng, ndim=3)
        self.head = Conv(channels, 1, 1, rng, ndim=3)

    def __call__(self, feats: dict[int, Tensor], out_size: int) -> Tensor:
        d = T.relu(self.top(feats[4]))
        d = T.relu(self.refine(d))
        up = T.upsample_nearest(d, (2, 2, 2))
        d = T.relu(self.fuse(T.concat([up, feats[3]], axis=1)))
        logits = T.upsample_linear(self.head(d), (out_size,) * 3)
        b = logits.shape[0]
        return T.reshape(logits, (b, out_size, out_size, out_size))


def _dense_out(task: str, raw: Tensor) -> Tensor:
    if task == "depth":
        b, _, h, w = raw.shape
        return T.reshape(T.softplus(raw + _softplus_inv(DEPTH_INIT)), (b, h, w))
    return raw


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class Prediction:
    """Network output plus the per-level features exposed for distillation."""

    out: Tensor
    features: dict[int, FeatureMap]
    aux: Tensor | None = None
    raw_audio: dict[int, FeatureMap] = field(default_factory=dict)


class TeacherNet(Module):
    """Visual teacher for depth/segmentation (2-D) or voxel super-resolution (3-D)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        if cfg.task == "voxel":
            self.enc3 = Conv(1, c, 3, rng, ndim=3)
            self.enc4 = Conv(c, c, 3, rng, stride=2, ndim=3)
            self.decoder = VoxelDecoder(c, rng)
        else:
            self.encoder = VisualEncoder2D(3, c, rng)
            aux = NUM_CLASSES if cfg.task == "segmentation" else 0
            self.decoder = PyramidDecoder2D(c, cfg.out_channels, rng, aux_channels=aux)

    def __call__(self, v_in) -> Prediction:
        return teacher_forward(self, v_in)


def teacher_forward(net: TeacherNet, v_in) -> Prediction:
    cfg = net.cfg
    x = v_in if isinstance(v_in, Tensor) else Tensor(np.asarray(v_in, dtype=np.float64))
    if cfg.task == "voxel":
        if x.ndim == 4:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        f3 = T.relu(net.enc3(x))
        f4 = T.relu(net.enc4(f3))
        dense = {3: f3, 4: f4}
        out = net.decoder(dense, cfg.voxel_hi)
        aux = None
    else:
        dense = net.encoder(x)
        raw, aux = net.decoder(dense, cfg.visual_shape)
        out = _dense_out(cfg.task, raw)
    feats = {i: FeatureMap.from_dense(f) for i, f in dense.items()}
    return Prediction(out, feats, aux)


class StudentNet(Module):
    """Audio student; decoder levels take SAM, oracle or resampled features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        self.patchify = Patchify(cfg.patch_mode, cfg.spec_shape, c, rng, cfg.patch_size)
        self.encoder = AudioEncoder(self.patchify.grid, c, rng)
        ks = k_schedule(len(cfg.sam_layers), cfg.k_last) if cfg.sam_layers else []
        self.sam_blocks = {}
        for layer, k in zip(cfg.sam_layers, ks):
            sc = SamConfig(
                layer_index=layer,
                audio_resolution=self.encoder.grids[layer - 1],
                visual_resolution=cfg.visual_grid(layer),
                channels=c,
                num_embeddings=k,
                num_heads=cfg.num_heads,
                temperature=cfg.temperature,
                spatial=cfg.spatial,
            )
            self.sam_blocks[layer] = SamBlock(sc, rng)
        if cfg.task == "voxel":
            self.decoder = VoxelDecoder(c, rng)
        else:
            aux = NUM_CLASSES if cfg.task == "segmentation" else 0
            self.decoder = PyramidDecoder2D(c, cfg.out_channels, rng, aux_channels=aux)

    def __call__(self, a_in, teacher_features: dict[int, FeatureMap] | None = None) -> Prediction:
        return student_forward(self, a_in, teacher_features)


def student_forward(net: StudentNet, a_in, teacher_features: dict[int, FeatureMap] | None = None) -> Prediction:
    """Dense prediction from audio.

    ``teacher_features`` is only read for oracle-substituted layers.
    """
    cfg = net.cfg
    audio = net.encoder(net.patchify(a_in))
    aligned: dict[int, FeatureMap] = {}
    for i in cfg.levels:
        grid = cfg.visual_grid(i)
        if i in net.sam_blocks:
            aligned[i] = net.sam_blocks[i](audio[i])
        elif i in cfg.oracle_layers:
            if not teacher_features or i not in teacher_features:
                raise ConfigError(f"oracle layer {i} needs teacher features")
            aligned[i] = oracle_substitute(_OracleShim(i, grid, cfg.channels), teacher_features[i])
        else:
            aligned[i] = nearest_resample(audio[i], grid)
    dense = {i: fm.to_dense() for i, fm in aligned.items()}
    if cfg.task == "voxel":
        out, aux = net.decoder(dense, cfg.voxel_hi), None
    else:
        raw, aux = net.decoder(dense, cfg.visual_shape)
        out = _dense_out(cfg.task, raw)
    return Prediction(out, aligned, aux, audio)


class _OracleShim:
    """Carries just enough config for :func:`oracle_substitute` on layers without a SAM block."""

    def __init__(self, layer: int, grid: tuple[int, ...], channels: int):
        self.config = _ShimConfig(layer, grid, prod(grid), channels)


@dataclass(frozen=True)
class _ShimConfig:
    layer_index: int
    visual_resolution: tuple[int, ...]
    visual_positions: int
    channels: int


def build_teacher(cfg: ModelConfig, seed: int = 0) -> TeacherNet:
    return TeacherNet(cfg, np.random.default_rng(seed))


def build_student(cfg: ModelConfig, seed: int = 0) -> StudentNet:
    return StudentNet(cfg, np.random.default_rng([seed, 7]))


def build_3d_student(cfg: ModelConfig, seed: int = 0, teacher: TeacherNet | None = None) -> StudentNet:
    """Student mapping 2-D audio onto the 3-D teacher's flattened feature grids."""
    if cfg.task != "voxel":
        raise ConfigError(f"3-D student needs task 'voxel', got {cfg.task!r}")
    if teacher is not None:
        tc = teacher.cfg
        if tc.task != "voxel" or tc.voxel_lo != cfg.voxel_lo or tc.channels != cfg.channels:
            raise ConfigError("student voxel grid/channels do not match the 3-D teacher")
    return build_student(cfg, seed)
