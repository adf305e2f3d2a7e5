"""Procedural rooms with paired binaural echo spectrograms and dense labels.

Geometry conventions
--------------------
* World frame: metres, z up, floor at z = 0.  The agent stands at
  ``agent_height`` and faces ``heading`` (radians, counter-clockwise from +x).
* Panorama column ``u`` looks along azimuth ``heading + 2*pi*u/W``; row ``v``
  has elevation ``pi/2 - pi*(v + 0.5)/H``.  Arrays are (H, W).
* Voxel grids are agent-centred and heading-aligned: axis 0 points forward,
  axis 1 to the left, axis 2 up.  The hi-res grid is the solid-occupancy test
  at cell centres; the lo-res grid is its 2x2x2 block maximum.
* Audio is (time, frequency, 2) with channel 0 = left ear.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, GenerationError
from .serialize import iter_dataset, write_dataset

NUM_CLASSES = 9
FLOOR, CEILING, WALL, WINDOW, DOOR, PANEL, TABLE, SOFA, CABINET = range(NUM_CLASSES)
CLASS_NAMES = ("floor", "ceiling", "wall", "window", "door", "panel", "table", "sofa", "cabinet")
LAYOUT_CLASSES = (CEILING, WALL, FLOOR)
WALL_MATERIALS = (WALL, WINDOW, DOOR, PANEL)
WALL_MATERIAL_P = (0.55, 0.15, 0.15, 0.15)
FURNITURE_MATERIALS = (TABLE, SOFA, CABINET)

# fraction of incident energy absorbed, and high-frequency roll-off per class
ABSORPTION = np.array([0.30, 0.20, 0.05, 0.02, 0.15, 0.35, 0.20, 0.60, 0.25])
SPECTRAL_TILT = np.array([0.8, 0.5, 0.2, 0.05, 1.0, 1.6, 0.9, 2.2, 1.2])

_PALETTE = np.array([
    [0.55, 0.35, 0.20],
    [0.90, 0.90, 0.85],
    [0.75, 0.70, 0.60],
    [0.30, 0.55, 0.90],
    [0.60, 0.30, 0.10],
    [0.80, 0.55, 0.30],
    [0.20, 0.70, 0.30],
    [0.70, 0.20, 0.50],
    [0.30, 0.30, 0.35],
])
PALETTE = _PALETTE / np.linalg.norm(_PALETTE, axis=1, keepdims=True)

SAMPLE_FIELDS = ("seed", "audio", "visual", "depth", "semantics", "voxels_lo", "voxels_hi")
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_RATIOS = (2000 / 2800, 300 / 2800, 500 / 2800)
SEED_STRIDE = 1_000_000
REJECTION_BUDGET = 1000


@dataclass(frozen=True)
class WorldConfig:
    pano_width: int = 64
    pano_height: int = 32
    spec_time: int = 32
    spec_freq: int = 16
    agent_height: float = 1.5
    ceiling_range: tuple[float, float] = (2.2, 2.6)
    radius_range: tuple[float, float] = (1.6, 4.0)
    walls_range: tuple[int, int] = (4, 8)
    area_range: tuple[float, float] = (6.0, 32.0)
    max_furniture: int = 2
    agent_clearance: float = 0.4
    voxel_hi: int = 16
    voxel_lo: int = 8
    voxel_extent: tuple[float, float, float] = (2.5, 2.5, 3.0)
    voxel_floor_offset: float = 0.1875
    path_per_bin: float = 0.3
    ild: float = 0.8
    rear_cue: float = 0.6
    snr_db: float | None = 30.0
    compression: float = 10.0
    shading_scale: float = 5.0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class Room:
    polygon: np.ndarray
    wall_materials: np.ndarray
    ceiling_height: float
    furniture: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    furniture_materials: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    agent_position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    agent_heading: float = 0.0

    @property
    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.polygon, np.roll(self.polygon, -1, axis=0)

    @property
    def area(self) -> float:
        x, y = self.polygon[:, 0], self.polygon[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def scaled(self, factor: float) -> "Room":
        """Uniformly scale all dimensions about the origin (agent height excluded)."""
        return Room(
            self.polygon * factor,
            self.wall_materials.copy(),
            self.ceiling_height * factor,
            self.furniture * factor,
            self.furniture_materials.copy(),
            self.agent_position * factor,
            self.agent_heading,
        )


@dataclass
class SceneSample:
    seed: int
    audio: np.ndarray
    visual: np.ndarray
    depth: np.ndarray
    semantics: np.ndarray
    voxels_lo: np.ndarray
    voxels_hi: np.ndarray
    room: Room

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {
            "seed": np.array([float(self.seed)]),
            "audio": self.audio,
            "visual": self.visual,
            "depth": self.depth,
            "semantics": self.semantics.astype(np.float64),
            "voxels_lo": self.voxels_lo.astype(np.float64),
            "voxels_hi": self.voxels_hi.astype(np.float64),
        }


# -- rooms -----------------------------------------------------------------


def wall_distances(room: Room, point: np.ndarray) -> np.ndarray:
    a, b = room.segments
    e = b - a
    s = np.clip(((point - a) * e).sum(1) / (e * e).sum(1), 0.0, 1.0)
    foot = a + s[:, None] * e
    return np.linalg.norm(point - foot, axis=1)


def point_in_room(room: Room, point) -> bool:
    return bool(kernels.points_in_polygon(np.asarray(point, dtype=np.float64).reshape(1, 2), room.polygon)[0])


def validate_room(room: Room, cfg: WorldConfig | None = None) -> None:
    """Raise ``ContractError`` unless the room satisfies its invariants."""
    n = len(room.polygon)
    if not 3 <= n <= 8:
        raise ContractError(f"room has {n} walls; expected 3..8")
    if len(room.wall_materials) != n or not np.isin(room.wall_materials, np.arange(NUM_CLASSES)).all():
        raise ContractError("wall materials must be one class id per wall")
    agent_h = cfg.agent_height if cfg else WorldConfig.agent_height
    if not room.ceiling_height > agent_h:
        raise ContractError("ceiling must be above the agent")
    if not point_in_room(room, room.agent_position) or wall_distances(room, room.agent_position).min() <= 0:
        raise ContractError("agent is not strictly inside the room")
    for box in room.furniture:
        corners = np.array([[box[0], box[1]], [box[2], box[1]], [box[2], box[3]], [box[0], box[3]]])
        if not kernels.points_in_polygon(corners, room.polygon).all():
            raise ContractError("furniture extends outside the room")
        ax, ay = room.agent_position
        if box[0] <= ax <= box[2] and box[1] <= ay <= box[3]:
            raise ContractError("agent stands inside furniture")


def sample_room(seed: int, cfg: WorldConfig | None = None) -> Room:
    """Deterministic star-shaped room; rejection-sampled until valid."""
    cfg = cfg or WorldConfig()
    rng = np.random.default_rng(seed)
    for _ in range(REJECTION_BUDGET):
        n = int(rng.integers(cfg.walls_range[0], cfg.walls_range[1] + 1))
        base = 2 * np.pi * np.arange(n) / n
        angles = base + rng.uniform(-0.3, 0.3, n) * (2 * np.pi / n) + rng.uniform(0, 2 * np.pi)
        radii = rng.uniform(cfg.radius_range[0], cfg.radius_range[1], n)
        poly = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        mats = rng.choice(WALL_MATERIALS, size=n, p=WALL_MATERIAL_P).astype(np.int64)
        ceiling = float(rng.uniform(*cfg.ceiling_range))
        agent = rng.uniform(-1.0, 1.0, 2) * 0.35 * radii.min()
        heading = float(rng.uniform(0.0, 2 * np.pi))
        room = Room(poly, mats, ceiling, agent_position=agent, agent_heading=heading)
        if not cfg.area_range[0] <= room.area <= cfg.area_range[1]:
            continue
        if not point_in_room(room, agent) or wall_distances(room, agent).min() < cfg.agent_clearance:
            continue
        boxes, box_mats = [], []
        for _k in range(int(rng.integers(0, cfg.max_furniture + 1))):
            for _try in range(20):
                w, d = rng.uniform(0.4, 1.2, 2)
                cx, cy = rng.uniform(-1.0, 1.0, 2) * radii.max()
                box = np.array([cx - w / 2, cy - d / 2, cx + w / 2, cy + d / 2, rng.uniform(0.4, 1.0)])
                corners = np.array([[box[0], box[1]], [box[2], box[1]], [box[2], box[3]], [box[0], box[3]]])
                if not kernels.points_in_polygon(corners, poly).all():
                    continue
                if (box[0] - cfg.agent_clearance <= agent[0] <= box[2] + cfg.agent_clearance
                        and box[1] - cfg.agent_clearance <= agent[1] <= box[3] + cfg.agent_clearance):
                    continue
                boxes.append(box)
                box_mats.append(int(rng.choice(FURNITURE_MATERIALS)))
                break
        room.furniture = np.array(boxes).reshape(-1, 5)
        room.furniture_materials = np.array(box_mats, dtype=np.int64)
        validate_room(room, cfg)
        return room
    raise GenerationError(f"seed {seed}: no valid room within {REJECTION_BUDGET} attempts")


# -- labels ----------------------------------------------------------------


def horizontal_distance(room: Room, thetas) -> np.ndarray:
    """Distance from the agent to the nearest wall along world azimuths."""
    a, b = room.segments
    d, _ = kernels.ray_segment_distances(room.agent_position, np.atleast_1d(np.asarray(thetas, float)), a, b)
    return d


def raycast(room: Room, cfg: WorldConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    cfg = cfg or WorldConfig()
    a, b = room.segments
    return kernels.raycast_panorama(
        np.asarray(room.agent_position, float), cfg.agent_height, room.ceiling_height, room.agent_heading,
        a, b, room.wall_materials, room.furniture, room.furniture_materials,
        cfg.pano_width, cfg.pano_height, FLOOR, CEILING,
    )


def voxel_centers(room: Room, cfg: WorldConfig, n: int) -> np.ndarray:
    """World coordinates of an n^3 agent-centred grid, shape (n^3, 3), C order."""
    ex, ey, ez = cfg.voxel_extent
    lx = -ex / 2 + (np.arange(n) + 0.5) * ex / n
    ly = -ey / 2 + (np.arange(n) + 0.5) * ey / n
    lz = -cfg.voxel_floor_offset + (np.arange(n) + 0.5) * ez / n
    gx, gy, gz = np.meshgrid(lx, ly, lz, indexing="ij")
    c, s = np.cos(room.agent_heading), np.sin(room.agent_heading)
    wx = room.agent_position[0] + c * gx - s * gy
    wy = room.agent_position[1] + s * gx + c * gy
    return np.stack([wx.ravel(), wy.ravel(), gz.ravel()], axis=1)


def voxelize(room: Room, cfg: WorldConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    cfg = cfg or WorldConfig()
    n = cfg.voxel_hi
    solid = kernels.voxel_solid(voxel_centers(room, cfg, n), room.polygon, room.ceiling_height, room.furniture)
    hi = solid.reshape(n, n, n).astype(np.int64)
    f = n // cfg.voxel_lo
    lo = hi.reshape(cfg.voxel_lo, f, cfg.voxel_lo, f, cfg.voxel_lo, f).max(axis=(1, 3, 5))
    return lo, hi


def render_labels(room: Room, cfg: WorldConfig | None = None):
    """(depth, semantics, voxels_lo, voxels_hi) for a valid room."""
    cfg = cfg or WorldConfig()
    validate_room(room, cfg)
    depth, sem = raycast(room, cfg)
    lo, hi = voxelize(room, cfg)
    return depth, sem, lo, hi


def render_visual(depth: np.ndarray, semantics: np.ndarray, cfg: WorldConfig | None = None) -> np.ndarray:
    """Teacher input (3, H, W): unit-norm class colour times exp(-depth/scale)."""
    cfg = cfg or WorldConfig()
    shade = np.exp(-depth / cfg.shading_scale)
    return (PALETTE[semantics] * shade[..., None]).transpose(2, 0, 1)


# -- audio -----------------------------------------------------------------


@dataclass(frozen=True)
class Arrival:
    path_length: float
    azimuth: float | None  # relative to heading; None for floor/ceiling
    material: int


def arrivals(room: Room, cfg: WorldConfig | None = None) -> list[Arrival]:
    """First-order image sources for a co-located emitter and receiver."""
    cfg = cfg or WorldConfig()
    out = []
    a, b = room.segments
    p = room.agent_position
    for i in range(len(a)):
        e = b[i] - a[i]
        s = float(np.dot(p - a[i], e) / np.dot(e, e))
        if not 0.0 <= s <= 1.0:
            continue
        foot = a[i] + s * e
        v = foot - p
        dist = float(np.hypot(v[0], v[1]))
        az = float(np.arctan2(v[1], v[0]) - room.agent_heading)
        out.append(Arrival(2.0 * dist, az, int(room.wall_materials[i])))
    out.append(Arrival(2.0 * cfg.agent_height, None, FLOOR))
    out.append(Arrival(2.0 * (room.ceiling_height - cfg.agent_height), None, CEILING))
    return out


def arrival_spectrum(arr: Arrival, cfg: WorldConfig) -> np.ndarray:
    """(F, 2) magnitude contributed by one arrival."""
    f = (np.arange(cfg.spec_freq) + 0.5) / cfg.spec_freq
    mag = (1.0 - ABSORPTION[arr.material]) / arr.path_length
    spec = mag * np.exp(-SPECTRAL_TILT[arr.material] * f)
    if arr.azimuth is None:
        left = right = 0.5
    else:
        lateral = np.sin(arr.azimuth)
        rear = 0.5 * (1.0 - np.cos(arr.azimuth))
        spec = spec * (1.0 - cfg.rear_cue * rear * f)
        left = 0.5 * (1.0 + cfg.ild * lateral)
        right = 0.5 * (1.0 - cfg.ild * lateral)
    return np.stack([spec * left, spec * right], axis=1)


def synthesize_audio(room: Room, cfg: WorldConfig | None = None, noise_seed: int | None = None) -> np.ndarray:
    """Binaural echo spectrogram (time, freq, 2), log-compressed.

    Each arrival lands at fractional time ``path / path_per_bin`` and is split
    linearly between the two neighbouring bins.  With ``noise_seed`` and a
    finite ``snr_db``, half-normal noise is added before compression.
    """
    cfg = cfg or WorldConfig()
    grid = np.zeros((cfg.spec_time, cfg.spec_freq, 2))
    for arr in arrivals(room, cfg):
        tau = arr.path_length / cfg.path_per_bin
        lo = int(np.floor(tau))
        frac = tau - lo
        spec = arrival_spectrum(arr, cfg)
        if 0 <= lo < cfg.spec_time:
            grid[lo] += (1.0 - frac) * spec
        if 0 <= lo + 1 < cfg.spec_time:
            grid[lo + 1] += frac * spec
    if noise_seed is not None and cfg.snr_db is not None:
        rms = float(np.sqrt((grid**2).mean()))
        noise = np.abs(np.random.default_rng([noise_seed, 1]).standard_normal(grid.shape))
        grid = grid + noise * rms * 10.0 ** (-cfg.snr_db / 20.0)
    return np.log1p(cfg.compression * grid)


# -- samples and datasets --------------------------------------------------


def generate_sample(seed: int, cfg: WorldConfig | None = None) -> SceneSample:
    cfg = cfg or WorldConfig()
    room = sample_room(seed, cfg)
    depth, sem, lo, hi = render_labels(room, cfg)
    return SceneSample(
        seed=seed,
        audio=synthesize_audio(room, cfg, noise_seed=seed),
        visual=render_visual(depth, sem, cfg),
        depth=depth,
        semantics=sem,
        voxels_lo=lo,
        voxels_hi=hi,
        room=room,
    )


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` samples."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (raw[i] - counts[i]), reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def dataset_seeds(n: int, seed: int, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS) -> dict[str, list[int]]:
    counts = split_counts(n, ratios)
    base = seed * SEED_STRIDE
    out, start = {}, 0
    for name, c in zip(SPLITS, counts):
        out[name] = [base + i for i in range(start, start + c)]
        start += c
    return out


def build_dataset(n: int, seed: int, out_dir, split_ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
                  cfg: WorldConfig | None = None) -> dict:
    """Write ``<split>.sdds`` files plus ``manifest.json``; returns the manifest."""
    cfg = cfg or WorldConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = dataset_seeds(n, seed, split_ratios)
    manifest = {
        "format": "SDDS",
        "version": 1,
        "seed": seed,
        "n": n,
        "split_ratios": list(split_ratios),
        "counts": {k: len(v) for k, v in seeds.items()},
        "seeds": seeds,
        "fields": list(SAMPLE_FIELDS),
        "generator_config": asdict(cfg),
        "generator_digest": cfg.digest(),
    }
    for name, split_seeds in seeds.items():
        samples = [generate_sample(s, cfg).as_arrays() for s in split_seeds]
        write_dataset(out_dir / f"{name}.sdds", SAMPLE_FIELDS, samples)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_split(path) -> dict[str, np.ndarray]:
    """Stack every field of a split file into (N, ...) arrays."""
    rows = list(iter_dataset(path))
    if not rows:
        return {name: np.zeros((0,)) for name in SAMPLE_FIELDS}
    out = {name: np.stack([r[name] for r in rows]) for name in rows[0]}
    out["seed"] = out["seed"].reshape(-1).astype(np.int64)
    for name in ("semantics", "voxels_lo", "voxels_hi"):
        out[name] = out[name].astype(np.int64)
    return out


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)


def world_config_from_manifest(manifest: dict) -> WorldConfig:
    raw = dict(manifest["generator_config"])
    for key, val in raw.items():
        if isinstance(val, list):
            raw[key] = tuple(val)
    return WorldConfig(**raw)


def information_probe(audio: np.ndarray, depth: np.ndarray) -> tuple[float, float]:
    """Leave-one-out 1-NN regression of mean depth from audio vs. predicting the mean.

    Returns (nn_mae, mean_mae).
    """
    x = audio.reshape(len(audio), -1)
    y = depth.reshape(len(depth), -1).mean(1)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    nn_mae = float(np.abs(y[nn] - y).mean())
    loo_mean = (y.sum() - y) / (len(y) - 1)
    mean_mae = float(np.abs(loo_mean - y).mean())
    return nn_mae, mean_mae
