"""Training, distillation, evaluation and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as Lo
from . import metrics as Me
from . import tensor as T
from .errors import ConfigError, ContractError
from .features import FeatureMap
from .models import (
    ModelConfig,
    PatchMode,
    Prediction,
    StudentNet,
    TeacherNet,
    build_student,
    build_teacher,
)
from .nn import Module
from .serialize import config_digest, load_checkpoint, save_checkpoint
from .synthworld import load_split
from .tensor import Tensor

OPTIMIZERS = ("ADAM", "SGD_MOMENTUM")
TARGETS = ("teacher", "gt")

# model/distillation settings implied by each named variant
VARIANTS: dict[str, dict] = {
    "PSEUDO_GT": dict(sam_layers=(), feature_layers=(), lam=0.0),
    "DIRECT_MSE": dict(sam_layers=(), feature_layers=(3, 4), feature_loss="mse"),
    "RANK": dict(sam_layers=(), feature_layers=(3, 4), feature_loss="rank"),
    "MTA": dict(sam_layers=(), feature_layers=(3, 4), feature_loss="mta"),
    "SAM_34": dict(sam_layers=(3, 4)),
    "SAM_1234": dict(sam_layers=(1, 2, 3, 4)),
    "SAM_4": dict(sam_layers=(4,)),
    "SAM_K1": dict(sam_layers=(3, 4), k_last=1),
    "SAM_NONSPATIAL": dict(sam_layers=(3, 4), spatial=False),
    "ORACLE": dict(sam_layers=(), oracle_layers="all", feature_layers=(), lam=0.0),
    "PATCH_TIME": dict(sam_layers=(3, 4), patch_mode="TIME_BANDS"),
    "PATCH_FREQ": dict(sam_layers=(3, 4), patch_mode="FREQ_BANDS"),
    "PATCH_GRID": dict(sam_layers=(3, 4), patch_mode="GRID_2D"),
    "MONO": dict(sam_layers=(3, 4), patch_mode="MONO"),
    "AUDIO_ONLY": dict(sam_layers=(), feature_layers=(), lam=0.0, target="gt"),
}


# -- optimizers ------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGDMomentum:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p.data = p.data - self.lr * b

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9):
    name = name.upper()
    if name == "ADAM":
        return Adam(params, lr)
    if name == "SGD_MOMENTUM":
        return SGDMomentum(params, lr, momentum)
    raise ConfigError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")


# -- configuration ---------------------------------------------------------


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip().strip("()[]{}")
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "default") else float(text)


@dataclass
class TrainConfig:
    """Everything a training or distillation run depends on.

    Fields left at ``None`` are filled from the variant preset, then from task
    defaults (see :meth:`resolved`).
    """

    task: str = "depth"
    variant: str = "SAM_34"
    role: str = "student"
    data: str = "data"
    teacher: str = ""
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "ADAM"
    momentum: float = 0.9
    seed: int = 0
    train_limit: int = 0
    eval_limit: int = 0
    channels: int = 32
    num_heads: int = 4
    temperature: float = 1.0
    patch_size: int = 4
    k_last: int | None = None
    patch_mode: str | None = None
    sam_layers: tuple[int, ...] | None = None
    oracle_layers: tuple[int, ...] | None = None
    feature_layers: tuple[int, ...] | None = None
    spatial: bool | None = None
    lam: float | None = None
    feature_loss: str | None = None
    target: str | None = None
    margin: float = Lo.DEFAULT_MARGIN
    negative_mode: str = "ALL_OTHERS"
    patience: int = 200

    def __post_init__(self):
        self.task = "voxel" if self.task == "3d" else self.task
        if self.task not in Lo.TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.role not in ("student", "teacher"):
            raise ConfigError(f"role must be student or teacher, got {self.role!r}")
        if self.optimizer.upper() not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("epochs", "batch_size", "channels", "num_heads", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.margin <= 0 or self.patience < 1:
            raise ConfigError("learning_rate, margin and patience must be positive")
        if self.train_limit < 0 or self.eval_limit < 0:
            raise ConfigError("limits must be >= 0")

    # parsing -------------------------------------------------------------
    @classmethod
    def field_parsers(cls) -> dict[str, Callable[[str], object]]:
        return {
            "task": str.strip, "variant": str.strip, "role": str.strip, "data": str.strip,
            "teacher": str.strip, "epochs": int, "batch_size": int, "learning_rate": float,
            "optimizer": lambda s: s.strip().upper(), "momentum": float, "seed": int,
            "train_limit": int, "eval_limit": int, "channels": int, "num_heads": int,
            "temperature": float, "patch_size": int,
            "k_last": lambda s: None if s.strip().lower() in ("", "none") else int(s),
            "patch_mode": lambda s: s.strip().upper() or None,
            "sam_layers": _ints, "oracle_layers": _ints, "feature_layers": _ints,
            "spatial": _bool, "lam": _opt_float, "feature_loss": lambda s: s.strip() or None,
            "target": lambda s: s.strip() or None, "margin": float,
            "negative_mode": lambda s: s.strip().upper(), "patience": int,
        }

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = parse_key_values(text, set(cls.field_parsers()))
        parsed = {}
        for key, raw in values.items():
            try:
                parsed[key] = cls.field_parsers()[key](raw)
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from None
        parsed.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**parsed)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return config_digest(self.to_text())

    # resolution ----------------------------------------------------------
    def resolved(self) -> "TrainConfig":
        """Copy with every ``None`` filled from the variant preset and task defaults."""
        preset = dict(VARIANTS[self.variant])
        levels = (3, 4) if self.task == "voxel" else (1, 2, 3, 4)
        if preset.get("oracle_layers") == "all":
            preset["oracle_layers"] = levels
        defaults = dict(
            k_last=64, patch_mode="TIME_BANDS", sam_layers=(3, 4), oracle_layers=(), spatial=True,
            lam=Lo.DEFAULT_LAMBDA[self.task], feature_loss="triplet", target="teacher",
        )
        out = dataclasses.replace(self)
        for key, dflt in defaults.items():
            if getattr(out, key) is None:
                setattr(out, key, preset.get(key, dflt))
        if out.feature_layers is None:
            out.feature_layers = preset.get("feature_layers", out.sam_layers)
        if out.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {out.target!r}")
        return out

    def model_config(self) -> ModelConfig:
        r = self.resolved()
        return ModelConfig(
            task=r.task, channels=r.channels, patch_mode=PatchMode(r.patch_mode), patch_size=r.patch_size,
            sam_layers=r.sam_layers, oracle_layers=r.oracle_layers, k_last=r.k_last, num_heads=r.num_heads,
            temperature=r.temperature, spatial=r.spatial,
        )

    def distill_config(self) -> Lo.DistillConfig:
        r = self.resolved()
        return Lo.DistillConfig(
            lam=r.lam, sam_layers=r.feature_layers,
            triplet=Lo.TripletConfig(r.margin, r.negative_mode, r.seed), feature_loss=r.feature_loss,
        )


def parse_key_values(text: str, allowed: set[str] | None = None) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if allowed is not None and key not in allowed:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


# -- data ------------------------------------------------------------------


@lru_cache(maxsize=8)
def _load_split_cached(path: str, mtime: float) -> dict[str, np.ndarray]:
    return load_split(path)


def load_data(data_dir, split: str, limit: int = 0) -> dict[str, np.ndarray]:
    path = Path(data_dir) / f"{split}.sdds"
    if not path.exists():
        raise FileNotFoundError(f"dataset split not found: {path}")
    arrays = _load_split_cached(str(path.resolve()), path.stat().st_mtime)
    if limit:
        arrays = {k: v[:limit] for k, v in arrays.items()}
    return arrays


def teacher_input(task: str, data: dict[str, np.ndarray]) -> np.ndarray:
    if task == "voxel":
        return data["voxels_lo"].astype(np.float64)
    return data["visual"]


def labels(task: str, data: dict[str, np.ndarray]) -> np.ndarray:
    return {"depth": data["depth"], "segmentation": data["semantics"], "voxel": data["voxels_hi"]}[task]


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


# -- losses against ground truth --------------------------------------------


def ground_truth_loss(task: str, pred: Prediction, target: np.ndarray) -> Tensor:
    if task == "depth":
        return Lo.berhu(pred.out, target)
    if task == "segmentation":
        onehot = np.moveaxis(np.eye(Me.NUM_CLASSES)[target], -1, 1)
        loss = T.cross_entropy_with_logits(pred.out, onehot, axis=1)
        if pred.aux is not None:
            loss = loss + Lo.AUX_WEIGHT * T.cross_entropy_with_logits(pred.aux, onehot, axis=1)
        return loss
    return Lo.hard_binary_cross_entropy(pred.out, target)


# -- prediction and evaluation ---------------------------------------------


def to_output(task: str, out: np.ndarray) -> np.ndarray:
    """Network output -> metric input: depth map, class map or occupancy probability."""
    if task == "segmentation":
        return out.argmax(axis=1)
    if task == "voxel":
        return np.exp(-np.logaddexp(0.0, -out))
    return out


def score(task: str, pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Dataset-level metrics: pooled pixels for 2-D tasks, per-sample mean for voxels."""
    if task == "depth":
        return Me.depth_metrics(pred, gt)
    if task == "segmentation":
        return Me.segmentation_metrics(pred, gt)
    rows = [Me.voxel_metrics(p, g) for p, g in zip(pred, gt)]
    out = {k: float(np.mean([r[k] for r in rows])) for k in Me.VOXEL_KEYS}
    out["count"] = len(rows)
    return out


def predict_teacher(net: TeacherNet, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = []
    with T.no_grad():
        for idx in batches(len(inputs), batch_size):
            outs.append(net(inputs[idx]).out.data)
    return np.concatenate(outs)


def predict_student(net: StudentNet, audio: np.ndarray, teacher_feats: dict[int, np.ndarray] | None = None,
                    batch_size: int = 64) -> np.ndarray:
    outs = []
    cfg = net.cfg
    with T.no_grad():
        for idx in batches(len(audio), batch_size):
            tf = _feature_batch(cfg, teacher_feats, idx) if teacher_feats else None
            outs.append(net(audio[idx], tf).out.data)
    return np.concatenate(outs)


def _feature_batch(cfg: ModelConfig, feats: dict[int, np.ndarray], idx) -> dict[int, FeatureMap]:
    return {i: FeatureMap(Tensor(f[idx]), cfg.visual_grid(i)) for i, f in feats.items()}


@dataclass
class TeacherCache:
    out: np.ndarray
    features: dict[int, np.ndarray]


def teacher_cache(net: TeacherNet, inputs: np.ndarray, layers: Sequence[int], batch_size: int = 64) -> TeacherCache:
    """Frozen-teacher outputs and selected layer features for every input."""
    outs, feats = [], {i: [] for i in layers}
    with T.no_grad():
        for idx in batches(len(inputs), batch_size):
            p = net(inputs[idx])
            outs.append(p.out.data)
            for i in layers:
                feats[i].append(p.features[i].values.data)
    return TeacherCache(np.concatenate(outs), {i: np.concatenate(v) for i, v in feats.items()})


def evaluate_teacher(net: TeacherNet, data: dict[str, np.ndarray], digest: str = "") -> Me.MetricReport:
    task = net.cfg.task
    pred = to_output(task, predict_teacher(net, teacher_input(task, data)))
    return Me.report_from(task, score(task, pred, labels(task, data)), digest)


def evaluate_student(net: StudentNet, data: dict[str, np.ndarray], teacher: TeacherNet | None = None,
                     digest: str = "") -> Me.MetricReport:
    task = net.cfg.task
    feats = None
    if net.cfg.oracle_layers:
        if teacher is None:
            raise ConfigError("oracle variant needs the teacher at evaluation time")
        feats = teacher_cache(teacher, teacher_input(task, data), net.cfg.oracle_layers).features
    pred = to_output(task, predict_student(net, data["audio"], feats))
    return Me.report_from(task, score(task, pred, labels(task, data)), digest)


def mean_baseline(task: str, train: dict[str, np.ndarray], data: dict[str, np.ndarray]) -> Me.MetricReport:
    """Predict-the-training-mean (depth/voxels) or the majority class (segmentation)."""
    gt = labels(task, data)
    if task == "segmentation":
        cls = np.bincount(train["semantics"].ravel(), minlength=Me.NUM_CLASSES).argmax()
        pred = np.full_like(gt, cls)
    else:
        mean = labels(task, train).astype(np.float64).mean(0)
        pred = np.broadcast_to(mean, gt.shape)
    return Me.report_from(task, score(task, pred, gt))


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    net: Module
    log: list[dict] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    report: Me.MetricReport | None = None
    seconds: float = 0.0

    def log_csv(self) -> str:
        keys: list[str] = []
        for row in self.log:
            for k in row:
                if k not in keys:
                    keys.append(k)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow(row)
        return buf.getvalue()


def train_teacher(cfg: TrainConfig, log_every: int = 1) -> TrainResult:
    """Supervised teacher training on ground-truth labels of the train split."""
    t0 = time.perf_counter()
    cfg = dataclasses.replace(cfg, role="teacher")
    task = cfg.task
    train = load_data(cfg.data, "train", cfg.train_limit)
    val = load_data(cfg.data, "val", cfg.eval_limit)
    net = build_teacher(ModelConfig(task=task, channels=cfg.channels), cfg.seed)
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 101])
    x_all, y_all = teacher_input(task, train), labels(task, train)
    result = TrainResult(net)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(len(x_all), cfg.batch_size, rng):
            loss = ground_truth_loss(task, net(x_all[idx]), y_all[idx])
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            if step % log_every == 0:
                result.log.append({"epoch": epoch, "step": step, "loss": loss.item()})
            step += 1
        rep = evaluate_teacher(net, val)
        result.epoch_metrics.append({"epoch": epoch, **{k: v for k, (v, _) in rep.metrics.items()}})
    result.report = evaluate_teacher(net, val, cfg.digest())
    result.seconds = time.perf_counter() - t0
    return result


def _check_teacher(teacher: TeacherNet, cfg: TrainConfig) -> None:
    if teacher.cfg.task != cfg.task:
        raise ConfigError(f"teacher task {teacher.cfg.task!r} does not match {cfg.task!r}")
    if teacher.cfg.channels != cfg.channels:
        raise ConfigError(f"teacher channels {teacher.cfg.channels} != student channels {cfg.channels}")


def distill(cfg: TrainConfig, teacher: TeacherNet, eval_split: str = "test", validate: bool = True) -> TrainResult:
    """Train a student against a frozen teacher; the teacher's checksum must not change."""
    t0 = time.perf_counter()
    cfg = cfg.resolved()
    _check_teacher(teacher, cfg)
    task = cfg.task
    mcfg = cfg.model_config()
    dcfg = cfg.distill_config()
    teacher.freeze()
    before = teacher.checksum()

    train = load_data(cfg.data, "train", cfg.train_limit)
    val = load_data(cfg.data, "val", cfg.eval_limit) if validate else None
    needed = sorted(set(dcfg.sam_layers) | set(mcfg.oracle_layers)) if cfg.target == "teacher" else sorted(mcfg.oracle_layers)
    cache = teacher_cache(teacher, teacher_input(task, train), needed)
    gt = labels(task, train)
    audio = train["audio"]

    student = build_student(mcfg, cfg.seed)
    opt = make_optimizer(cfg.optimizer, student.parameters(), cfg.learning_rate, cfg.momentum)
    shuffle = np.random.default_rng([cfg.seed, 101])
    trip_rng = np.random.default_rng([cfg.seed, 202])
    result = TrainResult(student)
    mode = Lo.NegativeMode(dcfg.triplet.negative_mode)
    best, since_best, running = np.inf, 0, None
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(len(audio), cfg.batch_size, shuffle):
            oracle = {i: cache.features[i] for i in mcfg.oracle_layers}
            pred = student(audio[idx], _feature_batch(mcfg, oracle, idx) if oracle else None)
            parts: dict[str, float] = {}
            if cfg.target == "gt":
                loss = ground_truth_loss(task, pred, gt[idx])
                parts["pseudo"] = loss.item()
            else:
                v_out = Tensor(cache.out[idx])
                outs = (v_out, pred.out, pred.aux) if pred.aux is not None else (v_out, pred.out)
                tfeat = {i: FeatureMap(Tensor(cache.features[i][idx]), mcfg.visual_grid(i)) for i in dcfg.sam_layers}
                afeat = {i: pred.features[i] for i in dcfg.sam_layers}
                loss = Lo.combined_loss(task, outs, afeat, tfeat, dcfg, trip_rng, parts)
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            feat_total = sum(v for k, v in parts.items() if k.startswith("feature_"))
            result.log.append({"epoch": epoch, "step": step, "loss": loss.item(), **parts,
                               "negative_mode": mode.value})
            if dcfg.lam > 0 and dcfg.sam_layers and mode is Lo.NegativeMode.ALL_OTHERS:
                running = feat_total if running is None else 0.95 * running + 0.05 * feat_total
                if running < best - 1e-9:
                    best, since_best = running, 0
                else:
                    since_best += 1
                if since_best >= cfg.patience:
                    mode = Lo.NegativeMode.RANDOM_ADJACENT
                    dcfg.triplet.negative_mode = mode
            step += 1
        if val is not None:
            rep = evaluate_student(student, val, teacher)
            result.epoch_metrics.append({"epoch": epoch, **{k: v for k, (v, _) in rep.metrics.items()}})
    after = teacher.checksum()
    if after != before:
        raise ContractError("teacher parameters changed during distillation")
    result.report = evaluate_student(student, load_data(cfg.data, eval_split, cfg.eval_limit), teacher, cfg.digest())
    result.seconds = time.perf_counter() - t0
    return result


# -- checkpoints -----------------------------------------------------------


def save_model(path, net: Module, cfg: TrainConfig) -> None:
    save_checkpoint(path, net.state_dict(), cfg.to_text())


def load_model(path) -> tuple[Module, TrainConfig]:
    params, text = load_checkpoint(path)
    cfg = TrainConfig.from_text(text)
    mcfg = cfg.model_config() if cfg.role == "student" else ModelConfig(task=cfg.task, channels=cfg.channels)
    net = build_student(mcfg, cfg.seed) if cfg.role == "student" else build_teacher(mcfg, cfg.seed)
    net.load_state_dict(params)
    return net, cfg


# -- ablation grid ---------------------------------------------------------


GRID_COLUMNS = {
    "depth": Me.DEPTH_KEYS,
    "segmentation": Me.SEG_KEYS,
    "voxel": Me.VOXEL_KEYS,
}


@dataclass
class GridResult:
    task: str
    rows: list[dict]
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    def table_csv(self) -> str:
        cols = ["variant", "seed", *GRID_COLUMNS[self.task], "seconds"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def values(self, variant: str, metric: str) -> list[float]:
        return [r[metric] for r in sorted(self.rows, key=lambda r: r["seed"]) if r["variant"] == variant]

    def summary(self) -> str:
        lines = []
        cols = GRID_COLUMNS[self.task]
        variants = list(dict.fromkeys(r["variant"] for r in self.rows))
        for m in cols:
            means = {v: float(np.mean(self.values(v, m))) for v in variants}
            pick = min if not Me.HIGHER_IS_BETTER.get(m, True) else max
            winner = pick(means, key=means.get)
            lines.append(f"{m}: best {winner} ({means[winner]:.4f})")
        for name, ok, detail in self.checks:
            lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return "\n".join(lines) + "\n"


def majority_wins(a: Sequence[float], b: Sequence[float], better: Callable[[float, float], bool]) -> bool:
    """True when ``better(a_s, b_s)`` holds for at least 2 of 3 (a strict majority of) seeds."""
    wins = sum(1 for x, y in zip(a, b) if better(x, y))
    return wins * 2 > len(a)


def run_grid(variants: Sequence[str], base: TrainConfig, teacher: TeacherNet,
             seeds: Sequence[int] = (0, 1, 2), on_row: Callable[[dict], None] | None = None) -> GridResult:
    """One distillation run per (variant, seed), evaluated on the test split."""
    rows = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        for seed in seeds:
            cfg = dataclasses.replace(base, variant=variant, seed=seed)
            res = distill(cfg, teacher, validate=False)
            row = {"variant": variant, "seed": seed, "seconds": round(res.seconds, 2)}
            row.update({k: v for k, (v, _) in res.report.metrics.items()})
            rows.append(row)
            if on_row:
                on_row(row)
    grid = GridResult(base.task, rows)
    grid.checks = soft_checks(grid)
    return grid


def soft_checks(grid: GridResult) -> list[tuple[str, bool, str]]:
    """Directional orderings among variants present in the grid."""
    present = {r["variant"] for r in grid.rows}
    checks = []
    if grid.task == "depth":
        if {"SAM_34", "PSEUDO_GT"} <= present:
            a, b = grid.values("SAM_34", "MAE"), grid.values("PSEUDO_GT", "MAE")
            checks.append(("SAM_34 MAE < PSEUDO_GT MAE", majority_wins(a, b, lambda x, y: x < y),
                           f"{np.round(a, 4).tolist()} vs {np.round(b, 4).tolist()}"))
        if "ORACLE" in present and len(present) > 1:
            oracle = grid.values("ORACLE", "delta1")
            others = [v for v in present if v != "ORACLE"]
            ok = all(majority_wins(oracle, grid.values(v, "delta1"), lambda x, y: x >= y) for v in others)
            checks.append(("ORACLE best delta1", ok, f"oracle {np.round(oracle, 4).tolist()}"))
        order = [v for v in ("PATCH_TIME", "PATCH_GRID", "MONO") if v in present]
        if len(order) == 3:
            t, g, m = (grid.values(v, "delta1") for v in order)
            ok = majority_wins(t, g, lambda x, y: x >= y) and majority_wins(g, m, lambda x, y: x >= y)
            checks.append(("TIME >= GRID >= MONO delta1 (report only)", ok, ""))
    if grid.task == "voxel" and {"SAM_34", "AUDIO_ONLY"} <= present:
        a, b = grid.values("SAM_34", "IoU"), grid.values("AUDIO_ONLY", "IoU")
        checks.append(("SAM_34 IoU > AUDIO_ONLY IoU", majority_wins(a, b, lambda x, y: x > y),
                       f"{np.round(a, 4).tolist()} vs {np.round(b, 4).tolist()}"))
    return checks
