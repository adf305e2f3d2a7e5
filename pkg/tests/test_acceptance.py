"""End-to-end acceptance suite: one test and one PASS/FAIL line per criterion.

The two training criteria share a 2800-sample dataset (2000/300/500) built
once per module.  Budgets are wall-clock seconds on one CPU core.
"""

import time

import numpy as np
import pytest

from oracles import brute_triplet, depth_oracle, random_blob, ray_oracle, seg_oracle, voxel_oracle

from samdistill import engine as E
from samdistill import losses as L
from samdistill import metrics as Me
from samdistill import synthworld as S
from samdistill import tensor as T
from samdistill.features import FeatureMap
from samdistill.gradcheck import run_gradcheck
from samdistill.sam import SamBlock, SamConfig, k_schedule, mixing_weights, pool_embeddings, sam_forward, similarity_matrix
from samdistill.tensor import Tensor

BUDGET = 600.0
GRADCHECK_BUDGET = 60.0
DATA_N, DATA_SEED, DATA_RATIOS = 2800, 0, (2000 / 2800, 300 / 2800, 500 / 2800)
SEEDS = (0, 1, 2)

DEPTH_TEACHER = dict(epochs=3, learning_rate=1e-3)
DEPTH_STUDENTS = dict(epochs=6, learning_rate=3e-3)
DEPTH_VARIANTS = ("PSEUDO_GT", "SAM_34", "ORACLE")
VOXEL_TEACHER = dict(epochs=4, learning_rate=1e-3)
VOXEL_STUDENTS = dict(epochs=2, learning_rate=3e-3)
VOXEL_VARIANTS = ("SAM_34", "AUDIO_ONLY")


@pytest.fixture
def verdict(acceptance_log):
    def record(n: int, title: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}"
        acceptance_log.append(line)
        print(line)
        assert ok, line

    return record


# -- shared training runs --------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "data"
    t0 = time.perf_counter()
    manifest = S.build_dataset(DATA_N, DATA_SEED, path, DATA_RATIOS)
    return str(path), manifest, time.perf_counter() - t0


def _grid(task, data, teacher_kw, student_kw, variants):
    """Teacher then every (variant, seed); teacher checksum taken after each run."""
    t0 = time.perf_counter()
    tcfg = E.TrainConfig(task=task, data=data, role="teacher", **teacher_kw)
    teacher = E.train_teacher(tcfg)
    reference = teacher.net.checksum()
    sums = []
    base = E.TrainConfig(task=task, data=data, **student_kw)
    grid = E.run_grid(variants, base, teacher.net, SEEDS, on_row=lambda row: sums.append(teacher.net.checksum()))
    return {"grid": grid, "teacher": teacher, "reference": reference, "checksums": sums,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def depth_run(dataset):
    path, _, gen_seconds = dataset
    run = _grid("depth", path, DEPTH_TEACHER, DEPTH_STUDENTS, DEPTH_VARIANTS)
    run["seconds"] += gen_seconds
    return run


@pytest.fixture(scope="module")
def voxel_run(dataset):
    return _grid("voxel", dataset[0], VOXEL_TEACHER, VOXEL_STUDENTS, VOXEL_VARIANTS)


def _fmt(values):
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    results = run_gradcheck()
    seconds = time.perf_counter() - t0
    names = {r.name for r in results}
    worst = max(results, key=lambda r: r.max_rel_error)
    covered = set(T.DIFFERENTIABLE_OPS) <= names and "sam_block" in names
    ok = covered and all(r.passed and r.max_rel_error < 1e-5 for r in results) and seconds < GRADCHECK_BUDGET
    verdict(1, "gradcheck of every op and the SAM block", ok,
            f"{len(results)} cases, worst {worst.name} {worst.max_rel_error:.2e} < 1e-5, "
            f"{seconds:.1f}s < {GRADCHECK_BUDGET:.0f}s, coverage {covered}")


# -- 2 ---------------------------------------------------------------------


def _random_block(audio, visual, k, seed, c=8, heads=2):
    rng = np.random.default_rng(seed)
    b = SamBlock(SamConfig(3, audio, visual, c, k, heads), rng)
    for p in b.parameters():
        p.data = rng.uniform(-1, 1, p.shape)
    return b


def test_criterion_2_sam_invariants(verdict):
    fails = []
    shapes = [((32, 1), (4, 8)), ((1, 16), (4, 8)), ((4, 8), (8, 8, 8)), ((8, 1), (4, 4, 4)), ((1, 1), (2, 2))]
    for audio, visual in shapes:
        b = _random_block(audio, visual, 4, 0)
        n = int(np.prod(audio))
        out = sam_forward(b, FeatureMap(Tensor(np.random.default_rng(1).normal(size=(2, n, 8))), audio))
        if out.values.shape != (2, int(np.prod(visual)), 8) or out.grid != visual:
            fails.append(f"shape {audio}->{visual}")
    perm_err = norm_err = 0.0
    collapse = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        b = _random_block((6, 1), (2, 3), 3, seed)
        a = rng.normal(size=(2, 6, 8))
        perm = rng.permutation(6)
        x = sam_forward(b, FeatureMap(Tensor(a), (6, 1))).values.data
        y = sam_forward(b, FeatureMap(Tensor(a[:, perm]), (6, 1))).values.data
        perm_err = max(perm_err, float(np.abs(x - y).max()))
        w = mixing_weights(Tensor(rng.normal(size=(2, 5, 6)) * 30)).data
        norm_err = max(norm_err, float(np.abs(w.sum(-2) - 1).max()))
        b1 = _random_block((6, 1), (2, 3), 1, seed)
        pooled = pool_embeddings(b1.bank, similarity_matrix(b1.bank, Tensor(a))).data
        collapse &= all(np.array_equal(p, b1.bank.embeddings.data[0]) for p in pooled)
    sched = k_schedule(4, 64)
    if perm_err > 1e-12:
        fails.append("permutation")
    if norm_err > 1e-12:
        fails.append("normalization")
    if not collapse:
        fails.append("K=1 collapse")
    if sched != [1, 4, 16, 64]:
        fails.append("k_schedule")
    verdict(2, "SAM algebraic invariants", not fails,
            f"{len(shapes)} shape contracts, permutation {perm_err:.1e}, weight sum {norm_err:.1e}, "
            f"K=1 exact {collapse}, k_schedule(4,64)={sched}" + (f", failed: {fails}" if fails else ""))


# -- 3 ---------------------------------------------------------------------


def test_criterion_3_loss_correctness(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        v, a = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        worst = max(worst, abs(L.triplet_feature_loss(Tensor(v), Tensor(a)).item() - brute_triplet(v, a)))
    eye = np.eye(6, 8)
    zero = L.triplet_feature_loss(Tensor(eye), Tensor(eye[np.random.default_rng(0).permutation(6)])).item()
    degenerate = L.triplet_feature_loss(
        Tensor(np.random.default_rng(0).normal(size=(6, 8))),
        Tensor(np.tile(np.random.default_rng(1).normal(size=8), (6, 1)))).item()
    rng = np.random.default_rng(5)
    exact = True
    for task, shape in (("depth", (2, 4, 8)), ("voxel", (2, 4, 4, 4))):
        v_out, a_out = Tensor(rng.normal(size=shape) + 2), Tensor(rng.normal(size=shape) + 2)
        feats = {i: FeatureMap(Tensor(rng.normal(size=(2, 6, 8))), (2, 3)) for i in (3, 4)}
        cfg = L.DistillConfig(lam=0.0, sam_layers=(3, 4))
        got = L.combined_loss(task, (v_out, a_out), feats, feats, cfg).item()
        exact &= got == L.pseudo_gt_loss(task, v_out, a_out).item()
    ok = worst < 1e-10 and zero == 0.0 and degenerate == 1.5 and exact
    verdict(3, "triplet oracle, closed forms, lambda=0 reduction", ok,
            f"brute-force max err {worst:.1e} < 1e-10 (20 instances), orthonormal perm {zero}, "
            f"identical audio rows {degenerate} (= 0.3*5), lambda=0 bit-exact {exact}")


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_metric_correctness(verdict):
    errs = {"depth": 0.0, "segmentation": 0.0, "voxel": 0.0}
    for seed in range(20):
        r = np.random.default_rng(seed)
        g = r.uniform(0.2, 6, (8, 16))
        g[r.random(g.shape) < 0.1] = 0.0
        p = g * r.uniform(0.5, 2.0, g.shape)
        got, ref = Me.depth_metrics(p, g), depth_oracle(p, g)
        errs["depth"] = max(errs["depth"], max(abs(got[k] - ref[k]) for k in ref))

        s = r.integers(0, 9, (16, 8))
        s[r.random(s.shape) < 0.05] = -1
        q = np.where(r.random(s.shape) < 0.6, np.clip(s, 0, 8), r.integers(0, 9, s.shape))
        got, ref = Me.segmentation_metrics(q, s), seg_oracle(q, s)
        errs["segmentation"] = max(errs["segmentation"], max(abs(got[k] - ref[k]) for k in ref))

        occ = random_blob(r)
        prob = np.clip(random_blob(r) * 0.8 + r.random(occ.shape) * 0.3, 0, 1)
        got, ref = Me.voxel_metrics(prob, occ), voxel_oracle(prob, occ)
        errs["voxel"] = max(errs["voxel"], max(abs(got[k] - ref[k]) for k in ref))
    g = np.random.default_rng(0).uniform(0.5, 5, (8, 16))
    m = Me.depth_metrics(1.3 * g, g)
    example = (m["delta1"], m["delta2"]) == (0.0, 1.0)
    ok = max(errs.values()) < 1e-10 and example
    verdict(4, "metrics vs brute-force oracles", ok,
            ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" (20 instances each, tol 1e-10); "
            f"ratio 1.3 gives delta1={m['delta1']}, delta2={m['delta2']}")


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_depth_ordering(verdict, depth_run):
    grid = depth_run["grid"]
    sam, pgt = grid.values("SAM_34", "MAE"), grid.values("PSEUDO_GT", "MAE")
    mae_ok = E.majority_wins(sam, pgt, lambda x, y: x < y)
    oracle = grid.values("ORACLE", "delta1")
    others = {v: grid.values(v, "delta1") for v in DEPTH_VARIANTS if v != "ORACLE"}
    d1_ok = all(E.majority_wins(oracle, o, lambda x, y: x > y) for o in others.values())
    seconds = depth_run["seconds"]
    ok = mae_ok and d1_ok and seconds <= BUDGET
    verdict(5, "depth: SAM_34 MAE < PSEUDO_GT MAE, ORACLE best delta1", ok,
            f"MAE SAM_34 {_fmt(sam)} vs PSEUDO_GT {_fmt(pgt)}; delta1 ORACLE {_fmt(oracle)} vs "
            + ", ".join(f"{k} {_fmt(v)}" for k, v in others.items()) + f"; {seconds:.0f}s <= {BUDGET:.0f}s")


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_voxel_ordering(verdict, voxel_run):
    grid = voxel_run["grid"]
    sam, base = grid.values("SAM_34", "IoU"), grid.values("AUDIO_ONLY", "IoU")
    seconds = voxel_run["seconds"]
    ok = E.majority_wins(sam, base, lambda x, y: x > y) and seconds <= BUDGET
    verdict(6, "voxel: SAM_34 IoU > AUDIO_ONLY IoU", ok,
            f"IoU SAM_34 {_fmt(sam)} vs AUDIO_ONLY {_fmt(base)}; {seconds:.0f}s <= {BUDGET:.0f}s")


# -- 7 ---------------------------------------------------------------------


def test_criterion_7_generator(verdict, tmp_path):
    names = ("train.sdds", "val.sdds", "test.sdds", "manifest.json")
    S.build_dataset(60, 3, tmp_path / "a")
    S.build_dataset(60, 3, tmp_path / "b")
    identical = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    ray_err, labels_match = 0.0, True
    rooms = [S.sample_room(s) for s in range(8)]
    rooms.append(next(r for r in map(S.sample_room, range(8, 200)) if len(r.furniture)))
    for room in rooms:
        depth, sem = S.raycast(room)
        ref_d, ref_s = ray_oracle(room)
        ray_err = max(ray_err, float(np.abs(depth - ref_d).max()))
        labels_match &= bool(np.array_equal(sem, ref_s))
    samples = [S.generate_sample(s) for s in range(200)]
    nn, mean = S.information_probe(np.stack([s.audio for s in samples]), np.stack([s.depth for s in samples]))
    ok = identical and ray_err < 1e-9 and labels_match and nn < mean
    verdict(7, "determinism, ray-cast oracle, information probe", ok,
            f"byte-identical regeneration {identical}; ray-cast err {ray_err:.1e} < 1e-9 on {len(rooms)} rooms; "
            f"1-NN MAE {nn:.4f} < mean MAE {mean:.4f}")


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_teacher_freeze(verdict, depth_run, voxel_run):
    runs = 0
    same = True
    for run in (depth_run, voxel_run):
        runs += len(run["checksums"])
        same &= all(c == run["reference"] for c in run["checksums"])
        net = run["teacher"].net
        same &= net.frozen and not any(p.requires_grad for p in net.parameters())
    ok = same and runs == len(SEEDS) * (len(DEPTH_VARIANTS) + len(VOXEL_VARIANTS))
    verdict(8, "teacher checksum unchanged by every distillation run", ok,
            f"{runs} runs checked against the post-training checksum; all identical {same}")


def test_dataset_matches_requested_split(dataset):
    _, manifest, _ = dataset
    assert manifest["counts"] == {"train": 2000, "val": 300, "test": 500}
