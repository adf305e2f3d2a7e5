"""Brute-force loop oracles shared by the unit tests and the acceptance suite."""

import itertools
import math

import numpy as np

from samdistill import synthworld as S

CFG = S.WorldConfig()
TRIPLET_MARGIN = 0.3


# -- losses ----------------------------------------------------------------


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-8))


def brute_triplet(v, a, m=TRIPLET_MARGIN):
    n = len(v)
    total = 0.0
    for j in range(n):
        sims = [cos(v[j], a[k]) for k in range(n)]
        k = int(np.argmax(sims))
        for kn in range(n):
            if kn != k:
                total += max(0.0, m - sims[k] + sims[kn])
    return total / n


# -- metrics ---------------------------------------------------------------


def depth_oracle(pred, gt):
    errs, ratios = [], []
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g <= 0:
            continue
        errs.append(p - g)
        ratios.append(max(p / g, g / p) if p > 0 else np.inf)
    n = len(errs)
    return {
        "MAE": sum(abs(e) for e in errs) / n,
        "RMSE": (sum(e * e for e in errs) / n) ** 0.5,
        **{f"delta{i}": sum(r < 1.25**i for r in ratios) / n for i in (1, 2, 3)},
    }


def seg_oracle(pred, gt, c=9, layout=(1, 2, 0)):
    tp = [0] * c
    gt_n = [0] * c
    pr_n = [0] * c
    total = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if not 0 <= g < c:
            continue
        total += 1
        gt_n[g] += 1
        pr_n[p] += 1
        tp[g] += p == g
    iou, acc = {}, []
    for k in range(c):
        union = gt_n[k] + pr_n[k] - tp[k]
        if union:
            iou[k] = tp[k] / union
        if gt_n[k]:
            acc.append(tp[k] / gt_n[k])
    lay = [iou[k] for k in layout if k in iou]
    return {
        "pAcc": sum(tp) / total,
        "mAcc": sum(acc) / len(acc),
        "mIoU": sum(iou.values()) / len(iou),
        "3IoU": sum(lay) / len(lay),
    }


def random_blob(r, n=8):
    """A random ball plus 5% salt noise."""
    c = r.uniform(2, n - 2, 3)
    rad = r.uniform(1.5, 3.5)
    idx = np.indices((n, n, n)).transpose(1, 2, 3, 0) + 0.5
    occ = np.linalg.norm(idx - c, axis=-1) < rad
    return occ | (r.random((n, n, n)) < 0.05)


def surface_oracle(occ):
    n = occ.shape
    pts = []
    for i, j, k in itertools.product(*(range(s) for s in n)):
        if not occ[i, j, k]:
            continue
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            q = (i + d[0], j + d[1], k + d[2])
            inside = all(0 <= q[a] < n[a] for a in range(3))
            if not inside or not occ[q]:
                pts.append((i, j, k))
                break
    return pts


def normal_oracle(occ, idx):
    def at(q):
        return float(occ[q]) if all(0 <= q[a] < occ.shape[a] for a in range(3)) else 0.0

    g = []
    for a in range(3):
        up = list(idx)
        dn = list(idx)
        up[a] += 1
        dn[a] -= 1
        g.append((at(tuple(up)) - at(tuple(dn))) / 2)
    norm = sum(x * x for x in g) ** 0.5
    return [-x / norm for x in g] if norm else [0.0, 0.0, 0.0]


def voxel_oracle(prob, gt):
    pred = prob >= 0.5
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += p and g
        union += p or g
    out = {"IoU": inter / union if union else 1.0}
    sp, sg = surface_oracle(pred), surface_oracle(gt)
    if not sp or not sg:
        return {**out, "Chamfer": 3**0.5, "NC": 0.0, "F1": 0.0}
    n = pred.shape[0]
    cen = lambda q: [(x + 0.5) / n for x in q]

    def nearest(src, dst):
        res = []
        for s in src:
            best, arg = np.inf, -1
            for j, d in enumerate(dst):
                dist = sum(abs(x - y) for x, y in zip(cen(s), cen(d)))
                if dist < best:
                    best, arg = dist, j
            res.append((best, arg))
        return res

    def agree(a, b):
        za, zb = not any(a), not any(b)
        if za and zb:
            return 1.0
        if za or zb:
            return 0.0
        return abs(sum(x * y for x, y in zip(a, b)))

    pg, gp = nearest(sp, sg), nearest(sg, sp)
    out["Chamfer"] = 0.5 * (np.mean([d for d, _ in pg]) + np.mean([d for d, _ in gp]))
    npd = [normal_oracle(pred, q) for q in sp]
    ngt = [normal_oracle(gt, q) for q in sg]
    nc1 = np.mean([agree(npd[i], ngt[j]) for i, (_, j) in enumerate(pg)])
    nc2 = np.mean([agree(ngt[i], npd[j]) for i, (_, j) in enumerate(gp)])
    out["NC"] = 0.5 * (nc1 + nc2)
    tau = 1.0 / n + 1e-12
    prec = np.mean([d <= tau for d, _ in pg])
    rec = np.mean([d <= tau for d, _ in gp])
    out["F1"] = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return out


# -- generator -------------------------------------------------------------


def ray_oracle(room, cfg=CFG):
    """Per-pixel nearest hit against every wall, floor, ceiling and box face."""
    h, w = cfg.pano_height, cfg.pano_width
    ox, oy = room.agent_position
    oz = cfg.agent_height
    depth = np.zeros((h, w))
    sem = np.zeros((h, w), dtype=int)
    for row in range(h):
        phi = math.pi / 2 - math.pi * (row + 0.5) / h
        for col in range(w):
            th = room.agent_heading + 2 * math.pi * col / w
            dx, dy, dz = math.cos(phi) * math.cos(th), math.cos(phi) * math.sin(th), math.sin(phi)
            best, mat = math.inf, -1
            n = len(room.polygon)
            for i in range(n):
                (ax, ay), (bx, by) = room.polygon[i], room.polygon[(i + 1) % n]
                ex, ey = bx - ax, by - ay
                den = dx * ey - dy * ex
                if abs(den) < 1e-15:
                    continue
                t = ((ax - ox) * ey - (ay - oy) * ex) / den
                s = ((ax - ox) * dy - (ay - oy) * dx) / den
                if t > 0 and 0 <= s <= 1 and t < best:
                    best, mat = t, int(room.wall_materials[i])
            if dz > 0 and (room.ceiling_height - oz) / dz < best:
                best, mat = (room.ceiling_height - oz) / dz, S.CEILING
            if dz < 0 and oz / -dz < best:
                best, mat = oz / -dz, S.FLOOR
            for box, bm in zip(room.furniture, room.furniture_materials):
                lo = (box[0], box[1], 0.0)
                hi = (box[2], box[3], box[4])
                o = (ox, oy, oz)
                d = (dx, dy, dz)
                for axis in range(3):
                    if abs(d[axis]) < 1e-15:
                        continue
                    for plane in (lo[axis], hi[axis]):
                        t = (plane - o[axis]) / d[axis]
                        if not 0 < t < best:
                            continue
                        p = [o[k] + t * d[k] for k in range(3)]
                        if all(lo[k] - 1e-12 <= p[k] <= hi[k] + 1e-12 for k in range(3) if k != axis):
                            best, mat = t, int(bm)
            depth[row, col] = best
            sem[row, col] = mat
    return depth, sem


def audio_oracle(room, cfg=CFG):
    """Mirror-image sources accumulated bin by bin, noise-free."""
    grid = np.zeros((cfg.spec_time, cfg.spec_freq, 2))
    p = room.agent_position
    sources = []
    n = len(room.polygon)
    for i in range(n):
        a, b = room.polygon[i], room.polygon[(i + 1) % n]
        e = b - a
        normal = np.array([-e[1], e[0]]) / np.hypot(*e)
        image = p - 2 * np.dot(p - a, normal) * normal
        mid = (p + image) / 2  # specular point for a co-located source
        s = np.dot(mid - a, e) / np.dot(e, e)
        if 0 <= s <= 1:
            v = image - p
            az = math.atan2(v[1], v[0]) - room.agent_heading
            sources.append((np.hypot(*v), az, int(room.wall_materials[i])))
    sources.append((2 * cfg.agent_height, None, S.FLOOR))
    sources.append((2 * (room.ceiling_height - cfg.agent_height), None, S.CEILING))
    for length, az, mat in sources:
        tau = length / cfg.path_per_bin
        for f in range(cfg.spec_freq):
            fr = (f + 0.5) / cfg.spec_freq
            mag = (1 - S.ABSORPTION[mat]) / length * math.exp(-S.SPECTRAL_TILT[mat] * fr)
            if az is None:
                gains = (0.5, 0.5)
            else:
                mag *= 1 - cfg.rear_cue * 0.5 * (1 - math.cos(az)) * fr
                gains = (0.5 * (1 + cfg.ild * math.sin(az)), 0.5 * (1 - cfg.ild * math.sin(az)))
            for t in range(cfg.spec_time):
                weight = max(0.0, 1 - abs(t - tau))
                for ch in range(2):
                    grid[t, f, ch] += weight * mag * gains[ch]
    return np.log1p(cfg.compression * grid)
