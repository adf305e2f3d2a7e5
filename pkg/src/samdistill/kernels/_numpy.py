"""Vectorized numpy implementations of the hot geometric kernels."""

import numpy as np

HIT_NONE = -1


def ray_segment_distances(origin, thetas, seg_a, seg_b):
    """Nearest wall hit along horizontal rays.

    Returns (dist, seg_index) per angle; dist is +inf when nothing is hit.
    """
    d = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)[:, None, :]  # (R,1,2)
    e = (seg_b - seg_a)[None, :, :]  # (1,S,2)
    ao = (seg_a - origin)[None, :, :]
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    ok = np.abs(denom) > 1e-15
    safe = np.where(ok, denom, 1.0)
    t = (ao[..., 0] * e[..., 1] - ao[..., 1] * e[..., 0]) / safe
    s = (ao[..., 0] * d[..., 1] - ao[..., 1] * d[..., 0]) / safe
    valid = ok & (t > 1e-12) & (s >= 0.0) & (s <= 1.0)
    t = np.where(valid, t, np.inf)
    idx = np.argmin(t, axis=1)
    dist = t[np.arange(t.shape[0]), idx]
    idx = np.where(np.isfinite(dist), idx, HIT_NONE)
    return dist, idx


def raycast_panorama(origin, agent_h, ceil_h, heading, seg_a, seg_b, seg_mat, boxes, box_mat,
                     width, height, floor_mat, ceil_mat):
    """Equirectangular depth and hit-material maps of shape (height, width)."""
    thetas = heading + 2.0 * np.pi * np.arange(width) / width
    phis = 0.5 * np.pi - np.pi * (np.arange(height) + 0.5) / height
    r, seg_idx = ray_segment_distances(origin, thetas, seg_a, seg_b)
    cphi = np.cos(phis)[:, None]
    sphi = np.sin(phis)[:, None]
    depth = np.broadcast_to(r[None, :] / cphi, (height, width)).copy()
    sem = np.broadcast_to(seg_mat[seg_idx][None, :], (height, width)).copy()

    up = np.broadcast_to(sphi > 0, (height, width))
    down = np.broadcast_to(sphi < 0, (height, width))
    with np.errstate(divide="ignore"):
        t_ceil = np.broadcast_to((ceil_h - agent_h) / np.where(sphi > 0, sphi, np.nan), (height, width))
        t_floor = np.broadcast_to(agent_h / np.where(sphi < 0, -sphi, np.nan), (height, width))
    sel = up & (t_ceil < depth)
    depth = np.where(sel, t_ceil, depth)
    sem = np.where(sel, ceil_mat, sem)
    sel = down & (t_floor < depth)
    depth = np.where(sel, t_floor, depth)
    sem = np.where(sel, floor_mat, sem)

    if len(boxes):
        ct = np.cos(thetas)[None, :]
        st = np.sin(thetas)[None, :]
        dirs = np.stack(np.broadcast_arrays(cphi * ct, cphi * st, sphi * np.ones_like(ct)), axis=-1)
        o3 = np.array([origin[0], origin[1], agent_h])
        for b in range(len(boxes)):
            lo = np.array([boxes[b, 0], boxes[b, 1], 0.0])
            hi = np.array([boxes[b, 2], boxes[b, 3], boxes[b, 4]])
            t = _slab(o3, dirs, lo, hi)
            sel = t < depth
            depth = np.where(sel, t, depth)
            sem = np.where(sel, box_mat[b], sem)
    return depth, sem.astype(np.int64)


def _slab(o, dirs, lo, hi):
    tmin = np.full(dirs.shape[:-1], -np.inf)
    tmax = np.full(dirs.shape[:-1], np.inf)
    miss = np.zeros(dirs.shape[:-1], dtype=bool)
    for k in range(3):
        dk = dirs[..., k]
        par = np.abs(dk) < 1e-15
        miss |= par & ((o[k] < lo[k]) | (o[k] > hi[k]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[k] - o[k]) / dk
            t2 = (hi[k] - o[k]) / dk
        near = np.where(par, -np.inf, np.minimum(t1, t2))
        far = np.where(par, np.inf, np.maximum(t1, t2))
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    hit = (~miss) & (tmax >= tmin) & (tmin > 1e-12)
    return np.where(hit, tmin, np.inf)


def points_in_polygon(pts, poly):
    """Even-odd crossing test for (P, 2) points against an (N, 2) polygon."""
    x = pts[:, 0:1]
    y = pts[:, 1:2]
    xa, ya = poly[:, 0][None, :], poly[:, 1][None, :]
    xb, yb = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    straddle = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = xa + (y - ya) * (xb - xa) / (yb - ya)
    crosses = straddle & (x < xcross)
    return (crosses.sum(axis=1) % 2) == 1


def voxel_solid(centers, poly, ceil_h, boxes):
    """Occupancy of (P, 3) cell centres: outside the free room volume or inside furniture."""
    inside = points_in_polygon(centers[:, :2], poly)
    z = centers[:, 2]
    solid = (~inside) | (z < 0.0) | (z > ceil_h)
    for b in range(len(boxes)):
        x0, y0, x1, y1, h = boxes[b]
        solid |= (
            (centers[:, 0] >= x0) & (centers[:, 0] <= x1)
            & (centers[:, 1] >= y0) & (centers[:, 1] <= y1)
            & (z >= 0.0) & (z <= h)
        )
    return solid


def nearest_l1(p, q):
    """For each row of p, the L1 distance to and index of its nearest row in q."""
    d = np.abs(p[:, None, :] - q[None, :, :]).sum(-1)
    idx = np.argmin(d, axis=1)
    return d[np.arange(len(p)), idx], idx
