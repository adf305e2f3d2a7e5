"""Loop kernels compiled with numba; same contracts as ``_numpy``."""

import math

import numpy as np
from numba import njit

HIT_NONE = -1


@njit(cache=True)
def _ray_hit(ox, oy, dx, dy, seg_a, seg_b):
    best = np.inf
    best_i = HIT_NONE
    for i in range(seg_a.shape[0]):
        ex = seg_b[i, 0] - seg_a[i, 0]
        ey = seg_b[i, 1] - seg_a[i, 1]
        denom = dx * ey - dy * ex
        if abs(denom) <= 1e-15:
            continue
        aox = seg_a[i, 0] - ox
        aoy = seg_a[i, 1] - oy
        t = (aox * ey - aoy * ex) / denom
        s = (aox * dy - aoy * dx) / denom
        if t > 1e-12 and s >= 0.0 and s <= 1.0 and t < best:
            best = t
            best_i = i
    return best, best_i


@njit(cache=True)
def ray_segment_distances(origin, thetas, seg_a, seg_b):
    n = thetas.shape[0]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for r in range(n):
        dist[r], idx[r] = _ray_hit(origin[0], origin[1], math.cos(thetas[r]), math.sin(thetas[r]), seg_a, seg_b)
    return dist, idx


@njit(cache=True)
def _slab_t(o, d, lo, hi):
    tmin = -np.inf
    tmax = np.inf
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if o[k] < lo[k] or o[k] > hi[k]:
                return np.inf
            continue
        t1 = (lo[k] - o[k]) / d[k]
        t2 = (hi[k] - o[k]) / d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
    if tmax >= tmin and tmin > 1e-12:
        return tmin
    return np.inf


@njit(cache=True)
def raycast_panorama(origin, agent_h, ceil_h, heading, seg_a, seg_b, seg_mat, boxes, box_mat,
                     width, height, floor_mat, ceil_mat):
    depth = np.empty((height, width))
    sem = np.empty((height, width), dtype=np.int64)
    o3 = np.array([origin[0], origin[1], agent_h])
    d3 = np.empty(3)
    lo = np.empty(3)
    hi = np.empty(3)
    for u in range(width):
        theta = heading + 2.0 * np.pi * u / width
        ct = math.cos(theta)
        st = math.sin(theta)
        r, si = _ray_hit(origin[0], origin[1], ct, st, seg_a, seg_b)
        for v in range(height):
            phi = 0.5 * np.pi - np.pi * (v + 0.5) / height
            cphi = math.cos(phi)
            sphi = math.sin(phi)
            best = r / cphi
            mat = seg_mat[si]
            if sphi > 0:
                t = (ceil_h - agent_h) / sphi
                if t < best:
                    best = t
                    mat = ceil_mat
            elif sphi < 0:
                t = agent_h / (-sphi)
                if t < best:
                    best = t
                    mat = floor_mat
            d3[0] = cphi * ct
            d3[1] = cphi * st
            d3[2] = sphi
            for b in range(boxes.shape[0]):
                lo[0] = boxes[b, 0]
                lo[1] = boxes[b, 1]
                lo[2] = 0.0
                hi[0] = boxes[b, 2]
                hi[1] = boxes[b, 3]
                hi[2] = boxes[b, 4]
                t = _slab_t(o3, d3, lo, hi)
                if t < best:
                    best = t
                    mat = box_mat[b]
            depth[v, u] = best
            sem[v, u] = mat
    return depth, sem


@njit(cache=True)
def _inside(x, y, poly):
    n = poly.shape[0]
    c = False
    for i in range(n):
        xa, ya = poly[i, 0], poly[i, 1]
        j = (i + 1) % n
        xb, yb = poly[j, 0], poly[j, 1]
        if (ya > y) != (yb > y):
            xc = xa + (y - ya) * (xb - xa) / (yb - ya)
            if x < xc:
                c = not c
    return c


@njit(cache=True)
def points_in_polygon(pts, poly):
    out = np.empty(pts.shape[0], dtype=np.bool_)
    for i in range(pts.shape[0]):
        out[i] = _inside(pts[i, 0], pts[i, 1], poly)
    return out


@njit(cache=True)
def voxel_solid(centers, poly, ceil_h, boxes):
    out = np.empty(centers.shape[0], dtype=np.bool_)
    for i in range(centers.shape[0]):
        x, y, z = centers[i, 0], centers[i, 1], centers[i, 2]
        solid = z < 0.0 or z > ceil_h or not _inside(x, y, poly)
        if not solid:
            for b in range(boxes.shape[0]):
                if (boxes[b, 0] <= x <= boxes[b, 2] and boxes[b, 1] <= y <= boxes[b, 3]
                        and 0.0 <= z <= boxes[b, 4]):
                    solid = True
                    break
        out[i] = solid
    return out


@njit(cache=True)
def nearest_l1(p, q):
    n = p.shape[0]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        bi = 0
        for j in range(q.shape[0]):
            d = 0.0
            for k in range(p.shape[1]):
                d += abs(p[i, k] - q[j, k])
            if d < best:
                best = d
                bi = j
        dist[i] = best
        idx[i] = bi
    return dist, idx
