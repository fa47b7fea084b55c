"""Pure NumPy implementations of the compiled kernels.

These must agree bitwise with ``_kernels.pyx``; both use the same integer
pixel rules and the same fixed-order floating-point accumulation.
"""

import numpy as np


def splat_zbuffer(u, v, z, rgb, width, height, splat_px):
    """Depth-tested square splats.

    Each point writes a ``splat_px`` square around its projected location.
    The pixel nearest the projection is tier 0, the rest of the square tier 1.
    Per pixel the lexicographically smallest ``(tier, z, r, g, b)`` wins, so
    the result does not depend on point order.

    Returns ``(image (H, W, 3), covered (H, W) bool)``; uncovered pixels are 0.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    image = np.zeros((height, width, 3))
    covered = np.zeros((height, width), dtype=bool)
    if u.size == 0:
        return image, covered

    s = int(splat_px)
    nu = np.floor(u + 0.5).astype(np.int64)
    nv = np.floor(v + 0.5).astype(np.int64)
    back = (s - 1) // 2
    su = nu - back
    sv = nv - back
    if s % 2 == 0:
        su -= (u < nu).astype(np.int64)
        sv -= (v < nv).astype(np.int64)

    offs = np.arange(s)
    pu = (su[:, None, None] + offs[None, None, :]).repeat(s, axis=1)
    pv = (sv[:, None, None] + offs[None, :, None]).repeat(s, axis=2)
    tier = ((pu != nu[:, None, None]) | (pv != nv[:, None, None])).astype(np.int64)
    idx = np.broadcast_to(np.arange(u.size)[:, None, None], pu.shape)

    pu, pv, tier, idx = pu.ravel(), pv.ravel(), tier.ravel(), idx.ravel()
    ok = (pu >= 0) & (pu < width) & (pv >= 0) & (pv < height)
    pu, pv, tier, idx = pu[ok], pv[ok], tier[ok], idx[ok]
    if pu.size == 0:
        return image, covered
    pix = pv * width + pu
    c = rgb[idx]
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], z[idx], tier, pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    flat = image.reshape(-1, 3)
    flat[pix[win]] = c[win]
    covered.reshape(-1)[pix[win]] = True
    return image, covered


def kmeans_assign(points, centers):
    """Nearest center per point by squared distance, ties to the lowest index.

    Accumulates over dimensions in index order so the compiled kernel can
    reproduce the sums exactly.
    """
    x = np.asarray(points, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    dist = np.zeros((x.shape[0], c.shape[0]))
    for d in range(x.shape[1]):
        diff = x[:, d, None] - c[None, :, d]
        dist += diff * diff
    labels = np.argmin(dist, axis=1)
    return labels.astype(np.int64), dist[np.arange(x.shape[0]), labels]


def polyline_distance(poly, pts):
    """Distance from each point to the nearest segment of ``poly``."""
    poly = np.asarray(poly, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ax, ay = poly[:-1, 0][None], poly[:-1, 1][None]
    abx = (poly[1:, 0] - poly[:-1, 0])[None]
    aby = (poly[1:, 1] - poly[:-1, 1])[None]
    denom = abx * abx + aby * aby
    denom = np.where(denom > 1e-18, denom, 1e-18)
    px, py = pts[:, 0:1], pts[:, 1:2]
    t = ((px - ax) * abx + (py - ay) * aby) / denom
    t = np.minimum(np.maximum(t, 0.0), 1.0)
    dx = px - (ax + t * abx)
    dy = py - (ay + t * aby)
    d2 = dx * dx + dy * dy
    return np.sqrt(np.min(d2, axis=1)) if poly.shape[0] > 1 else np.sqrt((px[:, 0] - poly[0, 0]) ** 2 + (py[:, 0] - poly[0, 1]) ** 2)
