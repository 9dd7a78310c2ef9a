"""Independent nested-loop implementations of the grid operators.

Every neighbour lookup, coastline decision, and boundary case is written
out with scalar Python arithmetic. Only the trigonometric values come from
numpy arrays (numpy's vectorised cos may differ from libm in the last bit);
each expression is evaluated in the same operation order as the vectorised
code so results can be compared bit for bit.
"""
import numpy as np


def _neighbours(grid, f, i, j):
    h, w = grid.shape
    m = grid.mask
    je, jw = (j + 1) % w, (j - 1) % w
    i_n, i_s = min(i + 1, h - 1), max(i - 1, 0)
    return {
        "c": f[i, j],
        "e": (f[i, je], m[i, je]), "w": (f[i, jw], m[i, jw]),
        "n": (f[i_n, j], m[i_n, j]), "s": (f[i_s, j], m[i_s, j]),
    }


def _diffs(nb, forward, backward):
    c = nb["c"]
    xf, of = nb[forward]
    xb, ob = nb[backward]
    de = (xf - c) if of else 0.0
    dw = (c - xb) if ob else 0.0
    return de, dw


def ddx(grid, f):
    h, w = grid.shape
    r, dlon = grid.radius, grid.d_lon
    out = np.zeros((h, w))
    for i in range(h):
        coef = 1.0 / (2.0 * r * float(grid.cos_lat[i]) * dlon)
        for j in range(w):
            if not grid.mask[i, j]:
                continue
            de, dw = _diffs(_neighbours(grid, f, i, j), "e", "w")
            out[i, j] = (de + dw) * coef
    return out


def ddy(grid, f):
    h, w = grid.shape
    r, dlat = grid.radius, grid.d_lat
    out = np.zeros((h, w))
    for i in range(h):
        edge = i == 0 or i == h - 1
        coef = 1.0 / (r * dlat) if edge else 1.0 / (2.0 * r * dlat)
        for j in range(w):
            if not grid.mask[i, j]:
                continue
            dn, ds = _diffs(_neighbours(grid, f, i, j), "n", "s")
            out[i, j] = (dn + ds) * coef
    return out


def laplacian(grid, f):
    h, w = grid.shape
    r, dlat, dlon = grid.radius, grid.d_lat, grid.d_lon
    cos_n = np.cos(grid.lat_centers + 0.5 * dlat)
    cos_s = np.cos(grid.lat_centers - 0.5 * dlat)
    out = np.zeros((h, w))
    for i in range(h):
        c = float(grid.cos_lat[i])
        lon_coef = 1.0 / (r * r * c * c * dlon * dlon)
        lat_coef = 1.0 / (r * r * c * dlat * dlat)
        for j in range(w):
            if not grid.mask[i, j]:
                continue
            nb = _neighbours(grid, f, i, j)
            de, dw = _diffs(nb, "e", "w")
            dn, ds = _diffs(nb, "n", "s")
            flux_n = dn * float(cos_n[i]) if nb["n"][1] else 0.0
            flux_s = ds * float(cos_s[i]) if nb["s"][1] else 0.0
            out[i, j] = (de - dw) * lon_coef + (flux_n - flux_s) * lat_coef
    return out
