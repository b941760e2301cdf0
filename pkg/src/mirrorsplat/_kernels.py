"""Per-tile compositing kernels.

Each call handles a list of tiles and writes only the pixels (forward) or the
tile-list entries (backward) owned by those tiles, so disjoint tile sets can
run on separate threads without synchronisation.
"""

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4

# per-entry backward layout: mean2d(2) conic(3) opacity(1) features(F)
G_MEAN = 0
G_CONIC = 2
G_OPAC = 5
G_FEAT = 6


@njit(nogil=True, cache=True)
def _skip_power(opacity):
    # powers below this cannot reach ALPHA_MIN; the small slack keeps the
    # exact alpha test authoritative so the early-out never changes a result
    out = np.empty(opacity.shape[0])
    for g in range(opacity.shape[0]):
        out[g] = np.log(ALPHA_MIN / max(opacity[g], 1e-300)) - 1e-6
    return out


@njit(nogil=True, cache=True)
def forward_tiles(tile_ids, ranges, entries, means2d, conic, opacity, feats,
                  width, height, tiles_x, tile_size, out, t_final, n_last, counts):
    nf = feats.shape[1]
    skip = _skip_power(opacity)
    for tid in tile_ids:
        start = ranges[tid, 0]
        end = ranges[tid, 1]
        x0 = (tid % tiles_x) * tile_size
        y0 = (tid // tiles_x) * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                T = 1.0
                last = start
                hits = 0
                clamps = 0
                for e in range(start, end):
                    g = entries[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0 or power < skip[g]:
                        continue
                    a = opacity[g] * np.exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamps += 1
                    if a < ALPHA_MIN:
                        continue
                    hits += 1
                    w = a * T
                    for k in range(nf):
                        out[py, px, k] += feats[g, k] * w
                    T = T * (1.0 - a)
                    last = e + 1
                    if T < T_MIN:
                        break
                t_final[py, px] = T
                n_last[py, px] = last
                counts[py, px, 0] = hits
                counts[py, px, 1] = clamps


@njit(nogil=True, cache=True)
def backward_tiles(tile_ids, ranges, entries, means2d, conic, opacity, feats,
                   width, height, tiles_x, tile_size, n_last, upstream, entry_grads):
    nf = feats.shape[1]
    max_len = 0
    for tid in tile_ids:
        n = ranges[tid, 1] - ranges[tid, 0]
        if n > max_len:
            max_len = n
    hit_e = np.empty(max_len, dtype=np.int64)
    hit_a = np.empty(max_len)
    hit_t = np.empty(max_len)
    hit_g = np.empty(max_len)
    hit_clamped = np.empty(max_len, dtype=np.bool_)
    suffix = np.empty(nf)
    skip = _skip_power(opacity)
    for tid in tile_ids:
        start = ranges[tid, 0]
        x0 = (tid % tiles_x) * tile_size
        y0 = (tid // tiles_x) * tile_size
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                last = n_last[py, px]
                # replay the forward walk, recording every contributing splat
                T = 1.0
                nh = 0
                for e in range(start, last):
                    g = entries[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0 or power < skip[g]:
                        continue
                    gv = np.exp(power)
                    a = opacity[g] * gv
                    clamped = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped = True
                    if a < ALPHA_MIN:
                        continue
                    hit_e[nh] = e
                    hit_a[nh] = a
                    hit_t[nh] = T
                    hit_g[nh] = gv
                    hit_clamped[nh] = clamped
                    nh += 1
                    T = T * (1.0 - a)
                for k in range(nf):
                    suffix[k] = 0.0
                for h in range(nh - 1, -1, -1):
                    e = hit_e[h]
                    g = entries[e]
                    a = hit_a[h]
                    Ti = hit_t[h]
                    w = a * Ti
                    dl_da = 0.0
                    for k in range(nf):
                        up = upstream[py, px, k]
                        entry_grads[e, G_FEAT + k] += w * up
                        dl_da += up * (feats[g, k] * Ti - suffix[k] / (1.0 - a))
                        suffix[k] += feats[g, k] * w
                    if hit_clamped[h]:
                        continue
                    gv = hit_g[h]
                    entry_grads[e, G_OPAC] += dl_da * gv
                    dl_dpow = dl_da * opacity[g] * gv
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    entry_grads[e, G_MEAN] += dl_dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    entry_grads[e, G_MEAN + 1] += dl_dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    entry_grads[e, G_CONIC] += dl_dpow * (-0.5 * dx * dx)
                    entry_grads[e, G_CONIC + 1] += dl_dpow * (-dx * dy)
                    entry_grads[e, G_CONIC + 2] += dl_dpow * (-0.5 * dy * dy)


@njit(nogil=True, cache=True)
def reduce_entries(entries, entry_grads, n_projected):
    """Sum per-entry gradients into per-splat rows in entry order (deterministic)."""
    out = np.zeros((n_projected, entry_grads.shape[1]))
    for e in range(entries.shape[0]):
        g = entries[e]
        for k in range(entry_grads.shape[1]):
            out[g, k] += entry_grads[e, k]
    return out
