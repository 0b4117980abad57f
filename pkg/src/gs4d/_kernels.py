"""Numba inner loops for the tile rasterizer.

Per-pixel compositing follows a strict contract so that outputs are bitwise
independent of the tile size: each pixel sees exactly the splats whose
bounding box covers it, in global depth order, and every arithmetic step is
an exactly-rounded scalar operation on the same values regardless of tiling.

Splat arrays passed here are already depth-sorted; `ids` holds positions into
those sorted arrays, grouped per tile (CSR layout via `ranges`).
"""
import numpy as np
from numba import njit

TERM_NONE = np.int32(2147483647)


@njit(cache=True)
def blend_forward(
    width,
    height,
    tile_size,
    ranges,
    ids,
    mean2d,
    conic,
    opacity,
    color,
    bbox,
    alpha_cutoff,
    t_floor,
    max_alpha,
    out_color,
    out_t,
    out_count,
    active,
):
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    for ty in range(n_ty):
        for tx in range(n_tx):
            tid = ty * n_tx + tx
            s, e = ranges[tid], ranges[tid + 1]
            if s == e:
                continue
            px0 = tx * tile_size
            px1 = min(px0 + tile_size, width) - 1
            py0 = ty * tile_size
            py1 = min(py0 + tile_size, height) - 1
            for k in range(s, e):
                g = ids[k]
                x0 = max(bbox[g, 0], px0)
                x1 = min(bbox[g, 1], px1)
                y0 = max(bbox[g, 2], py0)
                y1 = min(bbox[g, 3], py1)
                if x0 > x1 or y0 > y1:
                    continue
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                u = mean2d[g, 0]
                v = mean2d[g, 1]
                o = opacity[g]
                cr = color[g, 0]
                cg = color[g, 1]
                cbl = color[g, 2]
                for iy in range(y0, y1 + 1):
                    dy = iy - v
                    for ix in range(x0, x1 + 1):
                        if not active[iy, ix]:
                            continue
                        dx = ix - u
                        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        al = o * np.exp(-0.5 * q)
                        if al > max_alpha:
                            al = max_alpha
                        if al < alpha_cutoff:
                            continue
                        t = out_t[iy, ix]
                        tn = t * (1.0 - al)
                        if tn < t_floor:
                            active[iy, ix] = False
                            continue
                        w = t * al
                        out_color[iy, ix, 0] += w * cr
                        out_color[iy, ix, 1] += w * cg
                        out_color[iy, ix, 2] += w * cbl
                        out_t[iy, ix] = tn
                        out_count[iy, ix] += 1


@njit(cache=True)
def blend_replay_termination(
    width,
    height,
    tile_size,
    ranges,
    ids,
    mean2d,
    conic,
    opacity,
    bbox,
    alpha_cutoff,
    t_floor,
    max_alpha,
    out_t,
    term_at,
):
    """Recomputes final transmittance and records, per pixel, the sorted
    position of the splat whose acceptance would have dropped T below the
    floor (TERM_NONE when the pixel never terminates)."""
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    for ty in range(n_ty):
        for tx in range(n_tx):
            tid = ty * n_tx + tx
            s, e = ranges[tid], ranges[tid + 1]
            if s == e:
                continue
            px0 = tx * tile_size
            px1 = min(px0 + tile_size, width) - 1
            py0 = ty * tile_size
            py1 = min(py0 + tile_size, height) - 1
            for k in range(s, e):
                g = ids[k]
                x0 = max(bbox[g, 0], px0)
                x1 = min(bbox[g, 1], px1)
                y0 = max(bbox[g, 2], py0)
                y1 = min(bbox[g, 3], py1)
                if x0 > x1 or y0 > y1:
                    continue
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                u = mean2d[g, 0]
                v = mean2d[g, 1]
                o = opacity[g]
                for iy in range(y0, y1 + 1):
                    dy = iy - v
                    for ix in range(x0, x1 + 1):
                        if term_at[iy, ix] != TERM_NONE:
                            continue
                        dx = ix - u
                        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        al = o * np.exp(-0.5 * q)
                        if al > max_alpha:
                            al = max_alpha
                        if al < alpha_cutoff:
                            continue
                        t = out_t[iy, ix]
                        tn = t * (1.0 - al)
                        if tn < t_floor:
                            term_at[iy, ix] = g
                            continue
                        out_t[iy, ix] = tn


@njit(cache=True)
def blend_backward(
    width,
    height,
    tile_size,
    ranges,
    ids,
    mean2d,
    conic,
    opacity,
    color,
    bbox,
    alpha_cutoff,
    t_floor,
    max_alpha,
    background,
    upstream,
    t_final,
    term_at,
    t_run,
    suffix,
    d_color,
    d_opacity_raw,
    d_mean2d,
    d_conic,
):
    """Reverse sweep over each tile's splat list.

    `t_run` must start as a copy of `t_final`; `suffix` as
    t_final[..., None] * background. Transmittance before each accepted splat
    is recovered by dividing out its (1 - alpha); alpha is capped at
    max_alpha so the divisor stays >= 1 - max_alpha.
    """
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    for ty in range(n_ty):
        for tx in range(n_tx):
            tid = ty * n_tx + tx
            s, e = ranges[tid], ranges[tid + 1]
            if s == e:
                continue
            px0 = tx * tile_size
            px1 = min(px0 + tile_size, width) - 1
            py0 = ty * tile_size
            py1 = min(py0 + tile_size, height) - 1
            for k in range(e - 1, s - 1, -1):
                g = ids[k]
                x0 = max(bbox[g, 0], px0)
                x1 = min(bbox[g, 1], px1)
                y0 = max(bbox[g, 2], py0)
                y1 = min(bbox[g, 3], py1)
                if x0 > x1 or y0 > y1:
                    continue
                ca = conic[g, 0]
                cb = conic[g, 1]
                cc = conic[g, 2]
                u = mean2d[g, 0]
                v = mean2d[g, 1]
                o = opacity[g]
                cr = color[g, 0]
                cg = color[g, 1]
                cbl = color[g, 2]
                for iy in range(y0, y1 + 1):
                    dy = iy - v
                    for ix in range(x0, x1 + 1):
                        if g >= term_at[iy, ix]:
                            continue
                        dx = ix - u
                        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        expq = np.exp(-0.5 * q)
                        al = o * expq
                        clamped = False
                        if al > max_alpha:
                            al = max_alpha
                            clamped = True
                        if al < alpha_cutoff:
                            continue
                        one_m = 1.0 - al
                        ti = t_run[iy, ix] / one_m
                        t_run[iy, ix] = ti
                        w = ti * al
                        g0 = upstream[iy, ix, 0]
                        g1 = upstream[iy, ix, 1]
                        g2 = upstream[iy, ix, 2]
                        d_color[g, 0] += w * g0
                        d_color[g, 1] += w * g1
                        d_color[g, 2] += w * g2
                        gc = g0 * cr + g1 * cg + g2 * cbl
                        gs = (
                            g0 * suffix[iy, ix, 0]
                            + g1 * suffix[iy, ix, 1]
                            + g2 * suffix[iy, ix, 2]
                        )
                        dal = gc * ti - gs / one_m
                        suffix[iy, ix, 0] += w * cr
                        suffix[iy, ix, 1] += w * cg
                        suffix[iy, ix, 2] += w * cbl
                        if clamped:
                            continue
                        d_opacity_raw[g] += dal * expq
                        dq = dal * (-0.5 * al)
                        d_conic[g, 0] += dq * dx * dx
                        d_conic[g, 1] += dq * 2.0 * dx * dy
                        d_conic[g, 2] += dq * dy * dy
                        d_mean2d[g, 0] += dq * (-2.0) * (ca * dx + cb * dy)
                        d_mean2d[g, 1] += dq * (-2.0) * (cb * dx + cc * dy)
