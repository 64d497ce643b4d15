"""Numba kernels for batched stencil construction and Gauss-Seidel sweeps.

This module depends only on numpy/numba so both the stencil and solver layers
can use it.  Every kernel mirrors a pure-Python reference implementation
elsewhere in the package; tests compare the two paths.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LOG_CLAMP = 1e-12  # floor for log max(x, .) in determinant-type operators

# phi/G codes for eigen terms
PHI_CODE_LOGMAX = 0   # G(s) = -exp(s), phi = log max(x, clamp): value -prod max(q, clamp)
PHI_CODE_MIN0 = 1     # value -(sum min(q, 0))
PHI_CODE_ATAN = 2     # value -(sum atan(max(q,0)) + min(q,0))

# node kinds
KIND_DIRICHLET = 0
KIND_BRANCHES = 1
KIND_EIGEN = 2


@njit(cache=True, inline="always")
def _ls_solve_small(Mp, b):
    """Least squares via normal equations with partial pivoting.

    The stencil systems are scaled to O(1) entries, so squaring the condition
    number is harmless here; a numerically singular normal matrix falls back
    to the LAPACK least squares routine.
    """
    k = Mp.shape[1]
    A = np.empty((k, k + 1))
    tiny = 0.0
    for r in range(k):
        for cix in range(k):
            acc = 0.0
            for row in range(Mp.shape[0]):
                acc += Mp[row, r] * Mp[row, cix]
            A[r, cix] = acc
        acc = 0.0
        for row in range(Mp.shape[0]):
            acc += Mp[row, r] * b[row]
        A[r, k] = acc
        if abs(A[r, r]) > tiny:
            tiny = abs(A[r, r])
    tiny = 1e-13 * max(tiny, 1e-300)
    for col in range(k):
        p = col
        best = abs(A[col, col])
        for rr in range(col + 1, k):
            if abs(A[rr, col]) > best:
                best = abs(A[rr, col])
                p = rr
        if best <= tiny:
            z, _res, _rank, _sv = np.linalg.lstsq(Mp, b)
            return z
        if p != col:
            for cc in range(k + 1):
                tmp = A[col, cc]
                A[col, cc] = A[p, cc]
                A[p, cc] = tmp
        piv = A[col, col]
        for rr in range(col + 1, k):
            f = A[rr, col] / piv
            if f != 0.0:
                for cc in range(col, k + 1):
                    A[rr, cc] -= f * A[col, cc]
    z = np.empty(k)
    for col in range(k - 1, -1, -1):
        acc = A[col, k]
        for cc in range(col + 1, k):
            acc -= A[col, cc] * z[cc]
        z[col] = acc / A[col, col]
    return z


@njit(cache=True)
def nnls_small(M, b):
    """Nonnegative least squares via Lawson-Hanson for small dense systems."""
    nvar = M.shape[1]
    x = np.zeros(nvar)
    passive = np.zeros(nvar, np.bool_)
    scale = 1.0
    for r in range(M.shape[0]):
        if abs(b[r]) > scale:
            scale = abs(b[r])
        for k in range(nvar):
            if abs(M[r, k]) > scale:
                scale = abs(M[r, k])
    dual_tol = 1e-12 * scale * scale
    for _ in range(10 * max(nvar, 1)):
        resid = b - M @ x
        w = M.T @ resid
        j = -1
        wbest = dual_tol
        for k in range(nvar):
            if not passive[k] and w[k] > wbest:
                wbest = w[k]
                j = k
        if j < 0:
            break
        passive[j] = True
        for _inner in range(10 * max(nvar, 1)):
            np_count = 0
            for k in range(nvar):
                if passive[k]:
                    np_count += 1
            Mp = np.empty((M.shape[0], np_count))
            cols = np.empty(np_count, np.int64)
            cc = 0
            for k in range(nvar):
                if passive[k]:
                    Mp[:, cc] = M[:, k]
                    cols[cc] = k
                    cc += 1
            z = _ls_solve_small(Mp, b)
            allpos = True
            for k in range(np_count):
                if z[k] <= 0.0:
                    allpos = False
                    break
            if allpos:
                x[:] = 0.0
                for k in range(np_count):
                    x[cols[k]] = z[k]
                break
            alpha = np.inf
            for k in range(np_count):
                if z[k] <= 0.0:
                    xk = x[cols[k]]
                    ratio = xk / (xk - z[k])
                    if ratio < alpha:
                        alpha = ratio
            for k in range(np_count):
                xk = x[cols[k]]
                x[cols[k]] = xk + alpha * (z[k] - xk)
            kept_any = False
            for k in range(np_count):
                if x[cols[k]] <= 1e-14 * scale:
                    passive[cols[k]] = False
                    x[cols[k]] = 0.0
                else:
                    kept_any = True
            if not kept_any:
                break
    return x


@njit(cache=True)
def build_second_generalized_batch(
    pts,
    nodes,
    indptr,
    indices,
    mode,
    aligned_ids,
    nu,
    nu2,
    nu3,
    eps,
    out_nbrs,
    out_coef,
    out_count,
    out_ang,
    out_status,
):
    """Octant-constrained second-derivative stencils for many nodes, one direction.

    mode 0 picks one neighbor in each of the eight octants; modes 1/2 handle a
    single lattice-aligned neighbor on the +nu/-nu side plus picks in the four
    opposite octants.  out_status: 0 built, 1 empty octant (caller falls back),
    2 infeasible fit.  Neighbor lists arrive in ascending id, fixing tie order.
    """
    for t in range(len(nodes)):
        i = nodes[t]
        x0x, x0y, x0z = pts[i, 0], pts[i, 1], pts[i, 2]
        best_obj = np.full(8, np.inf)
        best_r = np.full(8, np.inf)
        best_id = np.full(8, -1, np.int64)
        bX = np.zeros(8)
        bY = np.zeros(8)
        bZ = np.zeros(8)
        if mode[t] == 0:
            o_lo, o_hi = 0, 8
        elif mode[t] == 1:
            o_lo, o_hi = 0, 4  # aligned neighbor on +nu, picks where X < 0
        else:
            o_lo, o_hi = 4, 8
        for e in range(indptr[t], indptr[t + 1]):
            j = indices[e]
            if j == i:
                continue
            dx = pts[j, 0] - x0x
            dy = pts[j, 1] - x0y
            dz = pts[j, 2] - x0z
            X = dx * nu[0] + dy * nu[1] + dz * nu[2]
            Y = dx * nu2[0] + dy * nu2[1] + dz * nu2[2]
            Z = dx * nu3[0] + dy * nu3[1] + dz * nu3[2]
            r = np.sqrt(X * X + Y * Y + Z * Z)
            if r <= 0.0:
                continue
            o = 0
            if X >= 0.0:
                o += 4
            if Y >= 0.0:
                o += 2
            if Z >= 0.0:
                o += 1
            if o < o_lo or o >= o_hi:
                continue
            az = np.arctan2(abs(Y), abs(X))
            el = np.arcsin(min(abs(Z) / r, 1.0))
            obj = np.round((az * az + el * el) * 1e12) / 1e12
            if (
                obj < best_obj[o]
                or (obj == best_obj[o] and r < best_r[o])
                or (obj == best_obj[o] and r == best_r[o] and j < best_id[o])
            ):
                best_obj[o] = obj
                best_r[o] = r
                best_id[o] = j
                bX[o], bY[o], bZ[o] = X, Y, Z
        ok = True
        for o in range(o_lo, o_hi):
            if best_id[o] < 0:
                ok = False
        if not ok:
            out_status[t] = 1
            continue
        m = o_hi - o_lo
        extra = 0 if mode[t] == 0 else 1
        M = np.empty((4, m + extra))
        ang = 0.0
        col = 0
        for o in range(o_lo, o_hi):
            M[0, col] = bX[o] / eps
            M[1, col] = bY[o] / eps
            M[2, col] = bZ[o] / eps
            M[3, col] = 0.5 * (bX[o] / eps) ** 2
            out_nbrs[t, col] = best_id[o]
            a = np.arccos(min(abs(bX[o]) / best_r[o], 1.0))
            if a > ang:
                ang = a
            col += 1
        if extra == 1:
            j = aligned_ids[t]
            dx = pts[j, 0] - x0x
            dy = pts[j, 1] - x0y
            dz = pts[j, 2] - x0z
            X = dx * nu[0] + dy * nu[1] + dz * nu[2]
            Y = dx * nu2[0] + dy * nu2[1] + dz * nu2[2]
            Z = dx * nu3[0] + dy * nu3[1] + dz * nu3[2]
            M[0, col] = X / eps
            M[1, col] = Y / eps
            M[2, col] = Z / eps
            M[3, col] = 0.5 * (X / eps) ** 2
            out_nbrs[t, col] = j
            col += 1
        b = np.zeros(4)
        b[3] = 1.0
        a = nnls_small(M, b)
        rn = 0.0
        for row in range(4):
            acc = -b[row]
            for k in range(col):
                acc += M[row, k] * a[k]
            rn += acc * acc
        if np.sqrt(rn) > 1e-6:
            out_status[t] = 2
            continue
        for k in range(col):
            out_coef[t, k] = a[k] / (eps * eps)
        out_count[t] = col
        out_ang[t] = ang
        out_status[t] = 0


@njit(cache=True)
def first_derivative_batch(
    pts,
    x0_ids,
    dirs,
    idgrid,
    lo,
    h,
    n,
    out_nbrs,
    out_coef,
    out_count,
    out_center,
    out_status,
):
    """Boundary first-derivative stencils by ray walking, batched over pairs.

    dirs holds the outward unit directions; the walk travels along -dir.  The
    first crossed lattice face with four interior vertices yields the exact
    interpolation stencil.  out_status: 0 built; 1 only a partially interior
    face was crossed (its center is in out_center, caller runs the scatter
    fit); 2 the ray never touched the interior lattice.
    """
    for t in range(len(x0_ids)):
        i = x0_ids[t]
        p0x, p0y, p0z = pts[i, 0], pts[i, 1], pts[i, 2]
        dx = -dirs[t, 0]
        dy = -dirs[t, 1]
        dz = -dirs[t, 2]
        d = (dx, dy, dz)
        p0 = (p0x, p0y, p0z)
        cell = np.empty(3, np.int64)
        step = np.empty(3, np.int64)
        t_max = np.empty(3)
        t_delta = np.empty(3)
        for ax in range(3):
            s = p0[ax] + 1e-9 * h * d[ax]
            c = int(np.floor((s - lo[ax]) / h))
            if c < 0:
                c = 0
            if c > n - 1:
                c = n - 1
            cell[ax] = c
            if d[ax] > 0.0:
                step[ax] = 1
                t_max[ax] = (lo[ax] + (c + 1) * h - p0[ax]) / d[ax]
                t_delta[ax] = h / d[ax]
            elif d[ax] < 0.0:
                step[ax] = -1
                t_max[ax] = (lo[ax] + c * h - p0[ax]) / d[ax]
                t_delta[ax] = -h / d[ax]
            else:
                step[ax] = 0
                t_max[ax] = np.inf
                t_delta[ax] = np.inf
        out_status[t] = 2
        for _ in range(3 * (n + 2)):
            axis = 0
            if t_max[1] < t_max[axis]:
                axis = 1
            if t_max[2] < t_max[axis]:
                axis = 2
            t_cross = t_max[axis]
            cell[axis] += step[axis]
            if cell[axis] < 0 or cell[axis] >= n:
                break
            if step[axis] > 0:
                plane = cell[axis]
            else:
                plane = cell[axis] + 1
            o1 = 0 if axis != 0 else 1
            o2 = 2 if axis != 2 else 1
            v_ids = np.empty(4, np.int64)
            idx = np.empty(3, np.int64)
            n_in = 0
            vi = 0
            cxs = 0.0
            cys = 0.0
            czs = 0.0
            for da in range(2):
                for db in range(2):
                    idx[axis] = plane
                    idx[o1] = cell[o1] + da
                    idx[o2] = cell[o2] + db
                    vid = idgrid[idx[0], idx[1], idx[2]]
                    v_ids[vi] = vid
                    if vid >= 0:
                        n_in += 1
                    cxs += lo[0] + idx[0] * h
                    cys += lo[1] + idx[1] * h
                    czs += lo[2] + idx[2] * h
                    vi += 1
            if n_in > 0 and out_status[t] == 2:
                out_status[t] = 1
                out_center[t, 0] = 0.25 * cxs
                out_center[t, 1] = 0.25 * cys
                out_center[t, 2] = 0.25 * czs
            if n_in >= 3:
                cx = p0[o1] + t_cross * d[o1]
                cy = p0[o2] + t_cross * d[o2]
                uu = (cx - (lo[o1] + cell[o1] * h)) / h
                vv = (cy - (lo[o2] + cell[o2] * h)) / h
                if uu < 0.0:
                    uu = 0.0
                if uu > 1.0:
                    uu = 1.0
                if vv < 0.0:
                    vv = 0.0
                if vv > 1.0:
                    vv = 1.0
                # triangles of the face (both diagonal splits, non-strict
                # containment), same order as the reference implementation
                lam = np.zeros(4)
                tri = np.empty(3, np.int64)
                found = False
                for cand in range(4):
                    if cand == 0:
                        if uu < vv:
                            continue
                        tri[0], tri[1], tri[2] = 0, 2, 3
                        w0, w1, w2 = 1.0 - uu, uu - vv, vv
                    elif cand == 1:
                        if uu > vv:
                            continue
                        tri[0], tri[1], tri[2] = 0, 1, 3
                        w0, w1, w2 = 1.0 - vv, vv - uu, uu
                    elif cand == 2:
                        if uu + vv > 1.0:
                            continue
                        tri[0], tri[1], tri[2] = 0, 2, 1
                        w0, w1, w2 = 1.0 - uu - vv, uu, vv
                    else:
                        if uu + vv < 1.0:
                            continue
                        tri[0], tri[1], tri[2] = 3, 1, 2
                        w0, w1, w2 = uu + vv - 1.0, 1.0 - uu, 1.0 - vv
                    if v_ids[tri[0]] >= 0 and v_ids[tri[1]] >= 0 and v_ids[tri[2]] >= 0:
                        lam[:] = 0.0
                        lam[tri[0]] = w0
                        lam[tri[1]] = w1
                        lam[tri[2]] = w2
                        found = True
                        break
                if found:
                    cc = 0
                    for ci in range(4):
                        if v_ids[ci] >= 0:
                            out_nbrs[t, cc] = v_ids[ci]
                            out_coef[t, cc] = -lam[ci] / t_cross
                            cc += 1
                    out_count[t] = cc
                    out_status[t] = 0
                    break
            t_max[axis] += t_delta[axis]


@njit(cache=True)
def first_scatter_batch(
    pts,
    x0_ids,
    dirs,
    centers,
    indptr,
    indices,
    h,
    out_nbrs,
    out_coef,
    out_count,
    out_resid,
    out_status,
):
    """Nonpositive least squares first-derivative fits over scattered neighbors.

    Row r fits direction dirs[r] at node x0_ids[r] using interior candidates
    indices[indptr[r]:indptr[r+1]] (sorted by id), nearest to centers[r] first
    (the four nearest are tried, then the whole candidate set).  out_status:
    0 built, 1 infeasible sign-constrained fit, 2 fewer than four candidates.
    """
    for t in range(len(x0_ids)):
        i = x0_ids[t]
        lo_e, hi_e = indptr[t], indptr[t + 1]
        m = hi_e - lo_e
        if m < 4:
            out_status[t] = 2
            continue
        out_status[t] = 1
        d2 = np.empty(m)
        for k in range(m):
            j = indices[lo_e + k]
            dx = pts[j, 0] - centers[t, 0]
            dy = pts[j, 1] - centers[t, 1]
            dz = pts[j, 2] - centers[t, 2]
            d2[k] = dx * dx + dy * dy + dz * dz
        order = np.argsort(d2, kind="mergesort")  # stable: id order breaks ties
        for trial in range(2):
            mm = 4 if trial == 0 else m
            if mm > m:
                mm = m
            M = np.empty((3, mm))
            cols = np.empty(mm, np.int64)
            for k in range(mm):
                j = indices[lo_e + order[k]]
                cols[k] = j
                M[0, k] = -(pts[j, 0] - pts[i, 0]) / h
                M[1, k] = -(pts[j, 1] - pts[i, 1]) / h
                M[2, k] = -(pts[j, 2] - pts[i, 2]) / h
            b = dirs[t].copy()
            a = nnls_small(M, b)
            rn = 0.0
            bn = 0.0
            for row in range(3):
                acc = -b[row]
                for k in range(mm):
                    acc += M[row, k] * a[k]
                rn += acc * acc
                bn += b[row] * b[row]
            out_resid[t] = np.sqrt(rn)
            if np.sqrt(rn) <= 1e-6 * np.sqrt(bn):
                for k in range(mm):
                    out_nbrs[t, k] = cols[k]
                    out_coef[t, k] = -a[k] / h
                out_count[t] = mm
                out_status[t] = 0
                break


# --- solver kernels -----------------------------------------------------------


@njit(cache=True, inline="always")
def _term_frame_value(f, phicode, u, t, fsp, fsn, fsa, fasum):
    q0 = 0.0
    q1 = 0.0
    q2 = 0.0
    for s in range(3):
        row = 3 * f + s
        acc = 0.0
        for e in range(fsp[row], fsp[row + 1]):
            acc += fsa[e] * u[fsn[e]]
        acc -= fasum[row] * t
        if s == 0:
            q0 = acc
        elif s == 1:
            q1 = acc
        else:
            q2 = acc
    if phicode == PHI_CODE_LOGMAX:
        return -max(q0, LOG_CLAMP) * max(q1, LOG_CLAMP) * max(q2, LOG_CLAMP)
    if phicode == PHI_CODE_MIN0:
        return -(min(q0, 0.0) + min(q1, 0.0) + min(q2, 0.0))
    return -(
        np.arctan(max(q0, 0.0))
        + min(q0, 0.0)
        + np.arctan(max(q1, 0.0))
        + min(q1, 0.0)
        + np.arctan(max(q2, 0.0))
        + min(q2, 0.0)
    )


@njit(cache=True, inline="always")
def _term_frame_deriv(f, phicode, u, t, fsp, fsn, fsa, fasum):
    d = 0.0
    for s in range(3):
        row = 3 * f + s
        acc = 0.0
        for e in range(fsp[row], fsp[row + 1]):
            acc += fsa[e] * u[fsn[e]]
        q = acc - fasum[row] * t
        if phicode == PHI_CODE_LOGMAX:
            if q > LOG_CLAMP:
                prod = 1.0
                for s2 in range(3):
                    if s2 == s:
                        continue
                    row2 = 3 * f + s2
                    acc2 = 0.0
                    for e in range(fsp[row2], fsp[row2 + 1]):
                        acc2 += fsa[e] * u[fsn[e]]
                    q2 = acc2 - fasum[row2] * t
                    prod *= max(q2, LOG_CLAMP)
                d += fasum[row] * prod
        elif phicode == PHI_CODE_MIN0:
            if q < 0.0:
                d += fasum[row]
        else:
            if q > 0.0:
                d += fasum[row] / (1.0 + q * q)
            else:
                d += fasum[row]
    return d


@njit(cache=True)
def _eigen_residual(i, t, u, c, nconst, nccoef, ntp, tphi, tscale, tfp, fsp, fsn, fsa, fasum, frozen_frame):
    total = nconst[i] + nccoef[i] * c
    for tt in range(ntp[i], ntp[i + 1]):
        f = frozen_frame[tt]
        total += tscale[tt] * _term_frame_value(f, tphi[tt], u, t, fsp, fsn, fsa, fasum)
    return total


@njit(cache=True)
def evaluate_system(
    u,
    c,
    kind,
    gval,
    nconst,
    nccoef,
    nbp,
    bp,
    bconst,
    bccoef,
    bep,
    ben,
    bew,
    ntp,
    tphi,
    tscale,
    tfp,
    fsp,
    fsn,
    fsa,
    fasum,
    res,
    frozen_branch,
    frozen_frame,
    write_frozen,
):
    """Residuals of every node at (u, c); optionally refresh the argmax choices."""
    for i in range(len(u)):
        k = kind[i]
        if k == KIND_DIRICHLET:
            res[i] = u[i] - gval[i]
        elif k == KIND_BRANCHES:
            best = -np.inf
            barg = -1
            for b in range(nbp[i], nbp[i + 1]):
                v = bp[b] * u[i] + bconst[b] + bccoef[b] * c
                for e in range(bep[b], bep[b + 1]):
                    v += bew[e] * u[ben[e]]
                if v > best:
                    best = v
                    barg = b
            res[i] = best
            if write_frozen:
                frozen_branch[i] = barg
        else:
            total = nconst[i] + nccoef[i] * c
            for tt in range(ntp[i], ntp[i + 1]):
                best = -np.inf
                farg = -1
                for f in range(tfp[tt], tfp[tt + 1]):
                    v = _term_frame_value(f, tphi[tt], u, u[i], fsp, fsn, fsa, fasum)
                    if v > best:
                        best = v
                        farg = f
                total += tscale[tt] * best
                if write_frozen:
                    frozen_frame[tt] = farg
            res[i] = total


@njit(cache=True)
def gs_sweep(
    u,
    c,
    order,
    forward,
    kind,
    gval,
    nconst,
    nccoef,
    nbp,
    bp,
    bconst,
    bccoef,
    bep,
    ben,
    bew,
    ntp,
    tphi,
    tscale,
    tfp,
    fsp,
    fsn,
    fsa,
    fasum,
    frozen_branch,
    frozen_frame,
):
    """One Gauss-Seidel pass applying the frozen local inverse at every node.

    Returns 0 on success or -(node + 1) when a scalar local inverse cannot
    bracket its root (which a monotone scheme should never produce).
    """
    N = len(order)
    for idx in range(N):
        i = order[idx] if forward else order[N - 1 - idx]
        k = kind[i]
        if k == KIND_DIRICHLET:
            u[i] = gval[i]
        elif k == KIND_BRANCHES:
            b = frozen_branch[i]
            if b < 0:
                continue
            p = bp[b]
            if p <= 0.0:
                continue
            q = bconst[b] + bccoef[b] * c
            for e in range(bep[b], bep[b + 1]):
                q += bew[e] * u[ben[e]]
            u[i] = -q / p
        else:
            ready = True
            for tt in range(ntp[i], ntp[i + 1]):
                if frozen_frame[tt] < 0:
                    ready = False
            if not ready:
                continue
            t0 = u[i]
            f0 = _eigen_residual(
                i, t0, u, c, nconst, nccoef, ntp, tphi, tscale, tfp, fsp, fsn, fsa, fasum, frozen_frame
            )
            lo = t0
            hi = t0
            flo = f0
            fhi = f0
            stp = 1.0 + abs(t0)
            ok = False
            for _ in range(80):
                if flo <= 0.0:
                    ok = True
                    break
                lo -= stp
                flo = _eigen_residual(
                    i, lo, u, c, nconst, nccoef, ntp, tphi, tscale, tfp, fsp, fsn, fsa, fasum, frozen_frame
                )
                stp *= 2.0
            if not ok:
                return -(i + 1)
            stp = 1.0 + abs(t0)
            ok = False
            for _ in range(80):
                if fhi >= 0.0:
                    ok = True
                    break
                hi += stp
                fhi = _eigen_residual(
                    i, hi, u, c, nconst, nccoef, ntp, tphi, tscale, tfp, fsp, fsn, fsa, fasum, frozen_frame
                )
                stp *= 2.0
            if not ok:
                return -(i + 1)
            t = 0.5 * (lo + hi)
            for it2 in range(80):
                f = _eigen_residual(
                    i, t, u, c, nconst, nccoef, ntp, tphi, tscale, tfp, fsp, fsn, fsa, fasum, frozen_frame
                )
                if f > 0.0:
                    hi = t
                elif f < 0.0:
                    lo = t
                else:
                    break
                prop = np.inf
                if it2 < 20:
                    d = 0.0
                    for tt in range(ntp[i], ntp[i + 1]):
                        d += tscale[tt] * _term_frame_deriv(
                            frozen_frame[tt], tphi[tt], u, t, fsp, fsn, fsa, fasum
                        )
                    if d > 0.0 and np.isfinite(d):
                        prop = t - f / d
                if not (lo < prop < hi):
                    prop = 0.5 * (lo + hi)
                if abs(prop - t) <= 1e-12 * (1.0 + abs(t)):
                    t = prop
                    break
                t = prop
            u[i] = t
    return 0
