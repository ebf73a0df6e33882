"""Compiled inner loops: SLIC label assignment and EM for the two mixture fits.

Kernels take plain float64/int32 arrays and mutate parameter arrays in place;
all randomness stays outside (callers pass in fully-seeded initializations) so
every kernel is deterministic.
"""

import numpy as np
from numba import njit

_LOG2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# SLIC


@njit(cache=True)
def slic_iterate(lab, cx, cy, cl, ca, cb, step, invwt, n_iters, labels, dist):
    h, w, _ = lab.shape
    k = cx.shape[0]
    for _ in range(n_iters):
        dist[:, :] = 1e300
        for c in range(k):
            x0 = int(cx[c] - 2 * step)
            x1 = int(cx[c] + 2 * step) + 1
            y0 = int(cy[c] - 2 * step)
            y1 = int(cy[c] + 2 * step) + 1
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > w:
                x1 = w
            if y1 > h:
                y1 = h
            for y in range(y0, y1):
                for x in range(x0, x1):
                    dl = lab[y, x, 0] - cl[c]
                    da = lab[y, x, 1] - ca[c]
                    db = lab[y, x, 2] - cb[c]
                    dxs = x - cx[c]
                    dys = y - cy[c]
                    d = dl * dl + da * da + db * db + invwt * (dxs * dxs + dys * dys)
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = c
        cnt = np.zeros(k)
        acc = np.zeros((k, 5))
        for y in range(h):
            for x in range(w):
                c = labels[y, x]
                cnt[c] += 1.0
                acc[c, 0] += lab[y, x, 0]
                acc[c, 1] += lab[y, x, 1]
                acc[c, 2] += lab[y, x, 2]
                acc[c, 3] += x
                acc[c, 4] += y
        for c in range(k):
            if cnt[c] > 0:
                cl[c] = acc[c, 0] / cnt[c]
                ca[c] = acc[c, 1] / cnt[c]
                cb[c] = acc[c, 2] / cnt[c]
                cx[c] = acc[c, 3] / cnt[c]
                cy[c] = acc[c, 4] / cnt[c]


@njit(cache=True)
def slic_connectivity(labels, lab, invwt, min_size, max_labels):
    """Relabel into connected superpixels; fragments below min_size merge into
    the adjacent superpixel nearest in the SLIC (color + scaled space) metric."""
    h, w = labels.shape
    new = np.full((h, w), -1, np.int32)
    # running per-new-label sums: L, A, B, x, y, count
    sums = np.zeros((max_labels, 6))
    stack = np.empty(h * w, np.int64)
    region = np.empty(h * w, np.int64)
    n_new = 0
    for sy in range(h):
        for sx in range(w):
            if new[sy, sx] >= 0:
                continue
            old = labels[sy, sx]
            # flood fill the 4-connected constant-label region
            top = 0
            stack[top] = sy * w + sx
            top += 1
            new[sy, sx] = -2  # visited marker
            size = 0
            rl = 0.0
            ra = 0.0
            rb = 0.0
            rx = 0.0
            ry = 0.0
            while top > 0:
                top -= 1
                idx = stack[top]
                y = idx // w
                x = idx - y * w
                region[size] = idx
                size += 1
                rl += lab[y, x, 0]
                ra += lab[y, x, 1]
                rb += lab[y, x, 2]
                rx += x
                ry += y
                if x > 0 and new[y, x - 1] == -1 and labels[y, x - 1] == old:
                    new[y, x - 1] = -2
                    stack[top] = idx - 1
                    top += 1
                if x < w - 1 and new[y, x + 1] == -1 and labels[y, x + 1] == old:
                    new[y, x + 1] = -2
                    stack[top] = idx + 1
                    top += 1
                if y > 0 and new[y - 1, x] == -1 and labels[y - 1, x] == old:
                    new[y - 1, x] = -2
                    stack[top] = idx - w
                    top += 1
                if y < h - 1 and new[y + 1, x] == -1 and labels[y + 1, x] == old:
                    new[y + 1, x] = -2
                    stack[top] = idx + w
                    top += 1
            target = -1
            if size < min_size:
                # nearest already-assigned adjacent label in the SLIC metric
                ml = rl / size
                ma = ra / size
                mb = rb / size
                mx = rx / size
                my = ry / size
                best = 1e300
                for i in range(size):
                    idx = region[i]
                    y = idx // w
                    x = idx - y * w
                    for t in range(4):
                        if t == 0:
                            ny_, nx_ = y, x - 1
                        elif t == 1:
                            ny_, nx_ = y, x + 1
                        elif t == 2:
                            ny_, nx_ = y - 1, x
                        else:
                            ny_, nx_ = y + 1, x
                        if ny_ < 0 or ny_ >= h or nx_ < 0 or nx_ >= w:
                            continue
                        cand = new[ny_, nx_]
                        if cand < 0:
                            continue
                        c = sums[cand]
                        n = c[5]
                        dl = ml - c[0] / n
                        da = ma - c[1] / n
                        db = mb - c[2] / n
                        dx = mx - c[3] / n
                        dy = my - c[4] / n
                        d = dl * dl + da * da + db * db + invwt * (dx * dx + dy * dy)
                        if d < best:
                            best = d
                            target = cand
            if target < 0:
                target = n_new
                n_new += 1
            for i in range(size):
                idx = region[i]
                y = idx // w
                x = idx - y * w
                new[y, x] = target
                sums[target, 0] += lab[y, x, 0]
                sums[target, 1] += lab[y, x, 1]
                sums[target, 2] += lab[y, x, 2]
                sums[target, 3] += x
                sums[target, 4] += y
                sums[target, 5] += 1.0
    return new, n_new


# ---------------------------------------------------------------------------
# EM, diagonal 2D Gaussians (spatial counting)


@njit(cache=True)
def em_diag(pts, mu, sg, phi, max_iter, tol, sigma_floor, trace):
    """EM on (x, y) points with diagonal covariances. Mutates mu/sg/phi,
    records the log-likelihood after each E-step in trace, returns the
    iteration count. Stops when the gain drops below tol (absolute)."""
    n = pts.shape[0]
    k = mu.shape[0]
    resp = np.empty((n, k))
    logc = np.empty(k)
    isx = np.empty(k)
    isy = np.empty(k)
    prev = -1e300
    done = 0
    for it in range(max_iter):
        for j in range(k):
            logc[j] = np.log(max(phi[j], 1e-300)) - _LOG2PI - np.log(sg[j, 0] * sg[j, 1])
            isx[j] = 1.0 / sg[j, 0]
            isy[j] = 1.0 / sg[j, 1]
        ll = 0.0
        for i in range(n):
            mx = -1e300
            for j in range(k):
                dx = (pts[i, 0] - mu[j, 0]) * isx[j]
                dy = (pts[i, 1] - mu[j, 1]) * isy[j]
                lp = logc[j] - 0.5 * (dx * dx + dy * dy)
                resp[i, j] = lp
                if lp > mx:
                    mx = lp
            s = 0.0
            for j in range(k):
                v = np.exp(resp[i, j] - mx)
                resp[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(k):
                resp[i, j] *= inv
            ll += mx + np.log(s)
        trace[it] = ll
        done = it + 1
        if it > 0 and ll - prev < tol:
            break
        prev = ll
        for j in range(k):
            nk = 0.0
            sx = 0.0
            sy = 0.0
            for i in range(n):
                r = resp[i, j]
                nk += r
                sx += r * pts[i, 0]
                sy += r * pts[i, 1]
            if nk < 1e-12:
                nk = 1e-12
            mx_ = sx / nk
            my_ = sy / nk
            vx = 0.0
            vy = 0.0
            for i in range(n):
                dx = pts[i, 0] - mx_
                dy = pts[i, 1] - my_
                vx += resp[i, j] * dx * dx
                vy += resp[i, j] * dy * dy
            mu[j, 0] = mx_
            mu[j, 1] = my_
            sg[j, 0] = max(np.sqrt(vx / nk), sigma_floor)
            sg[j, 1] = max(np.sqrt(vy / nk), sigma_floor)
            phi[j] = nk / n
    return done


@njit(cache=True)
def estep_diag(pts, mu, sg, phi, resp):
    """One E-step; fills resp (n, k) and returns the log-likelihood."""
    n = pts.shape[0]
    k = mu.shape[0]
    logc = np.empty(k)
    for j in range(k):
        logc[j] = np.log(max(phi[j], 1e-300)) - _LOG2PI - np.log(sg[j, 0] * sg[j, 1])
    ll = 0.0
    for i in range(n):
        mx = -1e300
        for j in range(k):
            dx = (pts[i, 0] - mu[j, 0]) / sg[j, 0]
            dy = (pts[i, 1] - mu[j, 1]) / sg[j, 1]
            lp = logc[j] - 0.5 * (dx * dx + dy * dy)
            resp[i, j] = lp
            if lp > mx:
                mx = lp
        s = 0.0
        for j in range(k):
            v = np.exp(resp[i, j] - mx)
            resp[i, j] = v
            s += v
        inv = 1.0 / s
        for j in range(k):
            resp[i, j] *= inv
        ll += mx + np.log(s)
    return ll


# ---------------------------------------------------------------------------
# EM, full-covariance 3D Gaussians (color clustering)


@njit(cache=True)
def _chol3(c, l):
    """Cholesky of a 3x3 SPD matrix into l; returns the log-determinant."""
    l00 = np.sqrt(max(c[0, 0], 1e-300))
    l10 = c[1, 0] / l00
    l11 = np.sqrt(max(c[1, 1] - l10 * l10, 1e-300))
    l20 = c[2, 0] / l00
    l21 = (c[2, 1] - l20 * l10) / l11
    l22 = np.sqrt(max(c[2, 2] - l20 * l20 - l21 * l21, 1e-300))
    l[0, 0] = l00
    l[1, 0] = l10
    l[1, 1] = l11
    l[2, 0] = l20
    l[2, 1] = l21
    l[2, 2] = l22
    return 2.0 * (np.log(l00) + np.log(l11) + np.log(l22))


@njit(cache=True)
def _min_eig_below(c, floor):
    """True when the smallest eigenvalue of symmetric 3x3 c is below floor,
    tested by attempting a Cholesky of (c - floor*I)."""
    a00 = c[0, 0] - floor
    if a00 <= 0.0:
        return True
    l00 = np.sqrt(a00)
    l10 = c[1, 0] / l00
    a11 = c[1, 1] - floor - l10 * l10
    if a11 <= 0.0:
        return True
    l11 = np.sqrt(a11)
    l20 = c[2, 0] / l00
    l21 = (c[2, 1] - l20 * l10) / l11
    a22 = c[2, 2] - floor - l20 * l20 - l21 * l21
    return a22 <= 0.0


@njit(cache=True)
def em_full(x, mu, cov, phi, max_iter, tol, cov_floor, trace):
    """EM on 3D points with full covariances, eigenvalue-floored at cov_floor.
    Mutates mu/cov/phi, records per-iteration log-likelihood, returns count."""
    n = x.shape[0]
    m = mu.shape[0]
    resp = np.empty((n, m))
    chol = np.zeros((m, 3, 3))
    logc = np.empty(m)
    prev = -1e300
    done = 0
    for it in range(max_iter):
        for j in range(m):
            logdet = _chol3(cov[j], chol[j])
            logc[j] = np.log(max(phi[j], 1e-300)) - 1.5 * _LOG2PI - 0.5 * logdet
        ll = 0.0
        for i in range(n):
            mx = -1e300
            for j in range(m):
                d0 = x[i, 0] - mu[j, 0]
                d1 = x[i, 1] - mu[j, 1]
                d2 = x[i, 2] - mu[j, 2]
                l = chol[j]
                z0 = d0 / l[0, 0]
                z1 = (d1 - l[1, 0] * z0) / l[1, 1]
                z2 = (d2 - l[2, 0] * z0 - l[2, 1] * z1) / l[2, 2]
                lp = logc[j] - 0.5 * (z0 * z0 + z1 * z1 + z2 * z2)
                resp[i, j] = lp
                if lp > mx:
                    mx = lp
            s = 0.0
            for j in range(m):
                v = np.exp(resp[i, j] - mx)
                resp[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(m):
                resp[i, j] *= inv
            ll += mx + np.log(s)
        trace[it] = ll
        done = it + 1
        if it > 0 and ll - prev < tol:
            break
        prev = ll
        for j in range(m):
            nk = 0.0
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for i in range(n):
                r = resp[i, j]
                nk += r
                s0 += r * x[i, 0]
                s1 += r * x[i, 1]
                s2 += r * x[i, 2]
            if nk < 1e-12:
                nk = 1e-12
            m0 = s0 / nk
            m1 = s1 / nk
            m2 = s2 / nk
            c00 = 0.0
            c01 = 0.0
            c02 = 0.0
            c11 = 0.0
            c12 = 0.0
            c22 = 0.0
            for i in range(n):
                r = resp[i, j]
                d0 = x[i, 0] - m0
                d1 = x[i, 1] - m1
                d2 = x[i, 2] - m2
                c00 += r * d0 * d0
                c01 += r * d0 * d1
                c02 += r * d0 * d2
                c11 += r * d1 * d1
                c12 += r * d1 * d2
                c22 += r * d2 * d2
            mu[j, 0] = m0
            mu[j, 1] = m1
            mu[j, 2] = m2
            c = cov[j]
            c[0, 0] = c00 / nk
            c[0, 1] = c01 / nk
            c[1, 0] = c01 / nk
            c[0, 2] = c02 / nk
            c[2, 0] = c02 / nk
            c[1, 1] = c11 / nk
            c[1, 2] = c12 / nk
            c[2, 1] = c12 / nk
            c[2, 2] = c22 / nk
            phi[j] = nk / n
            # floor eigenvalues only when the smallest dips below cov_floor,
            # so the exact M-step (and EM monotonicity) is preserved otherwise
            if _min_eig_below(c, cov_floor):
                w, v = np.linalg.eigh(c)
                for e in range(3):
                    if w[e] < cov_floor:
                        w[e] = cov_floor
                for a in range(3):
                    for b in range(3):
                        s = 0.0
                        for e in range(3):
                            s += v[a, e] * w[e] * v[b, e]
                        c[a, b] = s
    return done


@njit(cache=True)
def init_diag_2d(points, k, u_first, uniforms, lloyd_cap, sigma_floor):
    """Greedy k-means++ seeding, Lloyd refinement, and hard-assignment moments
    for the 2D diagonal mixture. All randomness comes in via uniforms."""
    n = points.shape[0]
    n_candidates = uniforms.shape[1]
    centers = np.empty((k, 2))
    idx = int(u_first * n)
    if idx >= n:
        idx = n - 1
    centers[0, 0] = points[idx, 0]
    centers[0, 1] = points[idx, 1]
    d2 = np.empty(n)
    for i in range(n):
        dx = points[i, 0] - centers[0, 0]
        dy = points[i, 1] - centers[0, 1]
        d2[i] = dx * dx + dy * dy
    cand_d2 = np.empty(n)
    best_d2 = np.empty(n)
    for j in range(1, k):
        total = 0.0
        for i in range(n):
            total += d2[i]
        best_pot = 1e300
        for c in range(n_candidates):
            if total <= 1e-300:
                ci = int(uniforms[j, c] * n)
                if ci >= n:
                    ci = n - 1
            else:
                target = uniforms[j, c] * total
                acc = 0.0
                ci = n - 1
                for i in range(n):
                    acc += d2[i]
                    if acc >= target:
                        ci = i
                        break
            pot = 0.0
            for i in range(n):
                dx = points[i, 0] - points[ci, 0]
                dy = points[i, 1] - points[ci, 1]
                dd = dx * dx + dy * dy
                if dd > d2[i]:
                    dd = d2[i]
                cand_d2[i] = dd
                pot += dd
            if pot < best_pot:
                best_pot = pot
                for i in range(n):
                    best_d2[i] = cand_d2[i]
                centers[j, 0] = points[ci, 0]
                centers[j, 1] = points[ci, 1]
        for i in range(n):
            d2[i] = best_d2[i]

    assign = np.empty(n, np.int64)
    prev_assign = np.full(n, -1, np.int64)
    for it in range(lloyd_cap):
        changed = 0
        far_i = 0
        far_d = -1.0
        for i in range(n):
            bj = 0
            bd = 1e300
            for j in range(k):
                dx = points[i, 0] - centers[j, 0]
                dy = points[i, 1] - centers[j, 1]
                dd = dx * dx + dy * dy
                if dd < bd:
                    bd = dd
                    bj = j
            assign[i] = bj
            if bd > far_d:
                far_d = bd
                far_i = i
            if bj != prev_assign[i]:
                changed += 1
            prev_assign[i] = bj
        if changed == 0 and it > 0:
            break
        cnt = np.zeros(k)
        sx = np.zeros(k)
        sy = np.zeros(k)
        for i in range(n):
            j = assign[i]
            cnt[j] += 1.0
            sx[j] += points[i, 0]
            sy[j] += points[i, 1]
        for j in range(k):
            if cnt[j] > 0:
                centers[j, 0] = sx[j] / cnt[j]
                centers[j, 1] = sy[j] / cnt[j]
            else:
                centers[j, 0] = points[far_i, 0]
                centers[j, 1] = points[far_i, 1]

    mu = centers
    sg = np.empty((k, 2))
    phi = np.empty(k)
    cnt = np.zeros(k)
    sx = np.zeros(k)
    sy = np.zeros(k)
    gx = 0.0
    gy = 0.0
    for i in range(n):
        j = assign[i]
        cnt[j] += 1.0
        sx[j] += points[i, 0]
        sy[j] += points[i, 1]
        gx += points[i, 0]
        gy += points[i, 1]
    gx /= n
    gy /= n
    gvx = 0.0
    gvy = 0.0
    for i in range(n):
        gvx += (points[i, 0] - gx) ** 2
        gvy += (points[i, 1] - gy) ** 2
    gsx = max(np.sqrt(gvx / n / k), sigma_floor)
    gsy = max(np.sqrt(gvy / n / k), sigma_floor)
    for j in range(k):
        if cnt[j] > 0:
            mu[j, 0] = sx[j] / cnt[j]
            mu[j, 1] = sy[j] / cnt[j]
    vx = np.zeros(k)
    vy = np.zeros(k)
    for i in range(n):
        j = assign[i]
        dx = points[i, 0] - mu[j, 0]
        dy = points[i, 1] - mu[j, 1]
        vx[j] += dx * dx
        vy[j] += dy * dy
    total = 0.0
    for j in range(k):
        if cnt[j] > 0:
            phi[j] = cnt[j] / n
            sg[j, 0] = max(np.sqrt(vx[j] / cnt[j]), sigma_floor)
            sg[j, 1] = max(np.sqrt(vy[j] / cnt[j]), sigma_floor)
        else:
            phi[j] = 1.0 / n
            sg[j, 0] = gsx
            sg[j, 1] = gsy
        total += phi[j]
    for j in range(k):
        phi[j] /= total
    return mu, sg, phi


@njit(cache=True)
def init_full_3d(points, k, u_first, uniforms, lloyd_cap, cov_floor):
    """Greedy k-means++ seeding, Lloyd refinement, and hard-assignment moments
    for the 3D full-covariance mixture."""
    n = points.shape[0]
    n_candidates = uniforms.shape[1]
    centers = np.empty((k, 3))
    idx = int(u_first * n)
    if idx >= n:
        idx = n - 1
    for c in range(3):
        centers[0, c] = points[idx, c]
    d2 = np.empty(n)
    for i in range(n):
        s = 0.0
        for c in range(3):
            d = points[i, c] - centers[0, c]
            s += d * d
        d2[i] = s
    cand_d2 = np.empty(n)
    best_d2 = np.empty(n)
    for j in range(1, k):
        total = 0.0
        for i in range(n):
            total += d2[i]
        best_pot = 1e300
        for cc in range(n_candidates):
            if total <= 1e-300:
                ci = int(uniforms[j, cc] * n)
                if ci >= n:
                    ci = n - 1
            else:
                target = uniforms[j, cc] * total
                acc = 0.0
                ci = n - 1
                for i in range(n):
                    acc += d2[i]
                    if acc >= target:
                        ci = i
                        break
            pot = 0.0
            for i in range(n):
                s = 0.0
                for c in range(3):
                    d = points[i, c] - points[ci, c]
                    s += d * d
                if s > d2[i]:
                    s = d2[i]
                cand_d2[i] = s
                pot += s
            if pot < best_pot:
                best_pot = pot
                for i in range(n):
                    best_d2[i] = cand_d2[i]
                for c in range(3):
                    centers[j, c] = points[ci, c]
        for i in range(n):
            d2[i] = best_d2[i]

    assign = np.empty(n, np.int64)
    prev_assign = np.full(n, -1, np.int64)
    for it in range(lloyd_cap):
        changed = 0
        far_i = 0
        far_d = -1.0
        for i in range(n):
            bj = 0
            bd = 1e300
            for j in range(k):
                s = 0.0
                for c in range(3):
                    d = points[i, c] - centers[j, c]
                    s += d * d
                if s < bd:
                    bd = s
                    bj = j
            assign[i] = bj
            if bd > far_d:
                far_d = bd
                far_i = i
            if bj != prev_assign[i]:
                changed += 1
            prev_assign[i] = bj
        if changed == 0 and it > 0:
            break
        cnt = np.zeros(k)
        acc = np.zeros((k, 3))
        for i in range(n):
            j = assign[i]
            cnt[j] += 1.0
            for c in range(3):
                acc[j, c] += points[i, c]
        for j in range(k):
            if cnt[j] > 0:
                for c in range(3):
                    centers[j, c] = acc[j, c] / cnt[j]
            else:
                for c in range(3):
                    centers[j, c] = points[far_i, c]

    mu = centers
    cov = np.zeros((k, 3, 3))
    phi = np.empty(k)
    cnt = np.zeros(k)
    acc = np.zeros((k, 3))
    gmean = np.zeros(3)
    for i in range(n):
        j = assign[i]
        cnt[j] += 1.0
        for c in range(3):
            acc[j, c] += points[i, c]
            gmean[c] += points[i, c]
    for c in range(3):
        gmean[c] /= n
    gvar = np.zeros(3)
    for i in range(n):
        for c in range(3):
            d = points[i, c] - gmean[c]
            gvar[c] += d * d
    for c in range(3):
        gvar[c] = max(gvar[c] / n, cov_floor)
    for j in range(k):
        if cnt[j] > 0:
            for c in range(3):
                mu[j, c] = acc[j, c] / cnt[j]
    for i in range(n):
        j = assign[i]
        d0 = points[i, 0] - mu[j, 0]
        d1 = points[i, 1] - mu[j, 1]
        d2_ = points[i, 2] - mu[j, 2]
        cov[j, 0, 0] += d0 * d0
        cov[j, 0, 1] += d0 * d1
        cov[j, 0, 2] += d0 * d2_
        cov[j, 1, 1] += d1 * d1
        cov[j, 1, 2] += d1 * d2_
        cov[j, 2, 2] += d2_ * d2_
    total = 0.0
    for j in range(k):
        if cnt[j] > 1:
            for a in range(3):
                for b in range(3):
                    if b >= a:
                        cov[j, a, b] /= cnt[j]
                    else:
                        cov[j, a, b] = cov[j, b, a]
            phi[j] = cnt[j] / n
        else:
            for a in range(3):
                for b in range(3):
                    cov[j, a, b] = gvar[a] if a == b else 0.0
            phi[j] = max(cnt[j], 1.0) / n
        w, v = np.linalg.eigh(cov[j])
        if w[0] < cov_floor:
            for e in range(3):
                if w[e] < cov_floor:
                    w[e] = cov_floor
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for e in range(3):
                        s += v[a, e] * w[e] * v[b, e]
                    cov[j, a, b] = s
        total += phi[j]
    for j in range(k):
        phi[j] /= total
    return mu, cov, phi


@njit(cache=True)
def kernel_response_mask(bits, cx, cy, sigma):
    """Truncated-Gaussian kernel mass fraction landing on true mask pixels.

    Kernel std sigma, cut at radius 3*sigma, unit-normalized over the
    in-bounds part of the truncated support.
    """
    h, w = bits.shape
    r = 3.0 * sigma
    x0 = int(np.floor(cx - r))
    x1 = int(np.ceil(cx + r))
    y0 = int(np.floor(cy - r))
    y1 = int(np.ceil(cy + r))
    if x0 < 0:
        x0 = 0
    if y0 < 0:
        y0 = 0
    if x1 > w - 1:
        x1 = w - 1
    if y1 > h - 1:
        y1 = h - 1
    inv = 1.0 / (2.0 * sigma * sigma)
    r2 = r * r
    total = 0.0
    hit = 0.0
    for y in range(y0, y1 + 1):
        dy = y - cy
        for x in range(x0, x1 + 1):
            dx = x - cx
            d2 = dx * dx + dy * dy
            if d2 > r2:
                continue
            kv = np.exp(-d2 * inv)
            total += kv
            if bits[y, x]:
                hit += kv
    if total <= 0.0:
        return 0.0
    return hit / total


@njit(cache=True)
def mahalanobis_sq_3d(points, mean, cov_inv):
    """Squared Mahalanobis distance of (n, 3) points to one Gaussian."""
    n = points.shape[0]
    out = np.empty(n)
    for i in range(n):
        d0 = points[i, 0] - mean[0]
        d1 = points[i, 1] - mean[1]
        d2 = points[i, 2] - mean[2]
        out[i] = (
            d0 * (cov_inv[0, 0] * d0 + cov_inv[0, 1] * d1 + cov_inv[0, 2] * d2)
            + d1 * (cov_inv[1, 0] * d0 + cov_inv[1, 1] * d1 + cov_inv[1, 2] * d2)
            + d2 * (cov_inv[2, 0] * d0 + cov_inv[2, 1] * d1 + cov_inv[2, 2] * d2)
        )
    return out
