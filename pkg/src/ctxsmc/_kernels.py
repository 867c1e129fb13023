"""Compiled inner loops: path log-densities, uniformized site bridges and the
blocked Metropolis-Hastings sweep.

Every kernel takes plain arrays (see :class:`ctxsmc.model.CompiledModel`) and,
where randomness is needed, a ``numpy.random.Generator`` whose state is
advanced in place, so a kernel call consumes exactly the stream it is given.
"""
from __future__ import annotations

import numba as nb
import numpy as np

_JIT = dict(nogil=True, cache=True)


@nb.njit(**_JIT)
def _context_code(ctx, seq, i, radix):
    code = 0
    mult = 1
    for p in range(ctx.shape[1]):
        j = ctx[i, p]
        d = radix - 1 if j < 0 else seq[j]
        code += d * mult
        mult *= radix
    return code


@nb.njit(**_JIT)
def _site_exit(gamma, phib, ctx, seq, i, radix):
    code = _context_code(ctx, seq, i, radix)
    xi = seq[i]
    s = 0.0
    for b in range(gamma.shape[1]):
        if b != xi:
            s += gamma[i, xi, b] * phib[code, b]
    return s


@nb.njit(**_JIT)
def dsm_log_density(gamma, ctx, deps, log_phi, phib, beta, x0, y, T, times, sites, bases):
    """Tempered dependent-site log path density (``-inf`` on endpoint mismatch)."""
    n = x0.shape[0]
    radix = gamma.shape[1] + 1
    seq = x0.copy()
    exits = np.empty(n)
    for i in range(n):
        exits[i] = _site_exit(gamma, phib, ctx, seq, i, radix)
    total = exits.sum()
    ld = 0.0
    tprev = 0.0
    for j in range(times.shape[0]):
        s = sites[j]
        b = bases[j]
        ld -= (times[j] - tprev) * total
        code = _context_code(ctx, seq, s, radix)
        ld += np.log(gamma[s, seq[s], b])
        if beta != 0.0:
            ld += beta * log_phi[code, b]
        seq[s] = b
        for p in range(deps.shape[1]):
            d = deps[s, p]
            if d < 0:
                break
            exits[d] = _site_exit(gamma, phib, ctx, seq, d, radix)
        total = exits.sum()
        tprev = times[j]
    for i in range(n):
        if seq[i] != y[i]:
            return -np.inf
    ld -= (T - tprev) * total
    return ld


@nb.njit(**_JIT)
def ism_site_log_density(gamma, x0, y, T, times, sites, bases, out):
    """Per-site independent-site log densities written into ``out``.

    A site whose replayed end state differs from ``y`` gets ``-inf``.
    """
    n = x0.shape[0]
    a = gamma.shape[1]
    cur = x0.copy()
    last = np.zeros(n)
    for i in range(n):
        out[i] = 0.0
    for j in range(times.shape[0]):
        s = sites[j]
        b = bases[j]
        ex = 0.0
        for c in range(a):
            if c != cur[s]:
                ex += gamma[s, cur[s], c]
        out[s] += np.log(gamma[s, cur[s], b]) - (times[j] - last[s]) * ex
        cur[s] = b
        last[s] = times[j]
    for i in range(n):
        ex = 0.0
        for c in range(a):
            if c != cur[i]:
                ex += gamma[i, cur[i], c]
        out[i] -= (T - last[i]) * ex
        if cur[i] != y[i]:
            out[i] = -np.inf


@nb.njit(**_JIT)
def _draw_index(cum, u):
    # first index with cum[idx] >= u
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] >= u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@nb.njit(**_JIT)
def sample_site_events(R, mcdf, rcol, xi, yi, T, gen, out_t, out_b, start):
    """Draw one uniformized bridge for a single site.

    ``mcdf`` is the CDF of the virtual jump count, ``rcol[m, c] = (R^m)[c, yi]``.
    Real (non self-) transitions are written to ``out_t``/``out_b`` from
    ``start`` on; returns the new fill position.
    """
    a = R.shape[0]
    M = _draw_index(mcdf, gen.random())
    if M == 0:
        return start
    ts = np.empty(M)
    for j in range(M):
        ts[j] = gen.random() * T
    ts.sort()
    s = xi
    pos = start
    probs = np.empty(a)
    for j in range(M):
        rem = M - j - 1
        denom = rcol[rem + 1, s]
        acc = 0.0
        for c in range(a):
            acc += R[s, c] * rcol[rem, c] / denom
            probs[c] = acc
        u = gen.random() * acc
        c = _draw_index(probs, u)
        if c != s:
            out_t[pos] = ts[j]
            out_b[pos] = c
            pos += 1
            s = c
    return pos


@nb.njit(**_JIT)
def _ensure(arr, need):
    if need <= arr.shape[0]:
        return arr
    new = np.empty(max(need, 2 * arr.shape[0]), arr.dtype)
    new[: arr.shape[0]] = arr
    return new


@nb.njit(**_JIT)
def sample_block(Rs, mcdfs, rcols, mcaps, x, y, T, block, gen):
    """Independent-site bridges for the sites in ``block``, merged by time.

    Returns ``(times, sites, bases)``; sites are sampled in the order given.
    """
    cap = 16
    tt = np.empty(cap)
    bb = np.empty(cap, np.int64)
    ss = np.empty(cap, np.int64)
    fill = 0
    for idx in range(block.shape[0]):
        i = block[idx]
        mc = mcaps[i]
        # a bridge can hold at most mc real events
        tt = _ensure(tt, fill + mc)
        bb = _ensure(bb, fill + mc)
        ss = _ensure(ss, fill + mc)
        new = sample_site_events(Rs[i], mcdfs[i, : mc + 1], rcols[i, : mc + 1], x[i], y[i], T, gen, tt, bb, fill)
        for p in range(fill, new):
            ss[p] = i
        fill = new
    order = np.argsort(tt[:fill], kind="mergesort")
    return tt[:fill][order], ss[:fill][order], bb[:fill][order]


@nb.njit(**_JIT)
def _has_tie(times):
    for j in range(1, times.shape[0]):
        if times[j] <= times[j - 1]:
            return True
    return False


@nb.njit(**_JIT)
def merge_block(times, sites, bases, inblock, pt, ps, pb):
    keep = 0
    for j in range(sites.shape[0]):
        if not inblock[sites[j]]:
            keep += 1
    m = keep + pt.shape[0]
    t = np.empty(m)
    s = np.empty(m, np.int64)
    b = np.empty(m, np.int64)
    p = 0
    for j in range(sites.shape[0]):
        if not inblock[sites[j]]:
            t[p] = times[j]
            s[p] = sites[j]
            b[p] = bases[j]
            p += 1
    t[p:] = pt
    s[p:] = ps
    b[p:] = pb
    order = np.argsort(t, kind="mergesort")
    return t[order], s[order], b[order]


@nb.njit(**_JIT)
def mh_sweep(gamma, ctx, deps, log_phi, phib, beta, x, y, T,
             Rs, mcdfs, rcols, mcaps, block_sites, block_ptr,
             times, sites, bases, nsteps, lazy, max_retries, gen, tally,
             thin, trace_m, trace_lq, trace_blocks, trace_acc):
    """Run ``nsteps`` blocked independence-proposal MH steps on one path.

    Per-block accept/reject counts are added to ``tally[j, 0]`` and
    ``tally[j, 1]``.  Returns ``(times, sites, bases, log_q, held,
    collisions)``.  When ``thin > 0`` a summary is written to the trace
    arrays before the first step and after every ``thin``-th step.
    """
    n = x.shape[0]
    B = block_ptr.shape[0] - 1
    lq = dsm_log_density(gamma, ctx, deps, log_phi, phib, beta, x, y, T, times, sites, bases)
    mu_cur = np.empty(n)
    ism_site_log_density(gamma, x, y, T, times, sites, bases, mu_cur)
    mu_new = np.empty(n)
    inblock = np.zeros(n, np.bool_)
    held = 0
    collisions = 0
    row = 0
    owner = np.zeros(n, np.int64)
    for jb in range(B):
        for p in range(block_ptr[jb], block_ptr[jb + 1]):
            owner[block_sites[p]] = jb
    if thin > 0:
        _record(trace_m, trace_lq, trace_blocks, trace_acc, row, sites, owner, lq, 0)
        row += 1
    for step in range(nsteps):
        flag = 0
        if lazy and gen.random() < 0.5:
            held += 1
        else:
            j = int(gen.random() * B)
            if j >= B:
                j = B - 1
            blk = block_sites[block_ptr[j]: block_ptr[j + 1]]
            ok = False
            for attempt in range(max_retries + 1):
                pt, ps, pb = sample_block(Rs, mcdfs, rcols, mcaps, x, y, T, blk, gen)
                for i in blk:
                    inblock[i] = True
                nt, ns, nbs = merge_block(times, sites, bases, inblock, pt, ps, pb)
                for i in blk:
                    inblock[i] = False
                if _has_tie(nt):
                    collisions += 1
                    continue
                ok = True
                break
            if not ok:
                tally[j, 1] += 1
            else:
                lq_new = dsm_log_density(gamma, ctx, deps, log_phi, phib, beta, x, y, T, nt, ns, nbs)
                ism_site_log_density(gamma, x, y, T, pt, ps, pb, mu_new)
                dmu = 0.0
                for i in blk:
                    dmu += mu_new[i] - mu_cur[i]
                delta = (lq_new - lq) - dmu
                if delta >= 0.0 or np.log(gen.random()) < delta:
                    times, sites, bases = nt, ns, nbs
                    lq = lq_new
                    for i in blk:
                        mu_cur[i] = mu_new[i]
                    tally[j, 0] += 1
                    flag = 1
                else:
                    tally[j, 1] += 1
        if thin > 0 and (step + 1) % thin == 0:
            _record(trace_m, trace_lq, trace_blocks, trace_acc, row, sites, owner, lq, flag)
            row += 1
    return times, sites, bases, lq, held, collisions


@nb.njit(**_JIT)
def _record(trace_m, trace_lq, trace_blocks, trace_acc, row, sites, owner, lq, flag):
    trace_m[row] = sites.shape[0]
    trace_lq[row] = lq
    trace_acc[row] = flag
    for jb in range(trace_blocks.shape[1]):
        trace_blocks[row, jb] = 0
    for s in sites:
        trace_blocks[row, owner[s]] += 1
