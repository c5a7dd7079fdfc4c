"""Dynamic half-space range reporting over an id-addressed point set.

Two backends share one interface:

* ``BruteForceIndex`` scans every live point (the correctness oracle).
* ``BallTreeIndex`` keeps a ball tree with tombstoned deletes, nearest-center
  inserts and threshold-triggered rebuilds; queries prune whole balls that lie
  fully outside or fully inside the half-space.

A point ``w`` is reported by ``query(a, b)`` iff ``<a, w> > b`` (strict).  Both
backends and the trainer's dense scan evaluate that predicate with the same
compiled dot product, so their answers agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import ShapeError

LEAF_CAPACITY = 32
# relative slack applied to ball pruning tests; only ever makes pruning more conservative
_PRUNE_TOL = 1e-9
_BALL_ITERS = 16  # minimum-enclosing-ball refinement steps per node at build time
_HEADROOM = 1e-3  # relative ball growth when a moved point reaches the boundary


class MissingIdError(KeyError):
    pass


class DuplicateIdError(KeyError):
    pass


@dataclass(frozen=True)
class HalfSpace:
    """The set {w : <a, w> > b}."""

    a: np.ndarray
    b: float

    def contains(self, w: np.ndarray) -> bool:
        return bool(_dot(np.asarray(self.a, dtype=np.float64), np.asarray(w, dtype=np.float64)) > self.b)


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _dot(a, w):
    s = 0.0
    for j in range(a.shape[0]):
        s += a[j] * w[j]
    return s


@njit(cache=True)
def _reserve_hits(hit_q, hit_id, hit_v, nh, need):
    if need <= hit_q.shape[0]:
        return hit_q, hit_id, hit_v
    cap = max(2 * hit_q.shape[0], need)
    g1 = np.empty(cap, dtype=np.int64)
    g2 = np.empty(cap, dtype=np.int64)
    g3 = np.empty(cap)
    g1[:nh] = hit_q[:nh]
    g2[:nh] = hit_id[:nh]
    g3[:nh] = hit_v[:nh]
    return g1, g2, g3


_SCAN_BLOCK = 64


@njit(cache=True)
def _scan_batch(points, live, queries, b):
    """Brute-force answers for every row of ``queries``.

    Returns (ids, offsets, vals): ids[offsets[t]:offsets[t+1]] is the sorted
    answer for query t and vals holds the matching inner products.  Points
    are transposed a block at a time so the loop over points vectorizes;
    each inner product still sums in the same order as _dot.
    """
    q = queries.shape[0]
    n = points.shape[0]
    d = queries.shape[1]
    blk = np.empty((d, _SCAN_BLOCK))
    acc = np.empty(_SCAN_BLOCK)
    hit_q = np.empty(1024, dtype=np.int64)
    hit_id = np.empty(1024, dtype=np.int64)
    hit_v = np.empty(1024)
    nh = 0
    for i0 in range(0, n, _SCAN_BLOCK):
        nb = min(_SCAN_BLOCK, n - i0)
        for i in range(nb):
            for j in range(d):
                blk[j, i] = points[i0 + i, j]
        if nh + q * nb > hit_q.shape[0]:
            hit_q, hit_id, hit_v = _reserve_hits(hit_q, hit_id, hit_v, nh, nh + q * nb)
        for t in range(q):
            acc[:nb] = 0.0
            for j in range(d):
                qj = queries[t, j]
                for i in range(nb):
                    acc[i] += qj * blk[j, i]
            for i in range(nb):
                if acc[i] > b and live[i0 + i]:
                    hit_q[nh] = t
                    hit_id[nh] = i0 + i
                    hit_v[nh] = acc[i]
                    nh += 1
    # stable counting sort by query keeps ids ascending within each answer
    offsets = np.zeros(q + 1, dtype=np.int64)
    for h in range(nh):
        offsets[hit_q[h] + 1] += 1
    for t in range(q):
        offsets[t + 1] += offsets[t]
    fill = offsets[:q].copy()
    ids = np.empty(nh, dtype=np.int64)
    vals = np.empty(nh)
    for h in range(nh):
        k = fill[hit_q[h]]
        ids[k] = hit_id[h]
        vals[k] = hit_v[h]
        fill[hit_q[h]] += 1
    return ids, offsets, vals


@njit(cache=True)
def _select(ids, key, lo, hi, kth):
    """Partially order ids[lo:hi] by key so position kth holds its order statistic."""
    while hi - lo > 1:
        mid = (lo + hi) // 2
        # median of three as the pivot
        a0, a1, a2 = key[ids[lo]], key[ids[mid]], key[ids[hi - 1]]
        if a0 < a1:
            if a1 < a2:
                pivot = a1
            elif a0 < a2:
                pivot = a2
            else:
                pivot = a0
        else:
            if a0 < a2:
                pivot = a0
            elif a1 < a2:
                pivot = a2
            else:
                pivot = a1
        i = lo
        j = hi - 1
        while i <= j:
            while key[ids[i]] < pivot:
                i += 1
            while key[ids[j]] > pivot:
                j -= 1
            if i <= j:
                tmp = ids[i]
                ids[i] = ids[j]
                ids[j] = tmp
                i += 1
                j -= 1
        if kth <= j:
            hi = j + 1
        elif kth >= i:
            lo = i
        else:
            return


@njit(cache=True)
def _farthest(points, ids, lo, hi, c):
    best = -1.0
    arg = lo
    for t in range(lo, hi):
        p = points[ids[t]]
        s = 0.0
        for j in range(c.shape[0]):
            diff = p[j] - c[j]
            s += diff * diff
        if s > best:
            best = s
            arg = t
    return arg, best


@njit(cache=True)
def _fit_ball(points, ids, lo, hi, center):
    """Approximate smallest ball around the given points; writes the center, returns the radius.

    Starts at the centroid and takes a few Badoiu-Clarkson steps toward the
    farthest point, keeping the smallest radius seen.  Any center is valid;
    a tighter ball only improves pruning.
    """
    d = points.shape[1]
    cnt = hi - lo
    c = np.zeros(d)
    for t in range(lo, hi):
        p = points[ids[t]]
        for j in range(d):
            c[j] += p[j]
    for j in range(d):
        c[j] /= cnt
    arg, r2 = _farthest(points, ids, lo, hi, c)
    center[:] = c
    for k in range(1, _BALL_ITERS + 1):
        p = points[ids[arg]]
        for j in range(d):
            c[j] += (p[j] - c[j]) / (k + 1)
        arg, s = _farthest(points, ids, lo, hi, c)
        if s < r2:
            r2 = s
            center[:] = c
    # recompute against the kept center so the returned radius covers every point
    _, r2 = _farthest(points, ids, lo, hi, center)
    return math.sqrt(r2) * (1.0 + 1e-12) + 1e-12


@njit(cache=True)
def _build_subtree(points, ids, lo, hi, root, n_nodes, n_rows, center, radius, left, right, leaf_row,
                   slots, lpts, nslots, leaf_live, loc_row, loc_slot, parent, row_node, leaf_cap, key):
    """Median-split ids[lo:hi] into a subtree rooted at node ``root``.

    New nodes and leaf rows are taken from ``n_nodes`` / ``n_rows`` upward;
    returns the updated (n_nodes, n_rows).
    """
    d = points.shape[1]
    stack_node = np.empty(64, dtype=np.int64)
    stack_lo = np.empty(64, dtype=np.int64)
    stack_hi = np.empty(64, dtype=np.int64)
    stack_node[0] = root
    stack_lo[0] = lo
    stack_hi[0] = hi
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        a = stack_lo[sp]
        z = stack_hi[sp]
        cnt = z - a
        if cnt == 0:
            for j in range(d):
                center[node, j] = 0.0
            radius[node] = 0.0
        else:
            radius[node] = _fit_ball(points, ids, a, z, center[node])
        if cnt <= leaf_cap:
            row = n_rows
            n_rows += 1
            left[node] = -1
            right[node] = -1
            leaf_row[node] = row
            row_node[row] = node
            for t in range(cnt):
                pid = ids[a + t]
                slots[row, t] = pid
                for j in range(d):
                    lpts[row, j, t] = points[pid, j]
                lpts[row, d, t] = -1.0
                loc_row[pid] = row
                loc_slot[pid] = t
            for t in range(cnt, slots.shape[1]):
                slots[row, t] = -1
            nslots[row] = cnt
            leaf_live[row] = cnt
            continue
        # split coordinate: maximum variance
        best_j = 0
        best_var = -1.0
        for j in range(d):
            m1 = 0.0
            m2 = 0.0
            for t in range(a, z):
                v = points[ids[t], j]
                m1 += v
                m2 += v * v
            var = m2 / cnt - (m1 / cnt) ** 2
            if var > best_var:
                best_var = var
                best_j = j
        for t in range(a, z):
            key[ids[t]] = points[ids[t], best_j]
        mid = a + cnt // 2
        _select(ids, key, a, z, mid)
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        leaf_row[node] = -1
        parent[lc] = node
        parent[rc] = node
        if sp + 2 > stack_node.shape[0]:
            grow = stack_node.shape[0] * 2
            sn = np.empty(grow, dtype=np.int64)
            sl = np.empty(grow, dtype=np.int64)
            sh = np.empty(grow, dtype=np.int64)
            sn[:sp] = stack_node[:sp]
            sl[:sp] = stack_lo[:sp]
            sh[:sp] = stack_hi[:sp]
            stack_node, stack_lo, stack_hi = sn, sl, sh
        stack_node[sp] = rc
        stack_lo[sp] = mid
        stack_hi[sp] = z
        sp += 1
        stack_node[sp] = lc
        stack_lo[sp] = a
        stack_hi[sp] = mid
        sp += 1
    return n_nodes, n_rows


_CHUNK = 62  # queries per traversal; active sets are int64 bitmasks


@njit(cache=True)
def _query_batch(queries, b, root, n_nodes, center, radius, left, right, leaf_row,
                 slots, lpts, nslots, leaf_live, tol):
    """Ball-tree half-space query for every row of ``queries``.

    The tree is walked once per chunk of queries, carrying the set of queries
    whose boundary still crosses the current ball.  Returns (ids, offsets,
    vals, evals): ids[offsets[t]:offsets[t+1]] is the sorted answer for query
    t, vals holds the matching inner products and evals[t] counts point-level work (leaf predicate evaluations plus ids
    emitted from fully-inside subtrees).
    """
    q = queries.shape[0]
    d = queries.shape[1]
    evals = np.zeros(q, dtype=np.int64)
    anorm = np.empty(q)
    for t in range(q):
        anorm[t] = math.sqrt(_dot(queries[t], queries[t]))
    # a DFS stack never holds more entries than there are nodes
    stack = np.empty(n_nodes + 2, dtype=np.int64)
    stack_mask = np.empty(n_nodes + 2, dtype=np.int64)
    sub_stack = np.empty(n_nodes + 2, dtype=np.int64)
    act = np.empty(_CHUNK, dtype=np.int64)
    acc = np.empty(lpts.shape[2])
    hit_q = np.empty(1024, dtype=np.int64)
    hit_id = np.empty(1024, dtype=np.int64)
    hit_v = np.empty(1024)
    nh = 0
    for c0 in range(0, q, _CHUNK):
        cq = min(_CHUNK, q - c0)
        stack[0] = root
        stack_mask[0] = (np.int64(1) << cq) - 1
        sp = 1
        while sp > 0:
            sp -= 1
            nd = stack[sp]
            mask = stack_mask[sp]
            keep = np.int64(0)
            n_in = 0
            for t in range(cq):
                bit = np.int64(1) << t
                if mask & bit:
                    s = 0.0
                    for j in range(d):
                        s += queries[c0 + t, j] * center[nd, j]
                    rho = radius[nd] * anorm[c0 + t]
                    slack = tol * (1.0 + abs(b) + abs(s) + rho)
                    if s + rho < b - slack:
                        continue
                    if s - rho > b + slack:
                        act[n_in] = c0 + t
                        n_in += 1
                    else:
                        keep |= bit
            if n_in > 0:
                # report the whole subtree to every query whose half-space holds the ball
                sub_stack[0] = nd
                ssp = 1
                while ssp > 0:
                    ssp -= 1
                    sn = sub_stack[ssp]
                    if left[sn] < 0:
                        row = leaf_row[sn]
                        ns = nslots[row]
                        if nh + n_in * ns > hit_q.shape[0]:
                            hit_q, hit_id, hit_v = _reserve_hits(hit_q, hit_id, hit_v, nh, nh + n_in * ns)
                        for u in range(n_in):
                            tq = act[u]
                            acc[:ns] = 0.0
                            for j in range(d):
                                qj = queries[tq, j]
                                for i in range(ns):
                                    acc[i] += qj * lpts[row, j, i]
                            for i in range(ns):
                                pid = slots[row, i]
                                if pid >= 0:
                                    hit_q[nh] = tq
                                    hit_id[nh] = pid
                                    hit_v[nh] = acc[i]
                                    nh += 1
                                    evals[tq] += 1
                    else:
                        sub_stack[ssp] = left[sn]
                        sub_stack[ssp + 1] = right[sn]
                        ssp += 2
            if keep == 0:
                continue
            if left[nd] < 0:
                n_act = 0
                for t in range(cq):
                    if keep & (np.int64(1) << t):
                        act[n_act] = c0 + t
                        n_act += 1
                row = leaf_row[nd]
                # growing the buffers inside the point loop defeats LLVM's optimizations
                ns = nslots[row]
                live_here = leaf_live[row]
                if nh + n_act * ns > hit_q.shape[0]:
                    hit_q, hit_id, hit_v = _reserve_hits(hit_q, hit_id, hit_v, nh, nh + n_act * ns)
                for u in range(n_act):
                    tq = act[u]
                    # every acc[i] sums in the same order as _dot, so answers match
                    # the scans exactly; the loop over i vectorizes across points
                    acc[:ns] = 0.0
                    for j in range(d):
                        qj = queries[tq, j]
                        for i in range(ns):
                            acc[i] += qj * lpts[row, j, i]
                    for i in range(ns):
                        if acc[i] > b and slots[row, i] >= 0:
                            hit_q[nh] = tq
                            hit_id[nh] = slots[row, i]
                            hit_v[nh] = acc[i]
                            nh += 1
                    evals[tq] += live_here
            else:
                stack[sp] = left[nd]
                stack_mask[sp] = keep
                stack[sp + 1] = right[nd]
                stack_mask[sp + 1] = keep
                sp += 2
    # group hits by query, then sort ids within each group
    offsets = np.zeros(q + 1, dtype=np.int64)
    for h in range(nh):
        offsets[hit_q[h] + 1] += 1
    for t in range(q):
        offsets[t + 1] += offsets[t]
    fill = offsets[:q].copy()
    res = np.empty(nh, dtype=np.int64)
    tmp = np.empty(nh)
    for h in range(nh):
        res[fill[hit_q[h]]] = hit_id[h]
        tmp[fill[hit_q[h]]] = hit_v[h]
        fill[hit_q[h]] += 1
    vals = np.empty(nh)
    for t in range(q):
        lo = offsets[t]
        hi = offsets[t + 1]
        order = np.argsort(res[lo:hi])
        grp = res[lo:hi].copy()
        for k in range(hi - lo):
            res[lo + k] = grp[order[k]]
            vals[lo + k] = tmp[lo + order[k]]
    return res, offsets, vals, evals


@njit(cache=True)
def _dist(p, c):
    s = 0.0
    for j in range(p.shape[0]):
        diff = p[j] - c[j]
        s += diff * diff
    return math.sqrt(s)


@njit(cache=True)
def _insert_point(pid, points, root, n_nodes, n_rows, center, radius, left, right, leaf_row,
                  slots, lpts, nslots, leaf_live, loc_row, loc_slot, parent, row_node, leaf_cap, key,
                  scratch_ids):
    """Route points[pid] to the nearest-center leaf, growing balls on the way.

    Returns (n_nodes, n_rows, tombstone_delta).
    """
    d = points.shape[1]
    p = points[pid]
    tomb_delta = 0
    nd = root
    while True:
        r = _dist(p, center[nd]) * (1.0 + 1e-12) + 1e-12
        if r > radius[nd]:
            radius[nd] = r
        if left[nd] < 0:
            break
        dl = _dist(p, center[left[nd]])
        dr = _dist(p, center[right[nd]])
        nd = left[nd] if dl <= dr else right[nd]
    row = leaf_row[nd]
    slot = -1
    for t in range(nslots[row]):
        if slots[row, t] < 0:
            slot = t
            break
    if slot >= 0:
        tomb_delta -= 1
    else:
        slot = nslots[row]
        nslots[row] += 1
    slots[row, slot] = pid
    for j in range(d):
        lpts[row, j, slot] = p[j]
    lpts[row, d, slot] = -1.0
    loc_row[pid] = row
    loc_slot[pid] = slot
    leaf_live[row] += 1
    if leaf_live[row] > leaf_cap:
        # split the overfull leaf; its tombstones disappear with it and its
        # row is abandoned until the next rebuild
        cnt = 0
        for t in range(nslots[row]):
            q = slots[row, t]
            if q >= 0:
                scratch_ids[cnt] = q
                cnt += 1
        tomb_delta -= nslots[row] - cnt
        nslots[row] = 0
        leaf_live[row] = 0
        n_nodes, n_rows = _build_subtree(points, scratch_ids, 0, cnt, nd, n_nodes, n_rows,
                                         center, radius, left, right, leaf_row, slots, lpts, nslots, leaf_live,
                                         loc_row, loc_slot, parent, row_node, leaf_cap, key)
    return n_nodes, n_rows, tomb_delta


@njit(cache=True)
def _delete_point(pid, slots, lpts, nslots, leaf_live, loc_row, loc_slot):
    row = loc_row[pid]
    slots[row, loc_slot[pid]] = -1
    leaf_live[row] -= 1
    loc_row[pid] = -1
    loc_slot[pid] = -1


@njit(cache=True)
def _update_batch(ids, new_points, points, root, n_nodes, n_rows, center, radius, left, right, leaf_row,
                  slots, lpts, nslots, leaf_live, loc_row, loc_slot, parent, row_node, leaf_cap, key,
                  scratch_ids):
    """Delete every id then re-insert it at ``new_points`` (row-aligned).

    Returns (n_nodes, n_rows, tombstone_delta).
    """
    d = points.shape[1]
    tomb_delta = 0
    for u in range(ids.shape[0]):
        pid = ids[u]
        _delete_point(pid, slots, lpts, nslots, leaf_live, loc_row, loc_slot)
        tomb_delta += 1
        for j in range(d):
            points[pid, j] = new_points[u, j]
        n_nodes, n_rows, delta = _insert_point(pid, points, root, n_nodes, n_rows, center, radius, left, right, leaf_row,
                                               slots, lpts, nslots, leaf_live, loc_row, loc_slot, parent,
                                               row_node, leaf_cap, key, scratch_ids)
        tomb_delta += delta
    return n_nodes, n_rows, tomb_delta


@njit(cache=True)
def _init_margins(n_rows, center, radius, slots, lpts, nslots, parent, row_node):
    """Fill every slot's travel margin: the least slack over its ancestor balls."""
    d = center.shape[1]
    p = np.empty(d)
    for row in range(n_rows):
        for i in range(nslots[row]):
            if slots[row, i] < 0:
                continue
            for j in range(d):
                p[j] = lpts[row, j, i]
            low = np.inf
            nd = row_node[row]
            while nd >= 0:
                r = _dist(p, center[nd]) * (1.0 + 1e-12) + 1e-12
                if radius[nd] - r < low:
                    low = radius[nd] - r
                nd = parent[nd]
            lpts[row, d, i] = low


@njit(cache=True)
def _apply_rows(ids, V, eta, assign, points, center, radius, lpts, loc_row, loc_slot, parent,
                row_node):
    """Move points in place without leaving their leaves, keeping every ball valid.

    With ``assign`` set, points[ids[u]] = V[u]; otherwise points[ids[u]] -=
    eta * V[u], rounded exactly like the numpy expression.  The extra
    coordinate of each leaf slot holds a lower bound on how far the point can
    travel before it could leave any ancestor ball (negative when unknown).
    A small move only spends that margin; a large one walks to the root,
    growing balls (with some headroom) and recomputing the bound.  Radii
    never shrink and building or splitting resets the bound, so it stays
    valid.  Returns the number of balls grown.
    """
    d = points.shape[1]
    grown = 0
    for u in range(ids.shape[0]):
        pid = ids[u]
        if assign:
            for j in range(d):
                points[pid, j] = V[u, j]
        else:
            for j in range(d):
                points[pid, j] = points[pid, j] - eta * V[u, j]
        # kept inline: a call per row costs more than the fast path itself
        row = loc_row[pid]
        slot = loc_slot[pid]
        s = 0.0
        for j in range(d):
            diff = points[pid, j] - lpts[row, j, slot]
            s += diff * diff
            lpts[row, j, slot] = points[pid, j]
        step = math.sqrt(s) * (1.0 + 1e-12) + 1e-12
        if step < lpts[row, d, slot]:
            lpts[row, d, slot] -= step
            continue
        low = np.inf
        nd = row_node[row]
        while nd >= 0:
            r = _dist(points[pid], center[nd]) * (1.0 + 1e-12) + 1e-12
            # headroom stops a point pushing on the boundary from walking every step
            pad = _HEADROOM * radius[nd]
            if r + pad > radius[nd]:
                radius[nd] = r + pad
                grown += 1
            if radius[nd] - r < low:
                low = radius[nd] - r
            nd = parent[nd]
        lpts[row, d, slot] = low
    return grown


# --------------------------------------------------------------------------
# index classes
# --------------------------------------------------------------------------


def _as_points(points, d: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(points, dtype=np.float64)
    except ValueError as exc:  # ragged nested lists
        raise ShapeError("ragged point dimensions") from exc
    if arr.size == 0:
        return np.zeros((0, d or 0))
    if arr.ndim != 2:
        raise ShapeError("points must be a 2-D array")
    if d is not None and arr.shape[1] != d:
        raise ShapeError(f"expected dimension {d}, got {arr.shape[1]}")
    return arr


class _IndexBase:
    """Shared id bookkeeping: point storage and liveness by stable integer id."""

    backend = "?"

    def __init__(self, points, d: int | None = None, share: bool = False):
        pts = _as_points(points, d)
        if pts.shape[0] == 0 and d is None and pts.shape[1] == 0:
            raise ShapeError("dimension required for an empty index")
        self.d = pts.shape[1] if pts.shape[0] else (d if d is not None else pts.shape[1])
        if self.d < 1:
            raise ShapeError("dimension must be >= 1")
        n = pts.shape[0]
        cap = max(n, 16)
        if share and n == cap and pts.flags.c_contiguous and pts.flags.writeable:
            # in-place steps then update the caller's array directly
            self.points = pts
        else:
            self.points = np.zeros((cap, self.d))
            self.points[:n] = pts
        self.live = np.zeros(cap, dtype=np.bool_)
        self.live[:n] = True
        self.n_live = n

    def __len__(self):
        return self.n_live

    def _grow_ids(self, max_id: int) -> None:
        cap = self.points.shape[0]
        if max_id < cap:
            return
        new_cap = max(2 * cap, max_id + 1)
        pts = np.zeros((new_cap, self.d))
        pts[:cap] = self.points
        live = np.zeros(new_cap, dtype=np.bool_)
        live[:cap] = self.live
        self.points, self.live = pts, live
        self._grow_ids_extra(new_cap)

    def _grow_ids_extra(self, new_cap: int) -> None:
        pass

    def is_live(self, pid: int) -> bool:
        return 0 <= pid < self.live.shape[0] and bool(self.live[pid])

    def live_ids(self) -> np.ndarray:
        return np.flatnonzero(self.live)

    def _check_query(self, a) -> np.ndarray:
        a = np.ascontiguousarray(a, dtype=np.float64)
        if a.shape[-1] != self.d:
            raise ShapeError(f"query dimension {a.shape[-1]} != index dimension {self.d}")
        return a

    def query(self, h: HalfSpace | np.ndarray, b: float | None = None) -> np.ndarray:
        """Sorted ids of live points strictly inside the half-space."""
        if isinstance(h, HalfSpace):
            a, b = h.a, h.b
        else:
            a = h
        ids, _ = self.query_batch(np.atleast_2d(self._check_query(a)), float(b))
        return ids

    def query_batch(self, queries: np.ndarray, b: float) -> tuple[np.ndarray, np.ndarray]:
        """Flat answers (ids, offsets) for every row of ``queries``."""
        ids, offsets, _ = self.query_batch_values(queries, b)
        return ids, offsets

    def query_batch_values(self, queries, b):
        """Like ``query_batch`` but also returns each hit's inner product."""
        raise NotImplementedError

    def fire_sets(self, queries: np.ndarray, b: float) -> list[np.ndarray]:
        ids, offsets = self.query_batch(queries, b)
        return [ids[offsets[t]:offsets[t + 1]] for t in range(len(offsets) - 1)]


class BruteForceIndex(_IndexBase):
    backend = "brute-force"

    def query_batch_values(self, queries, b):
        queries = np.ascontiguousarray(np.atleast_2d(self._check_query(queries)))
        return _scan_batch(self.points, self.live, queries, float(b))

    def insert(self, pid: int, point) -> None:
        if self.is_live(pid):
            raise DuplicateIdError(pid)
        if pid < 0:
            raise ValueError("ids must be nonnegative")
        self._grow_ids(pid)
        self.points[pid] = _as_points([point], self.d)[0]
        self.live[pid] = True
        self.n_live += 1

    def delete(self, pid: int) -> None:
        if not self.is_live(pid):
            raise MissingIdError(pid)
        self.live[pid] = False
        self.n_live -= 1

    def update_many(self, ids, new_points) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and not self.live[ids].all():
            raise MissingIdError(int(ids[~self.live[ids]][0]))
        self.points[ids] = new_points

    move_many = update_many


class BallTreeIndex(_IndexBase):
    """Ball tree whose nodes store a bounding (center, radius) pair.

    Leaves hold at most ``leaf_capacity`` live ids plus tombstones, with their
    coordinates copied contiguously per leaf.  The tree is rebuilt from the
    live points once tombstones exceed half the live count or a leaf grows
    past four times the leaf capacity.
    """

    backend = "ball-tree"

    def __init__(self, points, d: int | None = None, leaf_capacity: int = LEAF_CAPACITY,
                 share: bool = False):
        super().__init__(points, d, share)
        if leaf_capacity < 2:
            raise ValueError("leaf capacity must be >= 2")
        self.leaf_cap = leaf_capacity
        cap = self.points.shape[0]
        self._set_locs(np.full((cap, 2), -1, dtype=np.int64))
        self._key = np.zeros(cap)
        self.rebuilds = 0
        self._build()

    def _set_locs(self, loc: np.ndarray) -> None:
        # row and slot share a cache line; the kernels see two strided views
        self._loc = loc
        self.loc_row = loc[:, 0]
        self.loc_slot = loc[:, 1]

    def _grow_ids_extra(self, new_cap):
        loc = np.full((new_cap, 2), -1, dtype=np.int64)
        loc[: self._loc.shape[0]] = self._loc
        self._set_locs(loc)
        key = np.zeros(new_cap)
        key[: self._key.shape[0]] = self._key
        self._key = key

    @property
    def _nodes(self):
        return (self.center, self.radius, self.left, self.right, self.leaf_row)

    @property
    def _leaves(self):
        return (self.slots, self.lpts, self.nslots, self.leaf_live)

    @property
    def _locs(self):
        return (self.loc_row, self.loc_slot, self.parent, self.row_node)

    def _alloc_nodes(self, cap: int) -> None:
        self.center = np.zeros((cap, self.d))
        self.radius = np.zeros(cap)
        self.left = np.full(cap, -1, dtype=np.int64)
        self.right = np.full(cap, -1, dtype=np.int64)
        self.leaf_row = np.full(cap, -1, dtype=np.int64)
        self.parent = np.full(cap, -1, dtype=np.int64)

    def _alloc_rows(self, cap: int) -> None:
        width = self.leaf_cap + 1
        self.slots = np.full((cap, width), -1, dtype=np.int64)
        # coordinate-major per leaf; one extra coordinate stores each point's travel margin
        self.lpts = np.zeros((cap, self.d + 1, width))
        self.nslots = np.zeros(cap, dtype=np.int64)
        self.leaf_live = np.zeros(cap, dtype=np.int64)
        self.row_node = np.full(cap, -1, dtype=np.int64)

    def _reserve(self, extra_nodes: int, extra_rows: int) -> None:
        need = self.n_nodes + extra_nodes
        cap = self.radius.shape[0]
        if need > cap:
            old = self._nodes + (self.parent,)
            self._alloc_nodes(max(2 * cap, need))
            for new, prev in zip(self._nodes + (self.parent,), old):
                new[:cap] = prev
        need = self.n_rows + extra_rows
        cap = self.nslots.shape[0]
        if need > cap:
            old = self._leaves + (self.row_node,)
            self._alloc_rows(max(2 * cap, need))
            for new, prev in zip(self._leaves + (self.row_node,), old):
                new[:cap] = prev

    def _build(self) -> None:
        ids = self.live_ids().astype(np.int64)
        n = ids.shape[0]
        # a median split of k > cap points yields leaves of at least cap // 2 points
        leaves = 2 * (n // max(1, self.leaf_cap // 2)) + 2
        self._alloc_nodes(2 * leaves + 2)
        self._alloc_rows(leaves + 2)
        self.loc_row[:] = -1
        self.loc_slot[:] = -1
        self.root = 0
        self.n_nodes, self.n_rows = _build_subtree(
            self.points, ids, 0, n, 0, 1, 0, *self._nodes, *self._leaves, *self._locs,
            self.leaf_cap, self._key)
        _init_margins(self.n_rows, self.center, self.radius, self.slots, self.lpts, self.nslots,
                      self.parent, self.row_node)
        self.n_tomb = 0

    def rebuild(self) -> None:
        self._build()
        self.rebuilds += 1

    def _maybe_rebuild(self) -> None:
        if self.n_tomb > self.n_live / 2 or self.max_leaf_size() > 4 * self.leaf_cap:
            self.rebuild()

    def max_leaf_size(self) -> int:
        return int(self.leaf_live[: self.n_rows].max(initial=0))

    def _query_all(self, queries, b):
        queries = np.ascontiguousarray(np.atleast_2d(self._check_query(queries)))
        return _query_batch(queries, float(b), self.root, self.n_nodes, *self._nodes,
                            *self._leaves, _PRUNE_TOL)

    def query_batch_values(self, queries, b):
        ids, offsets, vals, _ = self._query_all(queries, b)
        return ids, offsets, vals

    def query_batch_counted(self, queries, b):
        """Like ``query_batch`` but also returns per-query point-evaluation counts."""
        ids, offsets, _, evals = self._query_all(queries, b)
        return ids, offsets, evals

    def insert(self, pid: int, point) -> None:
        if pid < 0:
            raise ValueError("ids must be nonnegative")
        if self.is_live(pid):
            raise DuplicateIdError(pid)
        self._grow_ids(pid)
        self.points[pid] = _as_points([point], self.d)[0]
        self.live[pid] = True
        self.n_live += 1
        self._reserve(2, 2)
        scratch = np.empty(self.leaf_cap + 1, dtype=np.int64)
        self.n_nodes, self.n_rows, delta = _insert_point(
            pid, self.points, self.root, self.n_nodes, self.n_rows, *self._nodes, *self._leaves,
            *self._locs, self.leaf_cap, self._key, scratch)
        self.n_tomb += delta
        self._maybe_rebuild()

    def delete(self, pid: int) -> None:
        if not self.is_live(pid):
            raise MissingIdError(pid)
        _delete_point(pid, *self._leaves, self.loc_row, self.loc_slot)
        self.live[pid] = False
        self.n_live -= 1
        self.n_tomb += 1
        self._maybe_rebuild()

    def move_many(self, ids, new_points) -> None:
        """Move live points in place, keeping each in its current leaf.

        Equivalent to delete followed by insert for every query answer, but
        skips the root-to-leaf routing; intended for small per-step moves.
        """
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.size == 0:
            return
        if not self.live[ids].all():
            raise MissingIdError(int(ids[~self.live[ids]][0]))
        new_points = np.ascontiguousarray(new_points, dtype=np.float64).reshape(len(ids), self.d)
        _apply_rows(ids, new_points, 0.0, True, self.points, self.center, self.radius, self.lpts,
                    self.loc_row, self.loc_slot, self.parent, self.row_node)

    def step(self, ids, G, eta: float) -> None:
        """In-place gradient step ``points[ids] -= eta * G`` with the tree kept valid.

        ``ids`` must be distinct live ids.  With ``share=True`` at construction
        this updates the caller's array, so no second copy of the rows is made.
        """
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.size == 0:
            return
        G = np.ascontiguousarray(G, dtype=np.float64).reshape(len(ids), self.d)
        _apply_rows(ids, G, float(eta), False, self.points, self.center, self.radius, self.lpts,
                    self.loc_row, self.loc_slot, self.parent, self.row_node)

    def update_many(self, ids, new_points) -> None:
        """Move live points: for each id, delete it then insert its new position."""
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.size == 0:
            return
        if not self.live[ids].all():
            raise MissingIdError(int(ids[~self.live[ids]][0]))
        new_points = np.ascontiguousarray(new_points, dtype=np.float64).reshape(len(ids), self.d)
        self._reserve(2 * len(ids) + 2, 2 * len(ids) + 2)
        scratch = np.empty(self.leaf_cap + 1, dtype=np.int64)
        self.n_nodes, self.n_rows, delta = _update_batch(
            ids, new_points, self.points, self.root, self.n_nodes, self.n_rows, *self._nodes,
            *self._leaves, *self._locs, self.leaf_cap, self._key, scratch)
        self.n_tomb += delta
        self._maybe_rebuild()

    def leaf_order(self) -> np.ndarray:
        """Live ids grouped leaf by leaf, so nearby points get nearby positions."""
        ids = self.slots[: self.n_rows].ravel()
        return ids[ids >= 0].copy()

    # ---- test tooling -----------------------------------------------------

    def dump(self) -> str:
        """Line-oriented listing of the tree reachable from the root.

        ``node <id> center=<c0,...> radius=<r> children=<l>,<r>`` for internal
        nodes and ``leaf <id> center=... radius=... ids=<i0,i1,...>`` for leaves
        (tombstones omitted), in depth-first order.
        """
        lines = []
        stack = [self.root]
        while stack:
            nd = stack.pop()
            c = ",".join(repr(float(v)) for v in self.center[nd])
            head = f"center={c} radius={float(self.radius[nd])!r}"
            if self.left[nd] < 0:
                row = self.leaf_row[nd]
                ids = [int(p) for p in self.slots[row, : self.nslots[row]] if p >= 0]
                lines.append(f"leaf {nd} {head} ids={','.join(map(str, ids))}")
            else:
                lines.append(f"node {nd} {head} children={self.left[nd]},{self.right[nd]}")
                stack.extend([int(self.right[nd]), int(self.left[nd])])
        return "\n".join(lines) + "\n"

    def check_invariants(self) -> None:
        """Raise AssertionError unless every live id sits in exactly one leaf,
        inside the ball of every ancestor, with matching stored coordinates."""
        seen = {}
        stack = [(self.root, [])]
        while stack:
            nd, path = stack.pop()
            path = path + [nd]
            if self.left[nd] < 0:
                row = self.leaf_row[nd]
                live_here = 0
                for t in range(self.nslots[row]):
                    pid = int(self.slots[row, t])
                    if pid < 0:
                        continue
                    live_here += 1
                    assert pid not in seen, f"id {pid} in two leaves"
                    seen[pid] = nd
                    assert np.array_equal(self.lpts[row, : self.d, t], self.points[pid])
                    assert self.loc_row[pid] == row and self.loc_slot[pid] == t
                    for anc in path:
                        dist = np.linalg.norm(self.points[pid] - self.center[anc])
                        assert dist <= self.radius[anc], f"id {pid} outside ball of node {anc}"
                assert live_here == self.leaf_live[row]
                assert live_here <= 4 * self.leaf_cap
            else:
                stack.append((int(self.left[nd]), path))
                stack.append((int(self.right[nd]), path))
        assert set(seen) == set(int(i) for i in self.live_ids()), "live ids != leaf ids"
        assert self.n_tomb <= self.n_live or self.n_live == 0


def locality_order(points, leaf_capacity: int = LEAF_CAPACITY) -> np.ndarray:
    """Permutation of row ids that stores each ball-tree leaf contiguously."""
    return BallTreeIndex(points, leaf_capacity=leaf_capacity).leaf_order()


def hsr_init(points, backend: str = "ball-tree", d: int | None = None):
    """Build an index holding ``points`` under ids 0..n-1."""
    if backend in ("ball-tree", "tree"):
        return BallTreeIndex(points, d)
    if backend in ("brute-force", "brute"):
        return BruteForceIndex(points, d)
    raise ValueError(f"unknown backend {backend!r}")


def hsr_query(idx, h: HalfSpace) -> np.ndarray:
    return idx.query(h)


def hsr_insert(idx, pid: int, point) -> None:
    idx.insert(pid, point)


def hsr_delete(idx, pid: int) -> None:
    idx.delete(pid)
