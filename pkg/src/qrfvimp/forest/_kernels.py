"""
Numba kernels for honest tree growing and forest weight queries.

A forest is stored as flat arrays. Node ``k`` of tree ``b`` lives at
``tree_node_ptr[b] + k``; children are tree-relative. Leaves carry
``feature == -1`` and a global leaf id whose estimation-half members are
``leaf_members[leaf_ptr[id]:leaf_ptr[id + 1]]``.
"""

import math

import numba as nb
import numpy as np

LEAF = -1


@nb.njit(cache=True)
def node_quantile(values, tau):
    """Left-continuous empirical quantile: smallest v with F_n(v) >= tau."""
    srt = np.sort(values)
    n = srt.shape[0]
    k = int(math.ceil(tau * n - 1e-12)) - 1
    if k < 0:
        k = 0
    if k > n - 1:
        k = n - 1
    return srt[k]


@nb.njit(cache=True)
def pseudo_outcomes(y, tau):
    q = node_quantile(y, tau)
    out = np.empty(y.shape[0])
    for i in range(y.shape[0]):
        out[i] = tau - 1.0 if y[i] <= q else tau
    return out


@nb.njit(cache=True)
def _partition(idx, start, end, X, feature, threshold):
    """Stable in-place partition of idx[start:end] on X[:, feature] <= threshold."""
    buf = idx[start:end].copy()
    lo = start
    for i in range(buf.shape[0]):
        if X[buf[i], feature] <= threshold:
            idx[lo] = buf[i]
            lo += 1
    hi = lo
    for i in range(buf.shape[0]):
        if X[buf[i], feature] > threshold:
            idx[hi] = buf[i]
            hi += 1
    return lo


@nb.njit(cache=True)
def _best_split(X, y, tr, tr_start, tr_end, es, es_start, es_end, features,
                tau, alpha, min_leaf_est):
    """
    Search ``features`` (ascending) for the admissible split maximizing gain.

    Returns (feature, threshold, gain); feature is -1 when nothing is
    admissible or every admissible gain is zero.
    """
    n_p = tr_end - tr_start
    n_e = es_end - es_start
    ytr = np.empty(n_p)
    for i in range(n_p):
        ytr[i] = y[tr[tr_start + i]]
    rho = pseudo_outcomes(ytr, tau)
    total = 0.0
    for i in range(n_p):
        total += rho[i]

    best_feature = -1
    best_threshold = 0.0
    best_gain = 0.0
    xs = np.empty(n_p)
    xe = np.empty(n_e)
    for f in features:
        for i in range(n_p):
            xs[i] = X[tr[tr_start + i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(n_e):
            xe[i] = X[es[es_start + i], f]
        xe_sorted = np.sort(xe)
        left_sum = 0.0
        for k in range(1, n_p):
            left_sum += rho[order[k - 1]]
            lo_x = xs[order[k - 1]]
            hi_x = xs[order[k]]
            if not (lo_x < hi_x):
                continue
            if min(k, n_p - k) < alpha * n_p:
                continue
            thr = 0.5 * (lo_x + hi_x)
            if thr >= hi_x:
                thr = lo_x
            n_e_left = np.searchsorted(xe_sorted, thr, side="right")
            if n_e_left < min_leaf_est or n_e - n_e_left < min_leaf_est:
                continue
            mean_l = left_sum / k
            mean_r = (total - left_sum) / (n_p - k)
            diff = mean_l - mean_r
            gain = (k * (n_p - k)) / (n_p * n_p) * diff * diff
            if gain > best_gain:
                best_gain = gain
                best_feature = f
                best_threshold = thr
    return best_feature, best_threshold, best_gain


@nb.njit(cache=True)
def grow_tree(X, y, tr_in, es_in, allowed, tau, alpha, min_leaf_est, mtry,
              seed):
    """
    Grow one honest tree.

    Parameters
    ----------
    X, y : training covariates and responses (full data; rows indexed by
        ``tr_in`` / ``es_in``).
    tr_in, es_in : int64 arrays, structure and estimation halves.
    allowed : int64 array of feature indices eligible for splitting.
    seed : int, seeds numba's generator for candidate-feature draws.

    Returns
    -------
    feature, threshold, left, right, n_train, n_est, leaf_of_node,
    leaf_members, leaf_ptr
    """
    np.random.seed(seed)
    tr = tr_in.copy()
    es = es_in.copy()
    n_tr = tr.shape[0]
    n_es = es.shape[0]
    cap = 2 * n_tr + 1
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    ntrain = np.zeros(cap, dtype=np.int64)
    nest = np.zeros(cap, dtype=np.int64)
    leaf_of_node = np.full(cap, -1, dtype=np.int64)
    leaf_members = np.empty(n_es, dtype=np.int64)
    leaf_ptr = np.zeros(cap + 1, dtype=np.int64)

    # stack rows: node, tr_start, tr_end, es_start, es_end
    stack = np.empty((cap, 5), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_tr
    stack[0, 3] = 0
    stack[0, 4] = n_es
    top = 1
    n_nodes = 1
    n_leaves = 0
    n_members = 0
    n_allowed = allowed.shape[0]
    m = min(mtry, n_allowed)
    pool = allowed.copy()

    while top > 0:
        top -= 1
        node = stack[top, 0]
        a = stack[top, 1]
        b = stack[top, 2]
        c = stack[top, 3]
        d = stack[top, 4]
        ntrain[node] = b - a
        nest[node] = d - c

        f_best = -1
        thr = 0.0
        if b - a >= 2 and d - c >= 2 * min_leaf_est:
            # partial Fisher-Yates draw of m candidate features
            for i in range(m):
                j = i + np.random.randint(0, n_allowed - i)
                tmp = pool[i]
                pool[i] = pool[j]
                pool[j] = tmp
            cand = np.sort(pool[:m])
            f_best, thr, gain = _best_split(X, y, tr, a, b, es, c, d, cand,
                                            tau, alpha, min_leaf_est)
        if f_best < 0:
            leaf_of_node[node] = n_leaves
            leaf_ptr[n_leaves] = n_members
            members = np.sort(es[c:d])
            for i in range(members.shape[0]):
                leaf_members[n_members] = members[i]
                n_members += 1
            n_leaves += 1
            leaf_ptr[n_leaves] = n_members
            continue

        mid_tr = _partition(tr, a, b, X, f_best, thr)
        mid_es = _partition(es, c, d, X, f_best, thr)
        feature[node] = f_best
        threshold[node] = thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is numbered depth-first
        stack[top, 0] = rnode
        stack[top, 1] = mid_tr
        stack[top, 2] = b
        stack[top, 3] = mid_es
        stack[top, 4] = d
        top += 1
        stack[top, 0] = lnode
        stack[top, 1] = a
        stack[top, 2] = mid_tr
        stack[top, 3] = c
        stack[top, 4] = mid_es
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            ntrain[:n_nodes].copy(), nest[:n_nodes].copy(),
            leaf_of_node[:n_nodes].copy(), leaf_members[:n_members].copy(),
            leaf_ptr[:n_leaves + 1].copy())


@nb.njit(cache=True)
def grow_forest(X, y, train_halves, est_halves, allowed, tau, alpha,
                min_leaf_est, mtry, seeds):
    """Grow ``len(seeds)`` trees and concatenate them into flat arrays."""
    n_trees = seeds.shape[0]
    h_tr = train_halves.shape[1]
    h_es = est_halves.shape[1]
    cap = n_trees * (2 * h_tr + 1)
    feature = np.empty(cap, dtype=np.int64)
    threshold = np.empty(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    ntrain = np.empty(cap, dtype=np.int64)
    nest = np.empty(cap, dtype=np.int64)
    leaf_of_node = np.empty(cap, dtype=np.int64)
    leaf_members = np.empty(n_trees * h_es, dtype=np.int64)
    leaf_ptr = np.zeros(cap + 1, dtype=np.int64)
    tree_node_ptr = np.zeros(n_trees + 1, dtype=np.int64)
    n_nodes = 0
    n_leaves = 0
    n_members = 0
    for t in range(n_trees):
        (f, th, l, r, nt, ne, lon, lm, lp) = grow_tree(
            X, y, train_halves[t], est_halves[t], allowed, tau, alpha,
            min_leaf_est, mtry, seeds[t])
        k = f.shape[0]
        for i in range(k):
            feature[n_nodes + i] = f[i]
            threshold[n_nodes + i] = th[i]
            left[n_nodes + i] = l[i]
            right[n_nodes + i] = r[i]
            ntrain[n_nodes + i] = nt[i]
            nest[n_nodes + i] = ne[i]
            leaf_of_node[n_nodes + i] = lon[i] + n_leaves if lon[i] >= 0 else -1
        n_tree_leaves = lp.shape[0] - 1
        for j in range(n_tree_leaves):
            leaf_ptr[n_leaves + j + 1] = lp[j + 1] + n_members
        for j in range(lm.shape[0]):
            leaf_members[n_members + j] = lm[j]
        n_nodes += k
        n_leaves += n_tree_leaves
        n_members += lm.shape[0]
        tree_node_ptr[t + 1] = n_nodes
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            ntrain[:n_nodes].copy(), nest[:n_nodes].copy(),
            leaf_of_node[:n_nodes].copy(), leaf_members[:n_members].copy(),
            leaf_ptr[:n_leaves + 1].copy(), tree_node_ptr)


@nb.njit(cache=True)
def find_leaf(feature, threshold, left, right, leaf_of_node, base, x):
    node = 0
    while feature[base + node] != LEAF:
        if x[feature[base + node]] <= threshold[base + node]:
            node = left[base + node]
        else:
            node = right[base + node]
    return leaf_of_node[base + node]


@nb.njit(cache=True)
def forest_weights_batch(feature, threshold, left, right, leaf_of_node,
                         leaf_members, leaf_ptr, tree_node_ptr, n_rows, Xq):
    """
    Forest kernel weights for every query row, as CSR arrays.

    Returns (indptr, indices, weights); indices within a row are ascending.
    """
    n_q = Xq.shape[0]
    n_trees = tree_node_ptr.shape[0] - 1
    dense = np.zeros(n_rows)
    touched = np.empty(n_rows, dtype=np.int64)
    mark = np.zeros(n_rows, dtype=np.bool_)
    indptr = np.zeros(n_q + 1, dtype=np.int64)
    cap = max(16, n_q * 64)
    indices = np.empty(cap, dtype=np.int64)
    weights = np.empty(cap)
    nnz = 0
    inv_b = 1.0 / n_trees
    for q in range(n_q):
        x = Xq[q]
        n_touch = 0
        for t in range(n_trees):
            leaf = find_leaf(feature, threshold, left, right, leaf_of_node,
                             tree_node_ptr[t], x)
            lo = leaf_ptr[leaf]
            hi = leaf_ptr[leaf + 1]
            if hi <= lo:
                raise ValueError("leaf without estimation members")
            w = inv_b / (hi - lo)
            for k in range(lo, hi):
                i = leaf_members[k]
                if not mark[i]:
                    mark[i] = True
                    touched[n_touch] = i
                    n_touch += 1
                dense[i] += w
        rows = np.sort(touched[:n_touch])
        if nnz + n_touch > cap:
            new_cap = max(2 * cap, nnz + n_touch)
            ind2 = np.empty(new_cap, dtype=np.int64)
            w2 = np.empty(new_cap)
            ind2[:nnz] = indices[:nnz]
            w2[:nnz] = weights[:nnz]
            indices = ind2
            weights = w2
            cap = new_cap
        for k in range(n_touch):
            i = rows[k]
            indices[nnz] = i
            weights[nnz] = dense[i]
            nnz += 1
            dense[i] = 0.0
            mark[i] = False
        indptr[q + 1] = nnz
    return indptr, indices[:nnz].copy(), weights[:nnz].copy()


@nb.njit(cache=True)
def weighted_quantile_sorted(vals, w, tau):
    """
    Left-endpoint weighted quantile of values already sorted ascending.

    Ties in ``vals`` are merged before accumulating so the returned value is
    the smallest support point with cumulative weight >= tau.
    """
    total = 0.0
    for k in range(w.shape[0]):
        total += w[k]
    target = tau * total
    tol = 1e-12 * total
    cum = 0.0
    n = vals.shape[0]
    k = 0
    while k < n:
        v = vals[k]
        while k < n and vals[k] == v:
            cum += w[k]
            k += 1
        if cum >= target - tol:
            return v
    return vals[n - 1]


@nb.njit(cache=True)
def csr_quantiles(indptr, indices, weights, y, tau):
    n_q = indptr.shape[0] - 1
    out = np.empty(n_q)
    for q in range(n_q):
        lo = indptr[q]
        hi = indptr[q + 1]
        vals = y[indices[lo:hi]]
        order = np.argsort(vals, kind="mergesort")
        out[q] = weighted_quantile_sorted(vals[order], weights[lo:hi][order],
                                          tau)
    return out


@nb.njit(cache=True)
def csr_sum_squares(indptr, weights):
    n_q = indptr.shape[0] - 1
    out = np.empty(n_q)
    for q in range(n_q):
        acc = 0.0
        for k in range(indptr[q], indptr[q + 1]):
            acc += weights[k] * weights[k]
        out[q] = acc
    return out
