"""Compiled inner loops for decoding, forward-backward and path scoring."""

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _lae(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def viterbi_loop(ll, log_self, log_adv, log_entry):
    """Best tiling of frames by a loop of left-to-right HMMs.

    ``ll`` is (T, n, m) state log-likelihoods.  Returns per-frame best
    pattern exits (pattern, segment start, score); the caller backtraces
    from frame T-1.  Equal scores keep the self-loop / lower pattern index.
    """
    T, n, m = ll.shape
    delta = np.full((n, m), NEG_INF)
    start = np.zeros((n, m), np.int64)
    nd = np.empty((n, m))
    ns = np.empty((n, m), np.int64)
    exit_pat = np.full(T, -1, np.int64)
    exit_start = np.full(T, -1, np.int64)
    exit_score = np.full(T, NEG_INF)
    for r in range(n):
        delta[r, 0] = log_entry + ll[0, r, 0]
    for t in range(T):
        if t > 0:
            entry = exit_score[t - 1] + log_entry
            for r in range(n):
                for k in range(m):
                    best = delta[r, k] + log_self[r, k]
                    bs = start[r, k]
                    if k == 0:
                        if entry > best:
                            best = entry
                            bs = t
                    else:
                        mv = delta[r, k - 1] + log_adv[r, k - 1]
                        if mv > best:
                            best = mv
                            bs = start[r, k - 1]
                    nd[r, k] = best + ll[t, r, k]
                    ns[r, k] = bs
            for r in range(n):
                for k in range(m):
                    delta[r, k] = nd[r, k]
                    start[r, k] = ns[r, k]
        best = NEG_INF
        for r in range(n):
            s = delta[r, m - 1] + log_adv[r, m - 1]
            if s > best:
                best = s
                exit_pat[t] = r
                exit_start[t] = start[r, m - 1]
        exit_score[t] = best
    return exit_pat, exit_start, exit_score


@njit(cache=True)
def _select_top(cs, cr, cst, c, N, out_s, out_r, out_st):
    """Keep the N best distinct (record, start) identities among c candidates."""
    order = np.argsort(-cs[:c], kind="mergesort")
    taken = 0
    for oi in range(c):
        idx = order[oi]
        if cs[idx] == NEG_INF:
            break
        dup = False
        for q in range(taken):
            if out_r[q] == cr[idx] and out_st[q] == cst[idx]:
                dup = True
                break
        if dup:
            continue
        out_s[taken] = cs[idx]
        out_r[taken] = cr[idx]
        out_st[taken] = cst[idx]
        taken += 1
        if taken == N:
            break
    return taken


@njit(cache=True)
def nbest_loop(ll, log_self, log_adv, log_entry, N):
    """Exact N-best token sequences for the pattern loop.

    Each state keeps its N best partial hypotheses with distinct identity
    (previous token record, current segment start).  Completed tokens are
    stored as records; the returned record table plus the ids of the final
    N records let the caller backtrace every hypothesis.
    """
    T, n, m = ll.shape
    sc = np.full((n, m, N), NEG_INF)
    rc = np.full((n, m, N), -1, np.int64)
    st = np.zeros((n, m, N), np.int64)
    cnt = np.zeros((n, m), np.int64)
    nsc = np.full((n, m, N), NEG_INF)
    nrc = np.full((n, m, N), -1, np.int64)
    nst = np.zeros((n, m, N), np.int64)
    ncnt = np.zeros((n, m), np.int64)

    cap = T * N + 1
    rec_prev = np.empty(cap, np.int64)
    rec_pat = np.empty(cap, np.int64)
    rec_start = np.empty(cap, np.int64)
    rec_end = np.empty(cap, np.int64)
    rec_score = np.empty(cap)
    nrec = 0

    ent_s = np.full(N, NEG_INF)
    ent_r = np.full(N, -1, np.int64)
    ent_c = 0

    cs = np.empty(max(2 * N, n * N))
    cr = np.empty(max(2 * N, n * N), np.int64)
    cst = np.empty(max(2 * N, n * N), np.int64)

    for r in range(n):
        sc[r, 0, 0] = log_entry + ll[0, r, 0]
        rc[r, 0, 0] = -1
        st[r, 0, 0] = 0
        cnt[r, 0] = 1

    for t in range(T):
        if t > 0:
            for r in range(n):
                for k in range(m):
                    c = 0
                    for q in range(cnt[r, k]):
                        cs[c] = sc[r, k, q] + log_self[r, k]
                        cr[c] = rc[r, k, q]
                        cst[c] = st[r, k, q]
                        c += 1
                    if k == 0:
                        for q in range(ent_c):
                            cs[c] = ent_s[q] + log_entry
                            cr[c] = ent_r[q]
                            cst[c] = t
                            c += 1
                    else:
                        for q in range(cnt[r, k - 1]):
                            cs[c] = sc[r, k - 1, q] + log_adv[r, k - 1]
                            cr[c] = rc[r, k - 1, q]
                            cst[c] = st[r, k - 1, q]
                            c += 1
                    taken = _select_top(cs, cr, cst, c, N, nsc[r, k], nrc[r, k], nst[r, k])
                    for q in range(taken):
                        nsc[r, k, q] += ll[t, r, k]
                    ncnt[r, k] = taken
            for r in range(n):
                for k in range(m):
                    cnt[r, k] = ncnt[r, k]
                    for q in range(N):
                        sc[r, k, q] = nsc[r, k, q]
                        rc[r, k, q] = nrc[r, k, q]
                        st[r, k, q] = nst[r, k, q]
        # completed tokens ending at t; candidate position encodes (r, q)
        c = 0
        for r in range(n):
            for q in range(cnt[r, m - 1]):
                cs[c] = sc[r, m - 1, q] + log_adv[r, m - 1]
                cr[c] = r * N + q
                cst[c] = 0
                c += 1
        order = np.argsort(-cs[:c], kind="mergesort")
        ent_c = 0
        for oi in range(c):
            idx = order[oi]
            if cs[idx] == NEG_INF or ent_c == N:
                break
            r = cr[idx] // N
            q = cr[idx] % N
            rec_prev[nrec] = rc[r, m - 1, q]
            rec_pat[nrec] = r
            rec_start[nrec] = st[r, m - 1, q]
            rec_end[nrec] = t
            rec_score[nrec] = cs[idx]
            ent_s[ent_c] = cs[idx]
            ent_r[ent_c] = nrec
            ent_c += 1
            nrec += 1
    final = ent_r[:ent_c].copy()
    return (rec_prev[:nrec].copy(), rec_pat[:nrec].copy(), rec_start[:nrec].copy(),
            rec_end[:nrec].copy(), rec_score[:nrec].copy(), final)


@njit(cache=True)
def forward_backward(ll, log_self, log_adv):
    """Forward-backward for one segment forced through a left-to-right HMM.

    ``ll`` is (L, m).  The path enters state 0 at frame 0 and leaves the last
    state after frame L-1.  Returns (log-likelihood, state posteriors (L, m),
    expected self-loop counts (m,), expected advance counts (m,)).
    """
    L, m = ll.shape
    alpha = np.full((L, m), NEG_INF)
    beta = np.full((L, m), NEG_INF)
    alpha[0, 0] = ll[0, 0]
    for t in range(1, L):
        for k in range(m):
            a = alpha[t - 1, k] + log_self[k]
            if k > 0:
                a = _lae(a, alpha[t - 1, k - 1] + log_adv[k - 1])
            alpha[t, k] = a + ll[t, k]
    total = alpha[L - 1, m - 1] + log_adv[m - 1]
    beta[L - 1, m - 1] = log_adv[m - 1]
    for t in range(L - 2, -1, -1):
        for k in range(m):
            b = log_self[k] + ll[t + 1, k] + beta[t + 1, k]
            if k + 1 < m:
                b = _lae(b, log_adv[k] + ll[t + 1, k + 1] + beta[t + 1, k + 1])
            beta[t, k] = b
    gamma = np.zeros((L, m))
    n_self = np.zeros(m)
    n_adv = np.zeros(m)
    if total == NEG_INF:
        return total, gamma, n_self, n_adv
    for t in range(L):
        for k in range(m):
            v = alpha[t, k] + beta[t, k] - total
            if v > NEG_INF:
                gamma[t, k] = np.exp(v)
    for t in range(L - 1):
        for k in range(m):
            if alpha[t, k] == NEG_INF:
                continue
            v = alpha[t, k] + log_self[k] + ll[t + 1, k] + beta[t + 1, k] - total
            if v > NEG_INF:
                n_self[k] += np.exp(v)
            if k + 1 < m:
                v = alpha[t, k] + log_adv[k] + ll[t + 1, k + 1] + beta[t + 1, k + 1] - total
                if v > NEG_INF:
                    n_adv[k] += np.exp(v)
    n_adv[m - 1] += 1.0
    return total, gamma, n_self, n_adv


@njit(cache=True)
def sub_scores(W):
    """Diagonal sums sum_j W[i+j, j] for every start i in [0, D-Q]."""
    D, Q = W.shape
    out = np.zeros(D - Q + 1)
    for i in range(D - Q + 1):
        s = 0.0
        for j in range(Q):
            s += W[i + j, j]
        out[i] = s
    return out


@njit(cache=True)
def dtw_max_average(W):
    """Maximum over subsequence DTW paths of (path sum / path length).

    Paths start in any row of column 0, end in any row of column Q-1 and
    use steps (1,0), (0,1), (1,1).  Exact: best sums are tracked per path
    length, so the ratio is maximized without approximation.
    """
    D, Q = W.shape
    prev = np.full((D, Q), NEG_INF)
    cur = np.full((D, Q), NEG_INF)
    for i in range(D):
        prev[i, 0] = W[i, 0]
    best = NEG_INF
    if Q == 1:
        for i in range(D):
            if prev[i, 0] > best:
                best = prev[i, 0]
    for L in range(2, D + Q):
        for i in range(D):
            for j in range(Q):
                b = NEG_INF
                if i > 0:
                    if prev[i - 1, j] > b:
                        b = prev[i - 1, j]
                    if j > 0 and prev[i - 1, j - 1] > b:
                        b = prev[i - 1, j - 1]
                if j > 0 and prev[i, j - 1] > b:
                    b = prev[i, j - 1]
                cur[i, j] = b + W[i, j] if b > NEG_INF else NEG_INF
        for i in range(D):
            v = cur[i, Q - 1]
            if v > NEG_INF and v / L > best:
                best = v / L
        tmp = prev
        prev = cur
        cur = tmp
    return best


@njit(cache=True)
def dtw_max_sum(W):
    """Maximum path sum under the same path rules (unnormalized variant)."""
    D, Q = W.shape
    acc = np.full((D, Q), NEG_INF)
    for j in range(Q):
        for i in range(D):
            b = NEG_INF
            if j == 0:
                b = 0.0
            if i > 0 and acc[i - 1, j] > b:
                b = acc[i - 1, j]
            if j > 0:
                if acc[i, j - 1] > b:
                    b = acc[i, j - 1]
                if i > 0 and acc[i - 1, j - 1] > b:
                    b = acc[i - 1, j - 1]
            acc[i, j] = b + W[i, j]
    best = NEG_INF
    for i in range(D):
        if acc[i, Q - 1] > best:
            best = acc[i, Q - 1]
    return best
