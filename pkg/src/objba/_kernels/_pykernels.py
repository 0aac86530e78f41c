"""Reference numpy/scipy kernels.

Same signatures as the compiled module. Functions mutate their output
arguments in place where noted and return an integer status for the Schur
kernels (``-1`` on success, otherwise the index of the singular point block).
"""
import numpy as np
import scipy.sparse as sp

SINGULAR_RTOL = 1e-13


def accumulate(H, b_co, H_pp, b_p, pair_blocks, r, W, Jco, co_idx, Jp, p_idx, pair_idx):
    """Scatter ``J^T W J`` and ``J^T W r`` of a batch of factors into the system.

    Shapes: r (n,m), W (n,m,m), Jco (n,s,m,6), co_idx (n,s), Jp (n,m,3) or
    empty, p_idx (n,), pair_idx (n,s). Negative indices mark fixed slots.
    """
    n, s = co_idx.shape
    if n == 0:
        return
    n_co = H.shape[0] // 6
    H4 = H.reshape(n_co, 6, n_co, 6)
    WJ = np.einsum("nij,nsjk->nsik", W, Jco)
    Wr = np.einsum("nij,nj->ni", W, r)
    for a in range(s):
        ia = co_idx[:, a]
        ma = ia >= 0
        if not ma.any():
            continue
        np.add.at(b_co.reshape(n_co, 6), ia[ma], np.einsum("nik,ni->nk", Jco[ma, a], Wr[ma]))
        for c in range(s):
            ic = co_idx[:, c]
            m = ma & (ic >= 0)
            if m.any():
                blk = np.einsum("nik,nil->nkl", Jco[m, a], WJ[m, c])
                np.add.at(H4, (ia[m], slice(None), ic[m]), blk)
    if Jp is None or Jp.size == 0:
        return
    mp = p_idx >= 0
    if not mp.any():
        return
    WJp = np.einsum("nij,njk->nik", W[mp], Jp[mp])
    np.add.at(H_pp, p_idx[mp], np.einsum("nik,nil->nkl", Jp[mp], WJp))
    np.add.at(b_p, p_idx[mp], np.einsum("nik,ni->nk", Jp[mp], Wr[mp]))
    for a in range(s):
        m = mp & (pair_idx[:, a] >= 0)
        if m.any():
            WJp_a = np.einsum("nij,njk->nik", W[m], Jp[m])
            np.add.at(pair_blocks, pair_idx[m, a], np.einsum("nik,nil->nkl", Jco[m, a], WJp_a))


def invert_point_blocks(H_pp):
    n = H_pp.shape[0]
    if n == 0:
        return np.zeros((0, 3, 3)), -1
    det = np.linalg.det(H_pp)
    scale = np.abs(H_pp).reshape(n, 9).max(axis=1)
    bad = ~(np.abs(det) > SINGULAR_RTOL * scale ** 3)
    if bad.any():
        return None, int(np.flatnonzero(bad)[0])
    return np.linalg.inv(H_pp), -1


def _coupling_matrix(pair_ptr, pair_co, pair_blocks, n_co, n_p):
    """Sparse H_{CO,P} assembled from the per-(variable, point) blocks."""
    n_pairs = pair_co.shape[0]
    pair_p = np.repeat(np.arange(n_p), np.diff(pair_ptr))
    rows = (6 * pair_co[:, None, None] + np.arange(6)[None, :, None]) * np.ones((1, 1, 3), dtype=np.int64)
    cols = (3 * pair_p[:, None, None] + np.arange(3)[None, None, :]) * np.ones((1, 6, 1), dtype=np.int64)
    return sp.csr_matrix((pair_blocks.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
                         shape=(6 * n_co, 3 * n_p)) if n_pairs else sp.csr_matrix((6 * n_co, 3 * n_p))


def schur_reduce(H, b_co, H_pp, b_p, pair_ptr, pair_co, pair_blocks):
    """Eliminate all point blocks. Returns (H_red, b_red, H_pp_inv, status)."""
    n_co = H.shape[0] // 6
    n_p = H_pp.shape[0]
    Vinv, bad = invert_point_blocks(H_pp)
    if bad >= 0:
        return None, None, None, bad
    if n_p == 0:
        return H.copy(), b_co.copy(), Vinv, -1
    W = _coupling_matrix(pair_ptr, pair_co, pair_blocks, n_co, n_p)
    V = sp.block_diag(list(Vinv), format="csr")
    WV = W @ V
    H_red = H - (WV @ W.T).toarray()
    b_red = b_co - WV @ b_p.reshape(-1)
    return H_red, b_red, Vinv, -1


def back_substitute(Vinv, b_p, pair_ptr, pair_co, pair_blocks, x_co):
    n_p = b_p.shape[0]
    if n_p == 0:
        return np.zeros((0, 3))
    n_co = x_co.shape[0] // 6
    W = _coupling_matrix(pair_ptr, pair_co, pair_blocks, n_co, n_p)
    rhs = b_p - (W.T @ x_co).reshape(n_p, 3)
    return np.einsum("nij,nj->ni", Vinv, rhs)
