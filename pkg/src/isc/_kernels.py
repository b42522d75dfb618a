"""Compiled kernels for the binary shift search."""

from __future__ import annotations

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic


@intrinsic
def _popcount64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


@njit(cache=True, nogil=True)
def shift_search(db_words, n, shifted_query, h_max):
    """Minimum Hamming distance over all column shifts, per database row.

    ``shifted_query[s]`` is the query mask rolled by ``s`` columns. Only
    distances ``<= h_max`` are resolved exactly; rows with no shift inside
    the bound get distance ``h_max + 1`` and shift ``-1``. Ties keep the
    smallest shift.
    """
    n_sectors = shifted_query.shape[0]
    n_words = shifted_query.shape[2]
    best_h = np.empty(n, np.int64)
    best_k = np.empty(n, np.int64)
    for c in range(n):
        bound = h_max
        bh = h_max + 1
        bk = -1
        for s in range(n_sectors):
            h = 0
            for j in range(n_sectors):
                for w in range(n_words):
                    h += _popcount64(shifted_query[s, j, w] ^ db_words[c, j, w])
                if h > bound:
                    break
            if h < bh:
                bh = h
                bk = s
                # strictly better shifts only from here on
                bound = h - 1
        best_h[c] = bh
        best_k[c] = bk
    return best_h, best_k
