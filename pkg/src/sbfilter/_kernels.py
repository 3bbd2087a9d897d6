"""JIT-compiled inner loops for bridge integration.

The bridge update for one particle is independent of every other particle
(the data ensemble is frozen for the whole integration), so the kernel
parallelizes over particles with no cross-thread reductions: results are
bit-identical regardless of thread count or scheduling.

The drift evaluation is blocked by construction — per particle it holds one
length-M log-weight row, never a B×M matrix — and runs two passes per step:
log-kernel + running max, then exp + accumulate.  Noise is passed in as a
pre-drawn (N, B, d) block so all randomness is keyed to (step, particle)
outside the parallel section.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# bad_kind codes returned by the kernel
BAD_NONE = -1
BAD_DIVERGED = 0
BAD_DEGENERATE = 1


# fastmath flags: allow FMA contraction and reassociation (what vectorizes the
# distance loop) but nothing that weakens NaN/inf semantics — the divergence
# and degenerate-weight checks below need honest isfinite.  Note reassoc+nsz
# TOGETHER let LLVM fold isfinite away, so nsz stays off.
_FASTMATH = {"contract", "reassoc"}


@njit(parallel=True, fastmath=_FASTMATH, cache=True)
def bridge_euler_exact(x0, z, psi, dtau, T, eps_t, sigma, noise, out, bad_step, bad_kind):
    """Integrate every particle through all N Euler steps of the bridge SDE.

    x0       : (B, d) start states (anchor copies, or anything)
    z        : (M, d) data ensemble
    psi      : (M,) data-side log-weights  |z - a|^2/(2T) + extra_log_weights
    noise    : (N, B, d) standard normals
    out      : (B, d) terminal states (NaN rows on failure)
    bad_step : (B,) first failing Euler step per particle, -1 if none
    bad_kind : (B,) BAD_DIVERGED / BAD_DEGENERATE / BAD_NONE
    """
    B, d = x0.shape
    M = z.shape[0]
    N = noise.shape[0]
    sq_noise = sigma * np.sqrt(dtau)
    for b in prange(B):
        ell = np.empty(M)
        x = np.empty(d)
        num = np.empty(d)
        for k in range(d):
            x[k] = x0[b, k]
        bstep = -1
        bkind = BAD_NONE
        for l in range(N):
            t = l * dtau
            s = T - t
            if s < eps_t:
                s = eps_t  # T - t_eff with t_eff = min(t, T - eps_t)
            c = 0.5 / s
            m = -np.inf
            for i in range(M):
                dist2 = 0.0
                for k in range(d):
                    diff = z[i, k] - x[k]
                    dist2 += diff * diff
                v = psi[i] - c * dist2
                ell[i] = v
                if v > m:
                    m = v
            if m == -np.inf:
                bstep = l
                bkind = BAD_DEGENERATE
                break
            den = 0.0
            for k in range(d):
                num[k] = 0.0
            for i in range(M):
                w = np.exp(ell[i] - m)
                den += w
                for k in range(d):
                    num[k] += w * z[i, k]
            ok = True
            for k in range(d):
                alpha = (num[k] / den - x[k]) / s
                x[k] = x[k] + alpha * dtau + sq_noise * noise[l, b, k]
                if not np.isfinite(x[k]):
                    ok = False
            if not ok:
                bstep = l
                bkind = BAD_DIVERGED
                break
        bad_step[b] = bstep
        bad_kind[b] = bkind
        if bstep >= 0:
            for k in range(d):
                out[b, k] = np.nan
        else:
            for k in range(d):
                out[b, k] = x[k]
