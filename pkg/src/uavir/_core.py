"""Compiled inner loops of the alternating sum-rate optimizer.

The public contract lives in :mod:`uavir.beamforming`; these kernels fuse the
same block updates for speed.  ``tests/test_beamforming.py`` pins the
equivalence between one fused outer pass and the composition of the public
update operations.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sinr_parts(E, W, noise):
    """Per-user SINR plus the direct terms and full received-power denominators.

    E holds the effective rows (reflection @ D_k), shape (K, M).
    """
    K = E.shape[0]
    T = E @ W
    cdiag = np.empty(K, dtype=np.complex128)
    dvec = np.empty(K)
    eta = np.empty(K)
    for k in range(K):
        tot = 0.0
        for i in range(T.shape[1]):
            tr = T[k, i]
            tot += tr.real * tr.real + tr.imag * tr.imag
        ck = T[k, k]
        sig = ck.real * ck.real + ck.imag * ck.imag
        cdiag[k] = ck
        dvec[k] = tot + noise
        eta[k] = sig / (tot - sig + noise)
    return eta, cdiag, dvec


@njit(cache=True)
def surrogate_value(eta, alpha, b):
    s = 0.0
    for k in range(eta.shape[0]):
        s += np.log2(1.0 + alpha[k]) - alpha[k] + (1.0 + alpha[k]) * eta[k] / (1.0 + eta[k])
    return b * s


@njit(cache=True)
def rate_value(eta, b):
    s = 0.0
    for k in range(eta.shape[0]):
        s += np.log2(1.0 + eta[k])
    return b * s


@njit(cache=True)
def precode_block(E, S, ahat, noise, p_max, W, itol, max_iter, kappa_tol):
    """Alternate the precoder-side auxiliary and the budgeted solve at fixed reflection.

    The regularized solve runs in the K x K row-Gram space (S = E E^H): with
    B = sum_k |lam_k|^2 g_k g_k^H and g_k the conjugated effective row,
    (kappa I + B)^{-1} E^H = E^H (kappa I + Lam S)^{-1}, and the power budget
    reduces to sum_m cm_m / (psi_m + kappa)^2 over the eigenvalues psi of
    Lam^{1/2} S Lam^{1/2}.  kappa = 0 is used when the unconstrained solution
    fits the budget; otherwise a safeguarded Newton bisection finds the kappa
    that makes the budget tight.
    """
    K, M = E.shape
    sq = np.sqrt(ahat)
    eta, cdiag, dvec = sinr_parts(E, W, noise)
    fprev = 0.0
    have_prev = False
    Wb = W.copy()
    for _ in range(max_iter):
        lam = sq * cdiag / dvec
        lam2 = lam.real ** 2 + lam.imag ** 2
        nact = 0
        for k in range(K):
            if lam2[k] > 0.0:
                nact += 1
        if nact == 0:
            Wb = np.zeros((M, K), dtype=np.complex128)
            break
        act = np.empty(nact, dtype=np.int64)
        j = 0
        for k in range(K):
            if lam2[k] > 0.0:
                act[j] = k
                j += 1
        la = lam2[act]
        sqla = np.sqrt(la)
        H = np.empty((nact, nact), dtype=np.complex128)
        for a in range(nact):
            for c in range(nact):
                H[a, c] = sqla[a] * S[act[a], act[c]] * sqla[c]
        psi, V = np.linalg.eigh(H)
        for m in range(nact):
            if psi[m] < 0.0:
                psi[m] = 0.0
        pmax_e = psi[nact - 1]
        live = np.zeros(nact, dtype=np.bool_)
        for m in range(nact):
            if pmax_e > 0.0 and psi[m] > pmax_e * 1e-12:
                live[m] = True
        ck = ahat[act] * la
        cm = np.zeros(nact)
        for m in range(nact):
            if not live[m]:
                continue
            acc = 0.0
            for k in range(nact):
                y = np.conj(V[k, m]) / sqla[k]
                acc += ck[k] * (y.real * y.real + y.imag * y.imag)
            cm[m] = psi[m] * acc
        p0 = 0.0
        for m in range(nact):
            if live[m] and psi[m] > 0.0:
                p0 += cm[m] / (psi[m] * psi[m])
        kappa = 0.0
        if p0 > p_max:
            hi = 1.0
            guard = 0
            while True:
                p = 0.0
                for m in range(nact):
                    if live[m]:
                        p += cm[m] / ((psi[m] + hi) * (psi[m] + hi))
                if p <= p_max:
                    break
                hi *= 4.0
                guard += 1
                if guard > 600:
                    raise ValueError("power constraint infeasible bracketing")
            lo = 0.0
            kappa = hi
            for _ in range(100):
                p = 0.0
                dp = 0.0
                for m in range(nact):
                    if live[m]:
                        z = psi[m] + kappa
                        p += cm[m] / (z * z)
                        dp -= 2.0 * cm[m] / (z * z * z)
                if p > p_max:
                    lo = kappa
                else:
                    hi = kappa
                    if p_max - p <= kappa_tol * p_max:
                        break
                if dp != 0.0:
                    knew = kappa - (p - p_max) / dp
                else:
                    knew = 0.5 * (lo + hi)
                if not (lo < knew < hi):
                    knew = 0.5 * (lo + hi)
                kappa = knew
            kappa = hi
        inv = np.zeros(nact)
        for m in range(nact):
            if kappa > 0.0:
                inv[m] = 1.0 / (psi[m] + kappa)
            elif live[m]:
                inv[m] = 1.0 / psi[m]
        X = np.zeros((nact, nact), dtype=np.complex128)
        for a in range(nact):
            for kk in range(nact):
                acc = 0.0 + 0.0j
                for m in range(nact):
                    acc += V[a, m] * inv[m] * np.conj(V[kk, m])
                X[a, kk] = acc * (sqla[a] / sqla[kk]) * sq[act[kk]] * lam[act[kk]]
        Wb = np.zeros((M, K), dtype=np.complex128)
        for kk in range(nact):
            col = act[kk]
            for mm in range(M):
                acc = 0.0 + 0.0j
                for a in range(nact):
                    acc += np.conj(E[act[a], mm]) * X[a, kk]
                Wb[mm, col] = acc
        eta, cdiag, dvec = sinr_parts(E, Wb, noise)
        fv = 0.0
        for k in range(K):
            fv += 2.0 * sq[k] * (np.conj(lam[k]) * cdiag[k]).real - lam2[k] * dvec[k]
        if have_prev:
            ref = abs(fprev)
            if ref < 1e-300:
                ref = 1e-300
            if abs(fv - fprev) <= itol * ref:
                break
        fprev = fv
        have_prev = True
    return Wb


@njit(cache=True)
def reflection_sweeps(U, v, t, tol, max_sweeps):
    """Cyclic exact coordinate maximization of -t^H U t + 2 Re(t^H v), |t_n| <= 1."""
    n = v.shape[0]
    for _ in range(max_sweeps):
        move = 0.0
        for i in range(n):
            ci = v[i]
            for j in range(n):
                if j != i:
                    ci -= U[i, j] * t[j]
            di = U[i, i].real
            if di > 0.0:
                ti = ci / di
                m = ti.real * ti.real + ti.imag * ti.imag
                if m > 1.0:
                    ti /= np.sqrt(m)
            else:
                m = abs(ci)
                if m > 0.0:
                    ti = ci / m
                else:
                    ti = 0.0 + 0.0j
            d = abs(ti - t[i])
            if d > move:
                move = d
            t[i] = ti
        if move <= tol:
            break
    return t


@njit(cache=True)
def reflect_block(D, W, theta, ahat, noise, itol, max_iter, sweep_tol):
    """Alternate the reflection-side auxiliary and the coordinate solve at fixed W."""
    K, N, M = D.shape
    sq = np.sqrt(ahat)
    DW = np.empty((K, N, K), dtype=np.complex128)
    for k in range(K):
        DW[k] = D[k] @ W
    Mk = np.empty((K, N, N), dtype=np.complex128)
    cols = np.empty((K, N), dtype=np.complex128)
    for k in range(K):
        Mk[k] = DW[k] @ DW[k].conj().T
        for n in range(N):
            cols[k, n] = DW[k, n, k]
    E = np.empty((K, M), dtype=np.complex128)
    for k in range(K):
        E[k] = theta @ D[k]
    eta, cdiag, dvec = sinr_parts(E, W, noise)
    t = theta.conj().copy()
    fprev = 0.0
    have_prev = False
    U = np.empty((N, N), dtype=np.complex128)
    v = np.empty(N, dtype=np.complex128)
    for _ in range(max_iter):
        delta = sq * cdiag / dvec
        d2 = delta.real ** 2 + delta.imag ** 2
        for a in range(N):
            for bb in range(N):
                acc = 0.0 + 0.0j
                for k in range(K):
                    acc += d2[k] * Mk[k, a, bb]
                U[a, bb] = acc
        for a in range(N):
            acc = 0.0 + 0.0j
            for k in range(K):
                acc += sq[k] * np.conj(delta[k]) * cols[k, a]
            v[a] = acc
        t = reflection_sweeps(U, v, t, sweep_tol, 1000)
        theta = t.conj()
        for k in range(K):
            E[k] = theta @ D[k]
        eta, cdiag, dvec = sinr_parts(E, W, noise)
        fv = 0.0
        for k in range(K):
            fv += 2.0 * sq[k] * (np.conj(delta[k]) * cdiag[k]).real - d2[k] * dvec[k]
        if have_prev:
            ref = abs(fprev)
            if ref < 1e-300:
                ref = 1e-300
            if abs(fv - fprev) <= itol * ref:
                break
        fprev = fv
        have_prev = True
    return theta, E


@njit(cache=True)
def run_core(D, noise, b, p_max, W0, theta0, max_outer, otol, max_inner, itol,
             kappa_tol, do_reflect, accelerate):
    """Full alternating optimization from one starting point.

    Returns (W, theta, surrogate history, tightness residuals, converged,
    max power ratio, max reflection modulus).  Each outer pass refreshes the
    rate-ratio auxiliary, runs the precoder block and the reflection block,
    and optionally takes a safeguarded extrapolation step (accepted only when
    it improves the surrogate, so the recorded sequence stays non-decreasing).
    """
    K, N, M = D.shape
    theta = theta0.copy()
    W = W0.copy()
    E = np.empty((K, M), dtype=np.complex128)
    for k in range(K):
        E[k] = theta @ D[k]
    S = E @ E.conj().T
    eta, _, _ = sinr_parts(E, W, noise)
    alpha = eta.copy()
    hist = np.empty(max_outer + 1)
    tight = np.empty(max_outer)
    hist[0] = surrogate_value(eta, alpha, b)
    sweep_tol = itol * 0.1
    nh = 1
    nt = 0
    converged = False
    max_pow = 0.0
    max_mod = 0.0
    for it in range(max_outer):
        if it > 0:
            eta, _, _ = sinr_parts(E, W, noise)
            alpha = eta.copy()
            ca0 = surrogate_value(eta, alpha, b)
            cr0 = rate_value(eta, b)
            ref = cr0 if cr0 > 1e-300 else 1e-300
            tight[nt] = abs(ca0 - cr0) / ref
            nt += 1
        ahat = b * (1.0 + alpha)
        W1 = precode_block(E, S, ahat, noise, p_max, W, itol, max_inner, kappa_tol)
        if do_reflect:
            t1, E1 = reflect_block(D, W1, theta, ahat, noise, itol, max_inner, sweep_tol)
        else:
            t1 = theta
            E1 = E
        if accelerate:
            S1 = E1 @ E1.conj().T
            W2 = precode_block(E1, S1, ahat, noise, p_max, W1, itol, max_inner, kappa_tol)
            if do_reflect:
                t2, E2 = reflect_block(D, W2, t1, ahat, noise, itol, max_inner, sweep_tol)
            else:
                t2 = t1
                E2 = E1
            eta2, _, _ = sinr_parts(E2, W2, noise)
            c2 = surrogate_value(eta2, alpha, b)
            rw = W1 - W
            rt = t1 - theta
            vw = W2 - 2.0 * W1 + W
            vt = t2 - 2.0 * t1 + theta
            nr = 0.0
            nv = 0.0
            for mm in range(M):
                for k in range(K):
                    nr += rw[mm, k].real ** 2 + rw[mm, k].imag ** 2
                    nv += vw[mm, k].real ** 2 + vw[mm, k].imag ** 2
            for nn in range(N):
                nr += rt[nn].real ** 2 + rt[nn].imag ** 2
                nv += vt[nn].real ** 2 + vt[nn].imag ** 2
            bestW, bestT, bestE, bestC = W2, t2, E2, c2
            if nv > 1e-300:
                g = -np.sqrt(nr / nv)
                Wa = W - 2.0 * g * rw + g * g * vw
                ta = theta - 2.0 * g * rt + g * g * vt
                pw = 0.0
                for mm in range(M):
                    for k in range(K):
                        pw += Wa[mm, k].real ** 2 + Wa[mm, k].imag ** 2
                if pw > p_max:
                    Wa *= np.sqrt(p_max / pw)
                for nn in range(N):
                    m = abs(ta[nn])
                    if m > 1.0:
                        ta[nn] /= m
                Ea = np.empty((K, M), dtype=np.complex128)
                for k in range(K):
                    Ea[k] = ta @ D[k]
                Sa = Ea @ Ea.conj().T
                Wp = precode_block(Ea, Sa, ahat, noise, p_max, Wa, itol, max_inner, kappa_tol)
                if do_reflect:
                    tp, Ep = reflect_block(D, Wp, ta, ahat, noise, itol, max_inner, sweep_tol)
                else:
                    tp = ta
                    Ep = Ea
                etap, _, _ = sinr_parts(Ep, Wp, noise)
                cp = surrogate_value(etap, alpha, b)
                if cp > bestC:
                    bestW, bestT, bestE, bestC = Wp, tp, Ep, cp
            W, theta, E, ca = bestW, bestT, bestE, bestC
        else:
            W, theta, E = W1, t1, E1
            etax, _, _ = sinr_parts(E, W, noise)
            ca = surrogate_value(etax, alpha, b)
        S = E @ E.conj().T
        pw = 0.0
        for mm in range(M):
            for k in range(K):
                pw += W[mm, k].real ** 2 + W[mm, k].imag ** 2
        if pw / p_max > max_pow:
            max_pow = pw / p_max
        for nn in range(N):
            m = abs(theta[nn])
            if m > max_mod:
                max_mod = m
        hist[nh] = ca
        nh += 1
        ref = abs(hist[nh - 2])
        if ref < 1e-300:
            ref = 1e-300
        if abs(ca - hist[nh - 2]) <= otol * ref:
            converged = True
            break
    return W, theta, hist[:nh], tight[:nt], converged, max_pow, max_mod
