"""Per-slot joint optimization of base-station precoding and reflection coefficients.

Maximizes the downlink sum-rate under a transmit power budget and per-element
reflection modulus bounds by alternating fractional programming: a
rate-ratio auxiliary turns the sum of logs into a sum of ratios, and a
quadratic-transform auxiliary makes each block (precoder, reflection) an
exactly solvable concave problem.  The recorded surrogate sequence is
non-decreasing, and the returned solution always satisfies both constraint
families.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _core
from .channel import EffectiveCsi


@dataclass(frozen=True)
class OptimizerConfig:
    """Budget and stopping rules for :func:`optimize`.

    ``multi_start`` adds one aligned single-user start per user next to the
    equal-power matched-filter start; ``accelerate`` enables the safeguarded
    extrapolation step (never accepted unless it improves the surrogate).
    """

    p_max: float
    outer_tolerance: float = 1e-6
    max_outer_iterations: int = 200
    inner_tolerance: float = 1e-8
    max_inner_iterations: int = 500
    kappa_bisection_tolerance: float = 1e-10
    multi_start: bool = True
    accelerate: bool = True

    def __post_init__(self):
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")
        for name in ("outer_tolerance", "inner_tolerance", "kappa_bisection_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("max_outer_iterations", "max_inner_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass
class BeamformingSolution:
    """Converged (or best-so-far) precoder, reflection vector and diagnostics."""

    precoding: np.ndarray
    reflection: np.ndarray
    sum_rate: float
    per_ue_sinr: np.ndarray
    iterations: int
    converged: bool
    surrogate_history: np.ndarray
    tightness_residuals: np.ndarray
    max_power_ratio: float
    max_reflection_modulus: float


@dataclass
class AuxiliaryState:
    """Auxiliary variables of one alternation pass (kept for introspection)."""

    alpha: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    kappa: float = 0.0


def _check_csi(csi: EffectiveCsi):
    if csi.noise_power <= 0:
        raise ValueError("noise power must be positive")


def _products(precoding, reflection, csi):
    # T[k, i] = reflection @ D_k @ w_i
    return np.einsum("n,knm,mi->ki", reflection, csi.D, precoding)


def sinr(precoding, reflection, csi: EffectiveCsi, k: int) -> float:
    """SINR of user k: |t D_k w_k|^2 / (sum_{i!=k} |t D_k w_i|^2 + noise)."""
    _check_csi(csi)
    T = _products(precoding, reflection, csi)
    p = np.abs(T[k]) ** 2
    return float(p[k] / (p.sum() - p[k] + csi.noise_power))


def sinr_all(precoding, reflection, csi: EffectiveCsi) -> np.ndarray:
    _check_csi(csi)
    T = _products(precoding, reflection, csi)
    P = np.abs(T) ** 2
    sig = np.einsum("kk->k", P)
    return sig / (P.sum(axis=1) - sig + csi.noise_power)


def received_powers(precoding, reflection, csi: EffectiveCsi) -> np.ndarray:
    """Total received signal-plus-noise power per user under (W, reflection)."""
    T = _products(precoding, reflection, csi)
    return (np.abs(T) ** 2).sum(axis=1) + csi.noise_power


def sum_rate(precoding, reflection, csi: EffectiveCsi) -> float:
    """Downlink sum-rate in bits/s at the given operating point."""
    eta = sinr_all(precoding, reflection, csi)
    return float(csi.bandwidth * np.log2(1.0 + eta).sum())


def surrogate_objective(precoding, reflection, alpha, csi: EffectiveCsi) -> float:
    """Rate surrogate after the dual transform; equals the sum-rate at alpha = SINR."""
    alpha = np.asarray(alpha, dtype=float)
    eta = sinr_all(precoding, reflection, csi)
    terms = np.log2(1.0 + alpha) - alpha + (1.0 + alpha) * eta / (1.0 + eta)
    return float(csi.bandwidth * terms.sum())


def update_alpha(precoding, reflection, csi: EffectiveCsi) -> np.ndarray:
    """Optimal rate-ratio auxiliary: alpha_k equals the current SINR of user k."""
    return sinr_all(precoding, reflection, csi)


def _quadratic_aux(precoding, reflection, alpha, csi):
    ahat = csi.bandwidth * (1.0 + np.asarray(alpha, dtype=float))
    T = _products(precoding, reflection, csi)
    c = np.einsum("kk->k", T)
    d = (np.abs(T) ** 2).sum(axis=1) + csi.noise_power
    return np.sqrt(ahat) * c / d


def update_lambda(precoding, reflection, alpha, csi: EffectiveCsi) -> np.ndarray:
    """Optimal precoder-side quadratic-transform auxiliary."""
    return _quadratic_aux(precoding, reflection, alpha, csi)


def update_delta(precoding, reflection, alpha, csi: EffectiveCsi) -> np.ndarray:
    """Optimal reflection-side quadratic-transform auxiliary (same map as lambda)."""
    return _quadratic_aux(precoding, reflection, alpha, csi)


def transform_objective(precoding, reflection, alpha, aux, csi: EffectiveCsi) -> float:
    """Quadratic-transform objective value at auxiliary ``aux``.

    Maximizing this over ``aux`` recovers the weighted sum of rate ratios, so
    the update_lambda/update_delta outputs must dominate perturbations of it.
    """
    ahat = csi.bandwidth * (1.0 + np.asarray(alpha, dtype=float))
    T = _products(precoding, reflection, csi)
    c = np.einsum("kk->k", T)
    d = (np.abs(T) ** 2).sum(axis=1) + csi.noise_power
    aux = np.asarray(aux, dtype=complex)
    val = 2.0 * np.sqrt(ahat) * (np.conj(aux) * c).real - np.abs(aux) ** 2 * d
    return float(val.sum())


def update_precoding(reflection, alpha, lam, csi: EffectiveCsi, p_max: float,
                     bisection_tolerance: float = 1e-10) -> np.ndarray:
    """Budget-constrained maximizer of the precoder-side transform objective.

    Solves (kappa I + sum_i |lam_i|^2 g_i g_i^H) w_k = sqrt(ahat_k) lam_k g_k
    with g_k the conjugated effective row; kappa = 0 when the unconstrained
    solution already fits the budget, otherwise the unique kappa > 0 making
    the budget tight (found by safeguarded bisection).
    """
    if p_max <= 0:
        raise ValueError("p_max must be positive")
    lam = np.asarray(lam, dtype=complex)
    ahat = csi.bandwidth * (1.0 + np.asarray(alpha, dtype=float))
    E = np.tensordot(np.asarray(reflection, dtype=complex), csi.D, axes=(0, 1))
    K, M = E.shape
    g = E.conj()  # row k = g_k^T
    lam2 = np.abs(lam) ** 2
    B = g.T @ (lam2[:, None] * g.conj())
    evals, Q = np.linalg.eigh(B)
    evals = np.maximum(evals, 0.0)
    emax = evals[-1]
    live = evals > emax * 1e-12 if emax > 0 else np.zeros_like(evals, dtype=bool)
    Gt = Q.conj().T @ g.T  # (M, K); column k = Q^H g_k
    c = (ahat * lam2)[None, :] * (np.abs(Gt) ** 2)
    c[~live, :] = 0.0
    cm = c.sum(axis=1)[live]
    ev = evals[live]

    def budget(kappa):
        if cm.size == 0:
            return 0.0
        return float((cm / (ev + kappa) ** 2).sum())

    kappa = 0.0
    if budget(0.0) > p_max:
        hi, guard = 1.0, 0
        while budget(hi) > p_max:
            hi *= 4.0
            guard += 1
            if guard > 600:
                raise ValueError("power constraint infeasible bracketing")
        lo = 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if budget(mid) > p_max:
                lo = mid
            else:
                hi = mid
                if p_max - budget(hi) <= bisection_tolerance * p_max:
                    break
        kappa = hi
    inv = np.zeros_like(evals)
    if kappa > 0.0:
        inv = 1.0 / (evals + kappa)
    else:
        inv[live] = 1.0 / evals[live]
    return Q @ (inv[:, None] * Gt) * (np.sqrt(ahat) * lam)[None, :]


def build_qcqp(precoding, delta, csi: EffectiveCsi, alpha):
    """Assemble the reflection subproblem max -t U t^H + 2 Re(t v) - C.

    U = sum_k |delta_k|^2 sum_i (D_k w_i)(D_k w_i)^H  (Hermitian PSD),
    v = sum_k sqrt(ahat_k) conj(delta_k) D_k w_k,
    C = sum_k |delta_k|^2 noise.
    The i = k term stays inside U and v carries the sqrt(ahat) weights so the
    quadratic form is the exact expansion of the transform objective; dropping
    either breaks the monotone ascent of the alternation.
    """
    delta = np.asarray(delta, dtype=complex)
    ahat = csi.bandwidth * (1.0 + np.asarray(alpha, dtype=float))
    DW = np.matmul(csi.D, np.asarray(precoding, dtype=complex))  # (K, N, K)
    d2 = np.abs(delta) ** 2
    U = np.einsum("k,kni,kli->nl", d2, DW, DW.conj())
    v = np.einsum("k,knk->n", np.sqrt(ahat) * np.conj(delta), DW)
    C = float(d2.sum() * csi.noise_power)
    return U, v, C


def update_reflection(U, v, reflection, tolerance: float = 1e-9,
                      max_sweeps: int = 1000) -> np.ndarray:
    """Maximize -t U t^H + 2 Re(t v) over per-entry modulus <= 1 from a warm start.

    Exact cyclic coordinate maximization: concave objective, separable
    constraints, so the sweep never decreases the objective and stalls only at
    the constrained optimum.
    """
    U = np.ascontiguousarray(U, dtype=complex)
    v = np.ascontiguousarray(v, dtype=complex)
    t = np.asarray(reflection, dtype=complex).conj().copy()
    t = _core.reflection_sweeps(U, v, t, tolerance, max_sweeps)
    return t.conj()


def default_starts(csi: EffectiveCsi, p_max: float):
    """Deterministic starting points.

    Equal-power matched filter first, then an equal-power regularized
    zero-forcing start, then one aligned nearly-single-user start per user
    (loser columns keep a small power floor so the alternation can reopen
    them).  Together these cover the interference-limited sharing basins and
    the winner-take-all basins of degenerate channels.
    """
    D = csi.D
    K, N, M = D.shape
    theta0 = np.ones(N, dtype=complex)
    E0 = np.tensordot(theta0, D, axes=(0, 1))
    W0 = np.zeros((M, K), dtype=complex)
    for k in range(K):
        gk = E0[k].conj()
        nrm = np.linalg.norm(gk)
        if nrm > 0:
            W0[:, k] = np.sqrt(p_max / K) * gk / nrm
    starts = [(W0, theta0)]
    gram = E0 @ E0.conj().T
    trace = float(np.trace(gram).real)
    if trace > 0:
        Xzf = np.linalg.solve(gram + (1e-12 * trace / K) * np.eye(K), E0).conj().T
        Wzf = np.zeros((M, K), dtype=complex)
        for k in range(K):
            nrm = np.linalg.norm(Xzf[:, k])
            if nrm > 0:
                Wzf[:, k] = np.sqrt(p_max / K) * Xzf[:, k] / nrm
        starts.append((Wzf, theta0))
    eps = 1e-3
    for k in range(K):
        gk = E0[k].conj()
        nrm = np.linalg.norm(gk)
        if nrm == 0:
            continue
        w = gk / nrm
        th = theta0
        for _ in range(4):
            dkw = D[k] @ w
            mods = np.abs(dkw)
            th = np.where(mods > 0, dkw.conj() / np.maximum(mods, 1e-300), 0.0)
            ek = (th @ D[k]).conj()
            nrm = np.linalg.norm(ek)
            if nrm == 0:
                break
            w = ek / nrm
        Wk = np.zeros((M, K), dtype=complex)
        Wk[:, k] = np.sqrt(p_max * (1.0 - eps)) * w
        for i in range(K):
            if i == k:
                continue
            gi = E0[i].conj()
            nrm = np.linalg.norm(gi)
            if nrm > 0:
                Wk[:, i] = np.sqrt(p_max * eps / max(K - 1, 1)) * gi / nrm
        starts.append((Wk, th))
    return starts


def optimize(csi: EffectiveCsi, config: OptimizerConfig, precoding=None, reflection=None,
             optimize_reflection: bool = True) -> BeamformingSolution:
    """Alternating sum-rate maximization over (precoding, reflection).

    When explicit starting points are passed they must be feasible and are
    used as the single start; otherwise the deterministic default starts are
    run and the best final surrogate wins.  The returned sum-rate and SINRs
    are recomputed from the rate formula at the final iterate.
    """
    _check_csi(csi)
    D = np.ascontiguousarray(csi.D, dtype=complex)
    K, N, M = D.shape
    explicit = precoding is not None or reflection is not None
    if explicit:
        W0 = np.zeros((M, K), dtype=complex) if precoding is None else \
            np.ascontiguousarray(precoding, dtype=complex)
        th0 = np.ones(N, dtype=complex) if reflection is None else \
            np.ascontiguousarray(reflection, dtype=complex)
        if (np.abs(W0) ** 2).sum() > config.p_max * (1.0 + 1e-9):
            raise ValueError("initial precoding violates the power budget")
        if W0.shape != (M, K):
            raise ValueError("initial precoding has the wrong shape")
        if np.abs(th0).max() > 1.0 + 1e-9:
            raise ValueError("initial reflection violates the modulus bound")
        starts = [(W0, th0)]
    else:
        starts = default_starts(csi, config.p_max)
        if not config.multi_start:
            starts = starts[:1]
    best = None
    for W0, th0 in starts:
        out = _core.run_core(
            D, float(csi.noise_power), float(csi.bandwidth), float(config.p_max),
            np.ascontiguousarray(W0), np.ascontiguousarray(th0),
            config.max_outer_iterations, config.outer_tolerance,
            config.max_inner_iterations, config.inner_tolerance,
            config.kappa_bisection_tolerance, optimize_reflection, config.accelerate)
        if best is None or out[2][-1] > best[2][-1]:
            best = out
    W, theta, hist, tight, converged, max_pow, max_mod = best
    eta = sinr_all(W, theta, csi)
    return BeamformingSolution(
        precoding=W,
        reflection=theta,
        sum_rate=sum_rate(W, theta, csi),
        per_ue_sinr=eta,
        iterations=len(hist) - 1,
        converged=bool(converged),
        surrogate_history=np.asarray(hist),
        tightness_residuals=np.asarray(tight),
        max_power_ratio=float(max_pow),
        max_reflection_modulus=float(max_mod),
    )
