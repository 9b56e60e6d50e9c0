"""Structured solver for stage-banded convex QPs with box constraints.

Problem over stage variables z_0..z_N (sizes may differ per stage, the
caller passes a reduced first stage when initial components are pinned)
and w_0..w_{N-1}:

    minimize   sum_{i<N} [ 1/2 z_i'Q_i z_i + q_i'z_i + 1/2 w_i'R_i w_i
                           + r_i'w_i + z_i'S_i w_i ]
               + 1/2 z_N'Q_N z_N + q_N'z_N
    subject to z_{i+1} = A_i z_i + B_i w_i + c_i
               z_lo <= z_i <= z_hi,  w_lo <= w_i <= w_hi   (entries +-inf ok)
               e'z_N = d                                    (optional scalar)

Method: primal-dual interior point with a Mehrotra predictor-corrector.
Every Newton system is an equality-constrained QP with barrier-modified
Hessians/gradients and is solved by one Riccati backward sweep (a single
factorization serves several right-hand sides), so the per-iteration cost
is linear in N.  The scalar terminal equality enters through its multiplier
nu, which only shifts the stage-N gradient: the solution for any nu is an
affine combination of two backsolves, and nu is chosen so the equality
holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FTB = 0.995          # fraction-to-boundary factor
_JITTERS = (0.0, 1e-12, 1e-9, 1e-6)


class QPError(RuntimeError):
    pass


@dataclass
class StageQP:
    Q: np.ndarray          # (nz, nz)
    q: np.ndarray          # (nz,)
    R: np.ndarray          # (nw, nw)
    r: np.ndarray          # (nw,)
    S: np.ndarray          # (nz, nw)
    A: np.ndarray          # (nz_next, nz)
    B: np.ndarray          # (nz_next, nw)
    c: np.ndarray          # (nz_next,)
    z_lo: np.ndarray
    z_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray


@dataclass
class TerminalQP:
    Q: np.ndarray
    q: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    eq_vec: np.ndarray | None = None   # e; constraint e'z_N = eq_rhs
    eq_rhs: float = 0.0


@dataclass
class QPSolution:
    z: list[np.ndarray]
    w: list[np.ndarray]
    status: str                 # converged | max_iterations
    iterations: int
    mu: float                   # final mean complementarity
    dyn_residual: float
    eq_residual: float
    nu: float
    lam: list[np.ndarray]       # dynamics multipliers, lam[i] for the z_{i+1} row
    objective: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def qp_objective(stages, terminal, z, w) -> float:
    total = 0.0
    for i, s in enumerate(stages):
        total += 0.5 * z[i] @ s.Q @ z[i] + s.q @ z[i]
        total += 0.5 * w[i] @ s.R @ w[i] + s.r @ w[i] + z[i] @ s.S @ w[i]
    total += 0.5 * z[-1] @ terminal.Q @ z[-1] + terminal.q @ z[-1]
    return float(total)


def _chol(M):
    for jit in _JITTERS:
        try:
            return np.linalg.cholesky(M + jit * np.eye(M.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise QPError("stage Hessian not positive definite")


def _chol_solve(L, b):
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


class _Factorization:
    """Backward Riccati data for one barrier-modified Newton system."""

    def __init__(self, stages, terminal, sig_z, sig_w):
        N = len(stages)
        self.stages = stages
        self.P = [None] * (N + 1)
        self.Winv = [None] * N       # H_ww^{-1}, reused across backsolves
        self.M = [None] * N          # H_zw H_ww^{-1}
        P = terminal.Q + np.diag(sig_z[N])
        self.P[N] = 0.5 * (P + P.T)
        for i in reversed(range(N)):
            s = stages[i]
            Pn = self.P[i + 1]
            PB = Pn @ s.B
            Hww = s.R + np.diag(sig_w[i]) + s.B.T @ PB
            Hzw = s.S + s.A.T @ PB
            Winv = _chol_solve(_chol(Hww), np.eye(Hww.shape[0]))
            M = Hzw @ Winv
            P = s.Q + np.diag(sig_z[i]) + s.A.T @ (Pn @ s.A) - M @ Hzw.T
            self.P[i] = 0.5 * (P + P.T)
            self.Winv[i] = Winv
            self.M[i] = M
        self.L0 = _chol(self.P[0])

    def solve(self, qbar, rbar, cbar, collect_lam=False):
        """One backsolve + forward rollout for the given linear terms."""
        N = len(self.stages)
        p = [None] * (N + 1)
        k = [None] * N
        p[N] = qbar[N]
        for i in reversed(range(N)):
            s = self.stages[i]
            pc = self.P[i + 1] @ cbar[i] + p[i + 1]
            hw = rbar[i] + s.B.T @ pc
            k[i] = -(self.Winv[i] @ hw)
            p[i] = qbar[i] + s.A.T @ pc - self.M[i] @ hw
        z = [None] * (N + 1)
        w = [None] * N
        lam = [None] * N if collect_lam else None
        z[0] = -_chol_solve(self.L0, p[0])
        for i in range(N):
            s = self.stages[i]
            w[i] = -self.M[i].T @ z[i] + k[i]
            z[i + 1] = s.A @ z[i] + s.B @ w[i] + cbar[i]
            if collect_lam:
                lam[i] = self.P[i + 1] @ z[i + 1] + p[i + 1]
        return z, w, lam


def _finite_masks(lo, hi):
    return np.isfinite(lo), np.isfinite(hi)


def _interior(x, lo, hi):
    """Push a start point strictly inside its box."""
    out = np.array(x, float)
    flo, fhi = _finite_masks(lo, hi)
    both = flo & fhi
    pad = np.full_like(out, 1e-2)
    pad[both] = np.minimum(1e-2, 0.25 * (hi[both] - lo[both]))
    out[flo] = np.maximum(out[flo], lo[flo] + pad[flo])
    out[fhi] = np.minimum(out[fhi], hi[fhi] - pad[fhi])
    # a very thin box can make the two pushes fight; settle on the middle
    bad = both & (out < lo) | both & (out > hi)
    if np.any(bad):
        out[bad] = 0.5 * (lo[bad] + hi[bad])
    return out


def solve_ocp_qp(stages, terminal, *, z_init=None, w_init=None, mu0=1.0,
                 tol_comp=1e-11, tol_eq=1e-9, max_iter=60) -> QPSolution:
    """Solve the stage-banded QP; see module docstring for the problem form.

    The interior-point bookkeeping (slacks, multipliers, steps) lives in
    flat vectors concatenated over stages: per-stage arrays are tiny, so
    list-of-arrays arithmetic costs more in call overhead than the actual
    floating point.  Only the Riccati sweep walks stages one by one.
    """
    N = len(stages)
    if N < 1:
        raise QPError("need at least one stage")

    z_lo = [s.z_lo for s in stages] + [terminal.z_lo]
    z_hi = [s.z_hi for s in stages] + [terminal.z_hi]
    w_lo = [s.w_lo for s in stages]
    w_hi = [s.w_hi for s in stages]
    q_vec = [s.q for s in stages] + [terminal.q]

    zoff = np.cumsum([0] + [lo.shape[0] for lo in z_lo])
    woff = np.cumsum([0] + [lo.shape[0] for lo in w_lo])
    zsl = [slice(int(a), int(b)) for a, b in zip(zoff[:-1], zoff[1:])]
    wsl = [slice(int(a), int(b)) for a, b in zip(woff[:-1], woff[1:])]

    Z_lo, Z_hi = np.concatenate(z_lo), np.concatenate(z_hi)
    W_lo, W_hi = np.concatenate(w_lo), np.concatenate(w_hi)
    Q_flat = np.concatenate(q_vec)
    R_flat = np.concatenate([s.r for s in stages])

    # bound bookkeeping is stored compressed: one entry per finite bound
    iz_lo, iz_hi = np.flatnonzero(np.isfinite(Z_lo)), np.flatnonzero(np.isfinite(Z_hi))
    iw_lo, iw_hi = np.flatnonzero(np.isfinite(W_lo)), np.flatnonzero(np.isfinite(W_hi))
    zlo_b, zhi_b = Z_lo[iz_lo], Z_hi[iz_hi]
    wlo_b, whi_b = W_lo[iw_lo], W_hi[iw_hi]
    n_bounds = len(iz_lo) + len(iz_hi) + len(iw_lo) + len(iw_hi)

    z0 = [np.zeros(lo.shape) if z_init is None else np.array(z_init[i], float)
          for i, lo in enumerate(z_lo)]
    w0 = [np.zeros(lo.shape) if w_init is None else np.array(w_init[i], float)
          for i, lo in enumerate(w_lo)]
    Z = np.concatenate([_interior(zi, lo, hi)
                        for zi, lo, hi in zip(z0, z_lo, z_hi)])
    W = np.concatenate([_interior(wi, lo, hi)
                        for wi, lo, hi in zip(w0, w_lo, w_hi)])

    # uniform multiplier start: mu0/s would blow up the barrier curvature
    # on narrow boxes and stall the first factorizations
    ml_z = np.full(len(iz_lo), mu0)
    mh_z = np.full(len(iz_hi), mu0)
    ml_w = np.full(len(iw_lo), mu0)
    mh_w = np.full(len(iw_hi), mu0)

    e = terminal.eq_vec
    nu = 0.0
    status = "max_iterations"
    it = 0

    def _slacks():
        # recomputed by subtraction, which can cancel to 0 (or round below)
        # for a tightly active bound; the floor keeps 1/s finite
        return (np.maximum(Z[iz_lo] - zlo_b, 1e-13),
                np.maximum(zhi_b - Z[iz_hi], 1e-13),
                np.maximum(W[iw_lo] - wlo_b, 1e-13),
                np.maximum(whi_b - W[iw_hi], 1e-13))

    def _mean_comp(sl_z, sh_z, sl_w, sh_w):
        if n_bounds == 0:
            return 0.0
        return float(ml_z @ sl_z + mh_z @ sh_z
                     + ml_w @ sl_w + mh_w @ sh_w) / n_bounds

    def _residuals():
        dyn = 0.0
        for i, s in enumerate(stages):
            step = s.A @ Z[zsl[i]] + s.B @ W[wsl[i]] + s.c - Z[zsl[i + 1]]
            dyn = max(dyn, float(np.max(np.abs(step))))
        eq = abs(float(e @ Z[zsl[N]]) - terminal.eq_rhs) if e is not None else 0.0
        return dyn, eq

    lam = [np.zeros(s.c.shape) for s in stages]
    cbar = [s.c for s in stages]
    zeros_rbar = [np.zeros_like(s.r) for s in stages]
    zeros_cbar = [np.zeros_like(s.c) for s in stages]
    zeros_t = (np.zeros(len(iz_lo)), np.zeros(len(iz_hi)),
               np.zeros(len(iw_lo)), np.zeros(len(iw_hi)))

    for it in range(1, max_iter + 1):
        sl_z, sh_z, sl_w, sh_w = _slacks()
        mu_bar = _mean_comp(sl_z, sh_z, sl_w, sh_w)
        dyn_res, eq_res = _residuals()
        if mu_bar < tol_comp and dyn_res < tol_eq and eq_res < tol_eq:
            status = "converged"
            break

        SIG_z = np.zeros(Z.shape)
        SIG_z[iz_lo] += ml_z / sl_z
        SIG_z[iz_hi] += mh_z / sh_z
        SIG_w = np.zeros(W.shape)
        SIG_w[iw_lo] += ml_w / sl_w
        SIG_w[iw_hi] += mh_w / sh_w
        fact = _Factorization(stages, terminal,
                              [SIG_z[s] for s in zsl], [SIG_w[s] for s in wsl])

        # response of z_N to a unit gradient along e (for the nu combination)
        if e is not None:
            zeros_q = [np.zeros_like(qi) for qi in q_vec]
            zeros_q[N] = e
            z1, w1, lam1 = fact.solve(zeros_q, zeros_rbar, zeros_cbar,
                                      collect_lam=True)
            denom = float(e @ z1[N])
            if abs(denom) < 1e-14:
                raise QPError("terminal equality not controllable")
            Z1, W1 = np.concatenate(z1), np.concatenate(w1)

        def _newton(t_zlo, t_zhi, t_wlo, t_whi, collect_lam=False):
            """Solve for the new full iterate given complementarity targets."""
            G_z = Q_flat - SIG_z * Z
            G_z[iz_lo] -= t_zlo / sl_z
            G_z[iz_hi] += t_zhi / sh_z
            G_w = R_flat - SIG_w * W
            G_w[iw_lo] -= t_wlo / sl_w
            G_w[iw_hi] += t_whi / sh_w
            zc, wc, lamc = fact.solve([G_z[s] for s in zsl],
                                      [G_w[s] for s in wsl], cbar,
                                      collect_lam=collect_lam)
            nu_new = 0.0
            Zc, Wc = np.concatenate(zc), np.concatenate(wc)
            if e is not None:
                nu_new = (terminal.eq_rhs - float(e @ zc[N])) / denom
                Zc += nu_new * Z1
                Wc += nu_new * W1
                if collect_lam:
                    lamc = [a + nu_new * b for a, b in zip(lamc, lam1)]
            return Zc, Wc, nu_new, lamc

        def _dmu(Zn, Wn, targets):
            t_zlo, t_zhi, t_wlo, t_whi = targets
            dZ, dW = Zn - Z, Wn - W
            return ((t_zlo - ml_z * (sl_z + dZ[iz_lo])) / sl_z,
                    (t_zhi - mh_z * (sh_z - dZ[iz_hi])) / sh_z,
                    (t_wlo - ml_w * (sl_w + dW[iw_lo])) / sl_w,
                    (t_whi - mh_w * (sh_w - dW[iw_hi])) / sh_w)

        def _max_step(Zn, Wn, dmu, tau):
            alpha = 1.0
            dZ, dW = Zn - Z, Wn - W
            # slack changes: +dx against a lower bound, -dx against an upper
            for s, d in ((sl_z, dZ[iz_lo]), (sh_z, -dZ[iz_hi]),
                         (sl_w, dW[iw_lo]), (sh_w, -dW[iw_hi])):
                neg = d < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-tau * s[neg] / d[neg])))
            for m, d in zip((ml_z, mh_z, ml_w, mh_w), dmu):
                neg = d < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-tau * m[neg] / d[neg])))
            return alpha

        # affine predictor (targets = 0) fixes the centering parameter
        Z_aff, W_aff, _, _ = _newton(*zeros_t)
        dmu_aff = _dmu(Z_aff, W_aff, zeros_t)
        sigma = 0.0
        if n_bounds > 0 and mu_bar > 0:
            a = _max_step(Z_aff, W_aff, dmu_aff, tau=1.0)
            dZ, dW = Z_aff - Z, W_aff - W
            comp_aff = ((ml_z + a * dmu_aff[0]) @ (sl_z + a * dZ[iz_lo])
                        + (mh_z + a * dmu_aff[1]) @ (sh_z - a * dZ[iz_hi])
                        + (ml_w + a * dmu_aff[2]) @ (sl_w + a * dW[iw_lo])
                        + (mh_w + a * dmu_aff[3]) @ (sh_w - a * dW[iw_hi]))
            mu_aff = float(comp_aff) / n_bounds
            sigma = float(np.clip((mu_aff / mu_bar) ** 3, 1e-6, 0.9))

        # corrector with Mehrotra second-order complementarity targets
        dZ, dW = Z_aff - Z, W_aff - W
        targets = (sigma * mu_bar - dZ[iz_lo] * dmu_aff[0],
                   sigma * mu_bar + dZ[iz_hi] * dmu_aff[1],
                   sigma * mu_bar - dW[iw_lo] * dmu_aff[2],
                   sigma * mu_bar + dW[iw_hi] * dmu_aff[3])

        Z_new, W_new, nu_new, lam_new = _newton(*targets, collect_lam=True)
        dmu = _dmu(Z_new, W_new, targets)
        tau = max(_FTB, 1.0 - 0.1 * mu_bar)
        alpha = _max_step(Z_new, W_new, dmu, tau=tau)

        Z += alpha * (Z_new - Z)
        W += alpha * (W_new - W)
        ml_z += alpha * dmu[0]
        mh_z += alpha * dmu[1]
        ml_w += alpha * dmu[2]
        mh_w += alpha * dmu[3]
        nu = nu + alpha * (nu_new - nu)
        lam = [l + alpha * (ln - l) for l, ln in zip(lam, lam_new)]

    dyn_res, eq_res = _residuals()
    z = [Z[s] for s in zsl]
    w = [W[s] for s in wsl]
    return QPSolution(z=z, w=w, status=status, iterations=it,
                      mu=_mean_comp(*_slacks()),
                      dyn_residual=dyn_res, eq_residual=eq_res, nu=nu, lam=lam,
                      objective=qp_objective(stages, terminal, z, w))
