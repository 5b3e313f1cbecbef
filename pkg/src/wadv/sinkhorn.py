"""Projection onto a transport ball by blockwise dual ascent.

Given a reference distribution x and a point w (a gradient-perturbed
distribution, possibly with negative entries), find the distribution z
minimizing ||w - z||^2 subject to: z is reachable from x by a transport plan
of cost at most epsilon, and every z_j stays at or below the per-pixel mass
cap r. The solve works on the entropy-smoothed dual, which has one scaling
vector per marginal (alpha, beta), a scalar budget multiplier (psi, Newton
updates) and a vector of cap multipliers (phi, closed form). All mass
accumulations run in the log domain; the only special function needed is
the Wright omega branch of Lambert's W, evaluated from log-scale arguments
so nothing overflows.

Every block update is an exact coordinate maximization of the dual except
the psi Newton step, which backtracks if it would descend; the dual
objective is therefore non-decreasing across updates, which tests rely on.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, NumericalOverflow
from .imagecore import (
    _MASS_FLOOR,
    _logsumexp,
    build_cost_matrix,
    normalize,
    unnormalize,
)

DEFAULT_LAM_ATTACK = 3000.0
DEFAULT_LAM_TRAINING = 1000.0


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def lambert_w(v):
    """Principal-branch Lambert W for v >= 0, in extended precision.

    Returns y >= 0 with y * exp(y) = v. Computed with Halley iterations on
    np.longdouble (80-bit on x86-64); float64 cannot hold the result tightly
    enough for back-substitution at large v, where one ulp of y already
    moves y*exp(y) by ~1e-9.
    """
    arr = np.asarray(v)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError("lambert_w is defined here for finite v >= 0 only")
    x = arr.astype(np.longdouble)
    y = np.empty_like(x)
    small = x < np.e
    # Seeds: a lower bound v/(1+v) for small v, the asymptotic
    # log v - log log v for large v. Halley cleans both up cubically.
    y[small] = x[small] / (1.0 + x[small])
    if np.any(~small):
        lv = np.log(x[~small])
        y[~small] = lv - np.log(lv)
    one = np.longdouble(1.0)
    for _ in range(60):
        e = np.exp(y)
        f = y * e - x
        denom = e * (y + one) - (y + 2.0) * f / (2.0 * y + 2.0)
        denom = np.where(denom == 0.0, one, denom)
        step = f / denom
        y = np.maximum(y - step, 0.0)
        if np.all(np.abs(step) <= 1e-19 * (one + np.abs(y))):
            break
    if arr.ndim == 0:
        return y[()]
    return y


def wright_omega(t):
    """Solve y + log(y) = t for y > 0 (equals lambert_w(exp(t))).

    Accepts any real t, including magnitudes far beyond exp overflow; this
    is the form the dual update needs, since its Lambert argument lives in
    log scale. float64, vectorized, Newton with a positivity clamp.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.empty_like(t)
    lo = t <= -36.0  # y = e^t to full float64 precision there
    hi = t >= 2.0
    mid = ~lo & ~hi
    y[lo] = np.exp(t[lo])
    if np.any(hi):
        th = t[hi]
        y[hi] = th - np.log(th)
    if np.any(mid):
        y[mid] = np.exp(np.minimum(t[mid], 1.0))
    active = ~lo
    if np.any(active):
        ya = y[active]
        ta = t[active]
        for _ in range(40):
            f = ya + np.log(ya) - ta
            ya = np.maximum(ya - f * ya / (ya + 1.0), 1e-300)
            if np.max(np.abs(f)) <= 1e-13:
                break
        y[active] = ya
    if t.ndim == 0:
        return float(y[()])
    return y


# ---------------------------------------------------------------------------
# problem statement and dual state
# ---------------------------------------------------------------------------

@dataclass
class ProjectionProblem:
    """One projection instance over a fixed pixel grid.

    w       : target distribution to project (may have negative entries)
    x       : reference distribution (sums to 1, entries in [0, r])
    cost    : CostMatrix over the grid
    epsilon : transport budget in normalized mass x distance units
    lam     : smoothing strength (bigger = closer to the exact projection)
    r       : per-pixel mass cap, 1 / (raw channel mass of the reference)
    """

    w: np.ndarray
    x: np.ndarray
    cost: object
    epsilon: float
    lam: float
    r: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        n = self.cost.n_pixel
        if self.w.shape != (n,) or self.x.shape != (n,):
            raise DimensionMismatch(
                f"w {self.w.shape} / x {self.x.shape} do not match the "
                f"{n}-pixel cost grid"
            )
        if not np.all(np.isfinite(self.w)):
            raise ValueError("w must be finite")
        if abs(self.x.sum() - 1.0) > 1e-9:
            raise ValueError(f"x sums to {self.x.sum():.12g}, expected 1")
        if self.x.min() < 0 or self.x.max() > self.r + 1e-12:
            raise ValueError("x entries must lie in [0, r]")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")


@dataclass
class DualState:
    """Dual variables of one projection: scaling vectors alpha/beta, budget
    multiplier psi (scalar, >= 0), mass-cap multipliers phi (>= 0)."""

    alpha: np.ndarray
    beta: np.ndarray
    psi: float
    phi: np.ndarray


@dataclass
class ProjectionReport:
    """Termination diagnostics of one projection run.

    w_over    : plan cost minus epsilon at the final duals
    delta_l1  : |1 - sum(z)|, mass drift of the recovered point
    range_ok  : 0 <= z <= r * (1 + 1e-6) held at exit
    iterations: sweeps executed
    converged : duals settled and drift thresholds met at exit
    """

    w_over: float
    delta_l1: float
    range_ok: bool
    iterations: int
    converged: bool


@dataclass
class ProjectionLimits:
    """Loop budgets and exit thresholds.

    The run exits successfully once the max dual change in a sweep drops
    below dual_change_tol AND w_over <= w_over_abs + w_over_rel * epsilon
    AND delta_l1 <= delta_l1_tol; it aborts at max_sweeps or when the duals
    are frozen (change < stuck_tol) without meeting the thresholds.
    """

    max_sweeps: int = 400
    dual_change_tol: float = 1e-4
    w_over_rel: float = 0.01
    w_over_abs: float = 0.0
    delta_l1_tol: float = 0.01
    psi_cap: float = 1e6
    stuck_tol: float = 1e-10


ATTACK_LIMITS = ProjectionLimits()
TRAINING_LIMITS = ProjectionLimits(
    max_sweeps=50, w_over_rel=0.0, w_over_abs=0.1, delta_l1_tol=0.1
)


def cold_duals(n):
    """Fresh dual state: flat scalings, unit multipliers."""
    flat = np.full(n, -np.log(n))
    return DualState(flat.copy(), flat.copy(), 1.0, np.ones(n))


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------

def _batch_cold(b, n):
    flat = np.full((b, n), -np.log(n))
    return flat.copy(), flat.copy(), np.ones(b), np.ones((b, n))


def _plan_sums(alpha, beta, psi, cost, mask, want_cost=True):
    """Plan mass, plan cost, and cost^2-weighted mass per batch element.

    Works column-wise off a single exponential of the window tensor: the
    cost-weighted window sums are partial reductions of the same entries,
    so the per-pair exp is evaluated once.
    """
    idx = cost.idx
    cvec = cost.cost
    t = (
        alpha[:, idx]
        - psi[:, None, None] * cvec[None, :, :]
        - 1.0
        + mask[None, :, :]
    )
    m = t.max(axis=2)
    e = np.exp(t - m[:, :, None])
    s0 = e.sum(axis=2)
    colw = np.exp(beta + m)
    t0 = (colw * s0).sum(axis=1)
    if not want_cost:
        return t0, None, None
    s1 = np.einsum("knm,nm->kn", e, cvec)
    s2 = np.einsum("knm,nm->kn", e, cvec * cvec)
    t1 = (colw * s1).sum(axis=1)
    t2 = (colw * s2).sum(axis=1)
    return t0, t1, t2


def _block_solve(a_now, wv, rv, epsv, lamv, cost, mask, ps_seed, psi_cap):
    """Exact joint maximization of the dual over (beta, phi, psi) at fixed
    alpha, per batch element.

    Given psi, the maximizing (beta, phi) pair is closed form, so the block
    reduces to a one-dimensional concave problem in psi, solved by a
    safeguarded secant/bisection on its derivative (budget shortfall of the
    responding plan). The single Newton step of the plain iteration is this
    solve's first secant approximation; run to convergence it traverses in
    one sweep the long (beta, psi) valley that appears whenever the budget
    constraint binds with an O(1) shadow price. The best evaluated point is
    returned, so the block never decreases the dual.
    """
    idx = cost.idx
    cvec = cost.cost
    k, n = a_now.shape
    # The exit test recomputes the plan cost exactly and demands overshoot
    # below 1e-2 * eps, so the inner root only needs modest relative
    # accuracy; anything finer buys extra window evaluations for nothing.
    g_tol = np.maximum(1e-12, 1e-4 * epsv)
    # The window tensor dominates the cost of an evaluation. Its alpha part
    # is constant across the psi search, so gather it once. The max-shifted
    # entries live in [-inf, 0] regardless of dual scale, so at image scale
    # the exponential and its reductions run in single precision; the
    # tensor, the max, and everything of shape (k, n) stay double so the
    # duals carry no scale-dependent noise.
    ft = np.float32 if n >= 256 else np.float64
    base = a_now[:, idx] - 1.0 + mask[None, :, :]
    cs = cvec.astype(ft, copy=False)

    def ev(ps, sel):
        t = base[sel] - ps[:, None, None] * cvec[None, :, :]
        mxf = t.max(axis=2)
        e = np.exp((t - mxf[:, :, None]).astype(ft, copy=False))
        s0 = e.sum(axis=2, dtype=np.float64)
        s1 = np.einsum("knm,nm->kn", e, cs).astype(np.float64)
        col = np.log(s0) + mxf
        lamw = lamv[sel][:, None] * wv[sel]
        b_cap = np.log(rv[sel])[:, None] - col
        p_cap = lamw - lamv[sel][:, None] * rv[sel][:, None] - b_cap
        boxed = p_cap >= 0.0
        bb = b_cap.copy()
        fr = ~boxed
        if np.any(fr):
            targ = np.log(lamv[sel])[:, None] + lamw + col
            bb[fr] = lamw[fr] - wright_omega(targ[fr])
        pp = np.where(boxed, p_cap, 0.0)
        colw = np.exp(bb + mxf)
        t0 = (colw * s0).sum(axis=1)
        t1 = (colw * s1).sum(axis=1)
        s = bb + pp
        # alpha terms are constant within the block; omitted from the value
        val = (
            -(s * s).sum(axis=1) / (2.0 * lamv[sel])
            - ps * epsv[sel]
            + (bb * wv[sel]).sum(axis=1)
            + (pp * wv[sel]).sum(axis=1)
            - rv[sel] * pp.sum(axis=1)
            - t0
        )
        return bb, pp, val, t1 - epsv[sel], t0

    trial = np.clip(ps_seed, 0.0, psi_cap)
    best_b, best_p, best_v, grad, best_t0 = ev(trial, np.arange(k))
    best_ps = trial.copy()
    lo = np.zeros(k)
    glo = np.full(k, np.nan)
    hi = np.full(k, np.inf)
    ghi = np.full(k, np.nan)
    step = np.maximum(trial, 1.0)
    pos = grad > 0
    lo[pos] = trial[pos]
    glo[pos] = grad[pos]
    hi[~pos] = trial[~pos]
    ghi[~pos] = grad[~pos]
    live = ~(
        (np.abs(grad) <= g_tol)
        | ~np.isfinite(grad)
        | (pos & (trial >= psi_cap))
        | (~pos & (trial <= 0.0))
    )
    need = np.nonzero(live)[0]
    for _ in range(30):
        if need.size == 0:
            break
        have_lo = np.isfinite(glo[need])
        have_hi = np.isfinite(hi[need])
        nxt = np.empty(need.size)
        both = have_lo & have_hi
        if np.any(both):
            sub = need[both]
            width = hi[sub] - lo[sub]
            with np.errstate(divide="ignore", invalid="ignore"):
                sec = hi[sub] - ghi[sub] * width / (ghi[sub] - glo[sub])
            sec = np.where(np.isfinite(sec), sec, lo[sub] + 0.5 * width)
            nxt[both] = np.clip(
                sec, lo[sub] + 0.1 * width, hi[sub] - 0.1 * width
            )
        right = have_lo & ~have_hi
        if np.any(right):
            sub = need[right]
            nxt[right] = np.minimum(lo[sub] + step[sub], psi_cap)
            step[sub] *= 2.0
        left = ~have_lo & have_hi
        if np.any(left):
            sub = need[left]
            nxt[left] = np.where(hi[sub] > 4e-14, hi[sub] * 0.25, 0.0)
        bb, pp, val, grad, t0 = ev(nxt, need)
        better = val > best_v[need]
        if np.any(better):
            sub = need[better]
            best_b[sub] = bb[better]
            best_p[sub] = pp[better]
            best_v[sub] = val[better]
            best_ps[sub] = nxt[better]
            best_t0[sub] = t0[better]
        pos = grad > 0
        lo[need[pos]] = nxt[pos]
        glo[need[pos]] = grad[pos]
        hi[need[~pos]] = np.minimum(hi[need[~pos]], nxt[~pos])
        ghi[need[~pos]] = grad[~pos]
        done = (
            (np.abs(grad) <= g_tol[need])
            | ~np.isfinite(grad)
            | (pos & (nxt >= psi_cap))
            | (~pos & (nxt <= 0.0))
            | (np.isfinite(glo[need]) & np.isfinite(hi[need])
               & (hi[need] - lo[need] <= 1e-10 * (1.0 + hi[need])))
        )
        need = need[~done]
    return best_b, best_p, best_ps, best_t0


def _dual_value_arrays(x, w, r, eps, lam, alpha, beta, psi, phi, plan_mass):
    s = beta + phi
    return (
        -(s * s).sum(axis=1) / (2.0 * lam)
        - psi * eps
        + (alpha * x).sum(axis=1)
        + (beta * w).sum(axis=1)
        + (phi * w).sum(axis=1)
        - r * phi.sum(axis=1)
        - plan_mass
    )


_STAGE_START = 30.0
_STAGE_RATIO = 4.0
_STAGE_TOL = 3e-3
_STAGE_SWEEPS = 80
_ANDERSON_DEPTH = 5
_WARM_PROBE_SWEEPS = 40
_WARM_STALL_FAR = (8, 1e-2)
_WARM_STALL_NEAR = (20, 1e-3)


def _engine(x, w, r, eps, lam, cost, limits, alpha, beta, psi, phi,
            from_warm, track_objective=False):
    """Blockwise dual ascent over a batch; mutates the dual arrays in place.

    x, w are (b, n); r, eps, psi are (b,). Converged elements are compacted
    out of the working set so mixed batches do not pay for their slowest
    member. A warm-started element that goes non-finite restarts cold once;
    a cold element going non-finite raises NumericalOverflow.

    Every run anneals the smoothing: the solve begins at a mild strength
    and sharpens geometrically toward the requested lam, rescaling the duals
    (which grow proportionally to lam) at each switch. Without this the
    budget multiplier, whose Newton step gains O(1) per sweep, would need
    O(lam) sweeps whenever the budget constraint carries a large shadow
    price; worse, at image scale the sharp kernel moves mass only one
    window radius per sweep, so global re-routing is feasible only in the
    wide-kernel stages. Warm duals skip the ladder and probe at the
    requested lam directly; duals carried across a small move of w settle
    in a few sweeps, and a probe that stalls instead is demoted into the
    ladder like a cold start. Convergence is only ever declared at the
    requested lam.
    """
    b, n = x.shape
    idx = cost.idx
    cvec = cost.cost
    mask = cost.log_invalid()
    logx = np.log(np.maximum(x, _MASS_FLOOR))
    if track_objective and b != 1:
        raise ValueError("objective tracking is single-instance only")

    lam_final = float(lam)
    start_lam = min(_STAGE_START, lam_final)
    # Warm duals probe directly at the requested lam first: carried across
    # a small move of w they are near-optimal and settle within a few
    # sweeps. Rows whose probe stalls are demoted into the ladder below.
    if start_lam < lam_final:
        probing = from_warm.copy()
    else:
        probing = np.zeros(b, dtype=bool)
    cur_lam = np.where(probing, lam_final, start_lam)
    stage_budget = min(_STAGE_SWEEPS, max(8, limits.max_sweeps // 5))
    in_stage = np.zeros(b, dtype=np.int64)
    iters = np.zeros(b, dtype=np.int64)
    conv = np.zeros(b, dtype=bool)
    w_over = np.full(b, np.inf)
    d_l1 = np.full(b, np.inf)
    rng_ok = np.zeros(b, dtype=bool)
    retried = np.zeros(b, dtype=bool)
    trace = [] if track_objective else None

    active = np.arange(b)
    thresh_w = limits.w_over_abs + limits.w_over_rel * eps

    # Residual history for Anderson extrapolation, per batch element.
    dim = 3 * n + 1
    hist_u = np.zeros((b, _ANDERSON_DEPTH, dim))
    hist_g = np.zeros((b, _ANDERSON_DEPTH, dim))
    hist_len = np.zeros(b, dtype=np.int64)

    def record(al, be, ps_, ph_, cl):
        if cl[0] != lam_final:
            return
        t0, _, _ = _plan_sums(al, be, ps_, cost, mask, want_cost=False)
        trace.append(float(_dual_value_arrays(
            x, w, r, eps, lam_final, al, be, ps_, ph_, t0)[0]))

    for sweep in range(1, limits.max_sweeps + 1):
        if active.size == 0:
            break
        ids = active
        cur = cur_lam[ids]
        a_old = alpha[ids]
        b_old = beta[ids]
        ps_old = psi[ids]
        ph_old = phi[ids]
        kern = -ps_old[:, None, None] * cvec[None, :, :] - 1.0 + mask[None, :, :]

        new_a = logx[ids] - _logsumexp(b_old[:, idx] + kern, axis=2)
        if trace is not None:
            record(new_a, b_old, ps_old, ph_old, cur)

        new_b, new_p, new_ps, t0_pl = _block_solve(
            new_a, w[ids], r[ids], eps[ids], cur, cost, mask, ps_old,
            limits.psi_cap,
        )
        if trace is not None:
            record(new_a, new_b, new_ps, new_p, cur)
        # Exact maximization along the flat translation mode (alpha+t,
        # beta-t), which the sweep updates barely move (curvature ~n/lam).
        # Recentering keeps sum(z) = 1 identically and makes the dual
        # rescaling at stage switches exact for this mode. The plan, and
        # with it t0_pl, is invariant under the shift.
        t_shift = ((new_b + new_p).sum(axis=1)
                   + cur * (1.0 - w[ids].sum(axis=1))) / n
        new_b -= t_shift[:, None]
        new_a += t_shift[:, None]

        # Anderson extrapolation over recent sweep residuals. A sweep moves
        # mass mismatches one window radius, so smooth dual modes contract
        # too slowly for image grids; the least-squares mix of stored
        # residuals cancels them. Kept only when the dual does not drop, so
        # per-update monotone ascent survives.
        u_in = np.concatenate(
            [a_old, b_old, ph_old, ps_old[:, None]], axis=1)
        g_res = np.concatenate(
            [new_a, new_b, new_p, new_ps[:, None]], axis=1) - u_in
        hist_u[ids, :-1] = hist_u[ids, 1:]
        hist_g[ids, :-1] = hist_g[ids, 1:]
        hist_u[ids, -1] = u_in
        hist_g[ids, -1] = g_res
        hist_len[ids] = np.minimum(hist_len[ids] + 1, _ANDERSON_DEPTH)
        v_plain = _dual_value_arrays(
            x[ids], w[ids], r[ids], eps[ids], cur, new_a, new_b, new_ps,
            new_p, t0_pl)
        for depth in range(2, _ANDERSON_DEPTH + 1):
            rows = np.nonzero(hist_len[ids] == depth)[0]
            if rows.size == 0:
                continue
            gid = ids[rows]
            uh = hist_u[gid, -depth:]
            gh = hist_g[gid, -depth:]
            du = uh[:, 1:] - uh[:, :-1]
            dg = gh[:, 1:] - gh[:, :-1]
            gl = gh[:, -1]
            nrm = np.einsum("gld,gkd->glk", dg, dg)
            rhs = np.einsum("gld,gd->gl", dg, gl)
            ridge = 1e-12 * np.trace(nrm, axis1=1, axis2=2) + 1e-300
            step_idx = np.arange(depth - 1)
            nrm[:, step_idx, step_idx] += ridge[:, None]
            with np.errstate(all="ignore"):
                try:
                    coef = np.linalg.solve(nrm, rhs[:, :, None])[:, :, 0]
                except np.linalg.LinAlgError:
                    continue
                u_x = (uh[:, -1] + gl) - np.einsum(
                    "gl,gld->gd", coef, du + dg)
            ax = u_x[:, :n]
            bx = u_x[:, n:2 * n]
            px = np.maximum(u_x[:, 2 * n:3 * n], 0.0)
            sx = np.clip(u_x[:, 3 * n], 0.0, limits.psi_cap)
            with np.errstate(over="ignore"):
                t0_x, _, _ = _plan_sums(ax, bx, sx, cost, mask,
                                        want_cost=False)
                v_x = _dual_value_arrays(
                    x[gid], w[gid], r[gid], eps[gid], cur[rows], ax, bx,
                    sx, px, t0_x)
            # Strict improvement only: along directions where the dual is
            # exactly flat (the beta/phi split of a capped coordinate) a
            # tie would let the extrapolant wander without progress.
            take = np.isfinite(v_x) & (v_x > v_plain[rows])
            if np.any(take):
                tk = rows[take]
                new_a[tk] = ax[take]
                new_b[tk] = bx[take]
                new_p[tk] = px[take]
                new_ps[tk] = sx[take]
        if trace is not None:
            record(new_a, new_b, new_ps, new_p, cur)

        finite = (
            np.all(np.isfinite(new_a), axis=1)
            & np.all(np.isfinite(new_b), axis=1)
            & np.all(np.isfinite(new_p), axis=1)
            & np.isfinite(new_ps)
        )
        if not np.all(finite):
            blown = ids[~finite]
            eligible = from_warm[blown] & ~retried[blown]
            if not np.all(eligible):
                raise NumericalOverflow(
                    "non-finite duals during projection (cold start)"
                )
            ca, cb, cp, cf = _batch_cold(blown.size, n)
            alpha[blown], beta[blown] = ca, cb
            psi[blown], phi[blown] = cp, cf
            cur_lam[blown] = start_lam
            in_stage[blown] = 0
            retried[blown] = True
            iters[blown] = sweep
            hist_len[blown] = 0
            probing[blown] = False
            keep = finite
            ids = ids[keep]
            if ids.size == 0:
                continue
            cur = cur[keep]
            new_a, new_b = new_a[keep], new_b[keep]
            new_ps, new_p = new_ps[keep], new_p[keep]
            a_old, b_old = a_old[keep], b_old[keep]
            ps_old, ph_old = ps_old[keep], ph_old[keep]

        change = np.maximum(
            np.abs(new_a - a_old).max(axis=1),
            np.maximum(
                np.abs(new_b - b_old).max(axis=1),
                np.maximum(np.abs(new_p - ph_old).max(axis=1),
                           np.abs(new_ps - ps_old)),
            ),
        )
        alpha[ids], beta[ids] = new_a, new_b
        psi[ids], phi[ids] = new_ps, new_p
        iters[ids] = sweep
        in_stage[ids] += 1

        at_final = cur == lam_final
        settled = (change < limits.dual_change_tol) & at_final
        stuck = (change < limits.stuck_tol) & at_final
        last = sweep == limits.max_sweeps
        left_now = np.zeros(ids.size, dtype=bool)
        candidates = np.nonzero(settled | stuck | last)[0] if (
            np.any(settled) or last
        ) else np.array([], dtype=np.int64)
        if candidates.size:
            cid = ids[candidates]
            _, t1_f, _ = _plan_sums(
                new_a[candidates], new_b[candidates], new_ps[candidates],
                cost, mask,
            )
            z = w[cid] - (new_b[candidates] + new_p[candidates]) \
                / cur_lam[cid][:, None]
            over = t1_f - eps[cid]
            # A settled coordinate can sit barely negative when its true
            # value is of dual-residual scale (near-empty column). The
            # stationary point has z_j equal to a positive column mass, so
            # the exact beta step that zeroes z_j is still dual ascent and
            # keeps z = w - (beta + phi) / lam exact.
            zmin = z.min(axis=1)
            zslack = 10.0 * limits.dual_change_tol / lam_final
            fix = settled[candidates] & (zmin < 0.0) & (zmin >= -zslack)
            if np.any(fix):
                fr = np.nonzero(fix)[0]
                gfix = cid[fr]
                lamc = cur_lam[gfix][:, None]
                beta[gfix] += lamc * np.minimum(z[fr], 0.0)
                # Round-trip roundoff can leave an ulp of negativity; nudge
                # the offending beta down until the recomputed z clears 0.
                zf = w[gfix] - (beta[gfix] + new_p[candidates][fr]) / lamc
                for _ in range(4):
                    neg = zf < 0.0
                    if not np.any(neg):
                        break
                    bf = beta[gfix]
                    bf[neg] = np.nextafter(bf[neg], -np.inf)
                    beta[gfix] = bf
                    zf = w[gfix] - (beta[gfix] + new_p[candidates][fr]) / lamc
                z[fr] = zf
            drift = np.abs(1.0 - z.sum(axis=1))
            in_range = (z.min(axis=1) >= -1e-12) & (
                z.max(axis=1) <= r[cid] * (1.0 + 1e-6)
            )
            ok = (
                settled[candidates]
                & (over <= thresh_w[cid])
                & (drift <= limits.delta_l1_tol)
                & in_range
            )
            leave = ok | stuck[candidates] | last
            w_over[cid] = over
            d_l1[cid] = drift
            rng_ok[cid] = in_range
            conv[cid[ok]] = True
            if np.any(leave):
                left_now[candidates[leave]] = True
                active = np.setdiff1d(active, cid[leave], assume_unique=True)

        # A probe that is not contracting carries duals whose support is
        # wrong for the new w; it needs the wide-kernel re-routing of the
        # ladder, so hand it over like a cold start.
        demote = probing[ids] & ~left_now & (
            (in_stage[ids] >= _WARM_PROBE_SWEEPS)
            | ((in_stage[ids] >= _WARM_STALL_FAR[0])
               & (change > _WARM_STALL_FAR[1]))
            | ((in_stage[ids] >= _WARM_STALL_NEAR[0])
               & (change > _WARM_STALL_NEAR[1]))
        )
        if np.any(demote):
            gid = ids[demote]
            scale = start_lam / lam_final
            beta[gid] *= scale
            phi[gid] *= scale
            psi[gid] *= scale
            cur_lam[gid] = start_lam
            in_stage[gid] = 0
            hist_len[gid] = 0
            probing[gid] = False

        advance = ~at_final & (
            (change < _STAGE_TOL) | (in_stage[ids] >= stage_budget)
        )
        if np.any(advance):
            gid = ids[advance]
            new_l = np.minimum(cur_lam[gid] * _STAGE_RATIO, lam_final)
            ratio = (new_l / cur_lam[gid])[:, None]
            beta[gid] *= ratio
            phi[gid] *= ratio
            psi[gid] = np.minimum(psi[gid] * ratio[:, 0], limits.psi_cap)
            cur_lam[gid] = new_l
            in_stage[gid] = 0
            hist_len[gid] = 0

    z = w - (beta + phi) / cur_lam[:, None]
    # Rows that hit the cap mid-ladder hold duals at their stage lam; z is
    # recovered at that lam, then the duals are rescaled so stored warm
    # state always refers to the requested lam.
    behind = cur_lam < lam_final
    if np.any(behind):
        up = (lam_final / cur_lam[behind])[:, None]
        beta[behind] *= up
        phi[behind] *= up
        psi[behind] = np.minimum(psi[behind] * up[:, 0], limits.psi_cap)
    return z, w_over, d_l1, rng_ok, iters, conv, trace


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def project(problem, warm=None, limits=None, track_objective=False):
    """Project problem.w onto the transport ball around problem.x.

    warm is an optional DualState from a nearby earlier problem (same grid);
    a warm run that turns non-finite is retried once from a cold start.
    Returns (z, duals, report); z is exactly w - (beta + phi) / lam at the
    returned duals. With track_objective=True additionally returns the dual
    objective recorded after every block update.
    """
    limits = limits or ATTACK_LIMITS
    n = problem.cost.n_pixel
    if warm is None:
        a, b, p, f = _batch_cold(1, n)
        from_warm = np.zeros(1, dtype=bool)
    else:
        if warm.alpha.shape != (n,) or warm.phi.shape != (n,):
            raise DimensionMismatch("warm dual state does not match the grid")
        a = np.asarray(warm.alpha, dtype=np.float64)[None, :].copy()
        b = np.asarray(warm.beta, dtype=np.float64)[None, :].copy()
        p = np.array([float(warm.psi)])
        f = np.asarray(warm.phi, dtype=np.float64)[None, :].copy()
        from_warm = np.ones(1, dtype=bool)
    z, w_over, d_l1, rng, iters, conv, trace = _engine(
        problem.x[None, :], problem.w[None, :],
        np.array([problem.r]), np.array([problem.epsilon]),
        problem.lam, problem.cost, limits, a, b, p, f, from_warm,
        track_objective=track_objective,
    )
    duals = DualState(a[0], b[0], float(p[0]), f[0])
    report = ProjectionReport(
        float(w_over[0]), float(d_l1[0]), bool(rng[0]),
        int(iters[0]), bool(conv[0]),
    )
    if track_objective:
        return z[0], duals, report, trace
    return z[0], duals, report


def project_batch(x, w, r, epsilon, lam, cost, warm=None, limits=None):
    """Batched projection; x, w are (b, n), r and epsilon scalar or (b,).

    warm is an optional (alpha, beta, psi, phi) tuple of batched arrays,
    mutated in place and also returned. Returns (z, warm_tuple, reports).
    """
    limits = limits or ATTACK_LIMITS
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b, n = x.shape
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (b,)).copy()
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (b,)).copy()
    if warm is None:
        a, bt, p, f = _batch_cold(b, n)
        from_warm = np.zeros(b, dtype=bool)
    else:
        a, bt, p, f = warm
        from_warm = np.ones(b, dtype=bool)
    z, w_over, d_l1, rng, iters, conv, _ = _engine(
        x, w, r, eps, lam, cost, limits, a, bt, p, f, from_warm
    )
    reports = [
        ProjectionReport(float(w_over[i]), float(d_l1[i]), bool(rng[i]),
                         int(iters[i]), bool(conv[i]))
        for i in range(b)
    ]
    return z, (a, bt, p, f), reports


def recover_plan(problem, duals):
    """Materialize the transport plan at the given duals, dense (n, n)."""
    cost = problem.cost
    n = cost.n_pixel
    logp = (
        duals.alpha[:, None]
        + duals.beta[cost.idx]
        - duals.psi * cost.cost
        - 1.0
        + cost.log_invalid()
    )
    p = np.exp(logp)
    out = np.zeros((n, n))
    rows = np.repeat(np.arange(n), cost.window).reshape(n, -1)
    out[rows[cost.valid], cost.idx[cost.valid]] = p[cost.valid]
    return out


def recover_point(problem, duals):
    """The projected distribution implied by the duals: w - (beta+phi)/lam."""
    return problem.w - (duals.beta + duals.phi) / problem.lam


def compliance(problem, duals, iterations=0, converged=True):
    """Recompute the termination diagnostics from final duals."""
    mask = problem.cost.log_invalid()
    _, t1, _ = _plan_sums(
        duals.alpha[None, :], duals.beta[None, :],
        np.array([duals.psi]), problem.cost, mask,
    )
    z = recover_point(problem, duals)
    w_over = float(t1[0] - problem.epsilon)
    delta_l1 = float(abs(1.0 - z.sum()))
    range_ok = bool(
        z.min() >= -1e-12 and z.max() <= problem.r * (1.0 + 1e-6)
    )
    return ProjectionReport(w_over, delta_l1, range_ok, iterations, converged)


def dual_objective(problem, duals):
    """Value of the smoothed dual at the given variables (to be maximized)."""
    mask = problem.cost.log_invalid()
    t0, _, _ = _plan_sums(
        duals.alpha[None, :], duals.beta[None, :],
        np.array([duals.psi]), problem.cost, mask, want_cost=False,
    )
    return float(
        _dual_value_arrays(
            problem.x[None, :], problem.w[None, :], np.array([problem.r]),
            np.array([problem.epsilon]), problem.lam,
            duals.alpha[None, :], duals.beta[None, :],
            np.array([duals.psi]), duals.phi[None, :], t0,
        )[0]
    )


# ---------------------------------------------------------------------------
# image-level wrapper and sklearn-style transformer
# ---------------------------------------------------------------------------

def project_distributions(x_dists, w_dists, l1_norms, cost, epsilon, lam,
                          warm=None, limits=None):
    """Project per-channel distributions; the budget splits evenly across
    channels (conservative for multichannel, exact for single-channel).

    Returns (z_dists, duals per channel, merged ProjectionReport).
    """
    limits = limits or ATTACK_LIMITS
    c = x_dists.shape[0]
    eps_ch = epsilon / c
    z_out = np.empty_like(w_dists)
    duals_out = []
    w_over = 0.0
    delta = 0.0
    rng = True
    iters = 0
    conv = True
    for ch in range(c):
        prob = ProjectionProblem(
            w_dists[ch], x_dists[ch], cost, eps_ch, lam,
            1.0 / float(l1_norms[ch]),
        )
        wrm = warm[ch] if warm is not None else None
        z, d, rep = project(prob, warm=wrm, limits=limits)
        z_out[ch] = z
        duals_out.append(d)
        w_over += rep.w_over
        delta = max(delta, rep.delta_l1)
        rng = rng and rep.range_ok
        iters = max(iters, rep.iterations)
        conv = conv and rep.converged
    return z_out, duals_out, ProjectionReport(w_over, delta, rng, iters, conv)


class WassersteinProjection:
    """Transformer mapping candidate images onto transport balls.

    fit(X) stores the anchor images; transform(W) projects W[i] onto the
    ball of radius epsilon_total (an eps * n_pixel figure) around X[i] and
    returns the materialized images. Thin wrapper so the projection composes
    with pipeline-style tooling; the functional API underneath is project().
    """

    def __init__(self, epsilon_total=50.0, lam=DEFAULT_LAM_ATTACK,
                 locality=5, order=1):
        self.epsilon_total = epsilon_total
        self.lam = lam
        self.locality = locality
        self.order = order

    def get_params(self, deep=True):
        return {
            "epsilon_total": self.epsilon_total,
            "lam": self.lam,
            "locality": self.locality,
            "order": self.order,
        }

    def set_params(self, **params):
        for k, v in params.items():
            if not hasattr(self, k):
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def fit(self, X, y=None):
        from .validation import as_image_batch

        X = as_image_batch(X)
        self.anchors_ = [normalize(img) for img in X]
        first = self.anchors_[0]
        loc = self.locality
        if loc is not None and (first.height < loc or first.width < loc):
            loc = None
        self.cost_ = build_cost_matrix(first.height, first.width,
                                       self.order, loc)
        return self

    def transform(self, W):
        from .errors import NotFittedError
        from .validation import as_image_batch

        if not hasattr(self, "anchors_"):
            raise NotFittedError("WassersteinProjection.fit must run first")
        W = as_image_batch(W)
        if len(W) != len(self.anchors_):
            raise DimensionMismatch(
                f"{len(W)} candidates for {len(self.anchors_)} anchors"
            )
        out = []
        for img, anchor in zip(W, self.anchors_):
            nw = normalize(img)
            eps = self.epsilon_total / anchor.n_pixel
            z, _, _ = project_distributions(
                anchor.distributions, nw.distributions, anchor.l1_norms,
                self.cost_, eps, self.lam,
            )
            out.append(unnormalize(replace(anchor, distributions=z),
                                   float_slack=2e-6))
        return np.stack(out)
