"""PGD attacks under box, sphere, and transport-ball threat models.

The transport branch runs in normalized-distribution space: gradient steps
are taken on the per-channel distributions (chain rule through the original
image's channel mass, held fixed for the whole attack), every step is pulled
back onto the ball by the dual projection, and the returned image is
re-materialized and re-audited. An iterate whose projection fails, or whose
final audit comes back over budget, is rolled back rather than returned, so
batch evaluations always complete.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, ZeroGradient, ZeroMassChannel
from .imagecore import (
    BallSpec,
    MembershipReport,
    ball_membership,
    build_cost_matrix,
    normalize,
)
from .sinkhorn import (
    ATTACK_LIMITS,
    DEFAULT_LAM_ATTACK,
    ProjectionLimits,
    project_batch,
    project_distributions,
)
from .validation import as_image, as_image_batch, as_labels, check_same_shape

DEFAULT_ALPHA = 0.06

# Materialized pixels may overshoot [0, 1] by projection slack only; anything
# worse marks the iterate noncompliant instead of being clamped away.
_FLOAT_SLACK = 2e-6

_KINDS = ("linf", "l2", "wasserstein")
_STEP_KINDS = ("linf_sign", "l2_steepest")


def default_max_steps(n_pixel):
    """Iteration budget by grid size: 200 up to 28x28, 100 above."""
    return 200 if n_pixel <= 784 else 100


@dataclass
class ThreatModel:
    """Ball definition plus the step rule used to search it.

    kind       : linf | l2 | wasserstein
    epsilon    : radius; pixel units for the lp balls, normalized transport
                 mass for wasserstein (a per-image total, split evenly over
                 channels)
    step_kind  : linf_sign | l2_steepest
    alpha      : raw step size, shrunk per-example via effective_step_size
    max_steps  : gradient steps per attack
    targeted   : steer toward `target` instead of away from the true label
    early_stop : quit as soon as the prediction flips (set False for
                 loss-maximization studies)
    lam        : projection sharpness (wasserstein only)
    locality   : transport window width (wasserstein only)
    order      : ground-metric exponent (wasserstein only)
    limits     : projection loop thresholds; None means the attack defaults
    """

    kind: str
    epsilon: float
    step_kind: str = "linf_sign"
    alpha: float = DEFAULT_ALPHA
    max_steps: int = 200
    targeted: bool = False
    target: "int | None" = None
    early_stop: bool = True
    lam: float = DEFAULT_LAM_ATTACK
    locality: "int | None" = 5
    order: int = 1
    limits: "ProjectionLimits | None" = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown threat kind {self.kind!r}")
        if self.step_kind not in _STEP_KINDS:
            raise ValueError(f"unknown step kind {self.step_kind!r}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.targeted and self.target is None:
            raise ValueError("targeted attack needs a target label")


@dataclass
class AttackResult:
    """One finished attack.

    adversarial : the returned image (the original when nothing compliant
                  beat it)
    success     : prediction flipped (untargeted) or hit the target
    steps_used  : gradient steps behind the returned iterate
    budget_used : measured distance consumed by the returned image
    compliance  : the re-audit of the returned image; for lp threats the
                  w_estimate field holds the lp distance and the mass
                  condition is vacuous
    """

    adversarial: np.ndarray
    success: bool
    steps_used: int
    budget_used: float
    compliance: MembershipReport


# ---------------------------------------------------------------------------
# step rules and schedule
# ---------------------------------------------------------------------------

def step_linf_sign(gradient, alpha):
    """alpha times the elementwise sign of the gradient."""
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    return alpha * np.sign(g)


def step_l2_matched(gradient, alpha):
    """Euclidean steepest-ascent direction, peak-matched to the sign step.

    The gradient is rescaled so its largest absolute entry equals alpha,
    which makes the two step rules comparable at the same alpha. Raises
    ZeroGradient when there is nothing to scale.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    peak = np.abs(g).max() if g.size else 0.0
    if peak == 0.0:
        raise ZeroGradient("all-zero gradient has no step direction")
    return (alpha / peak) * g


def effective_step_size(epsilon, alpha):
    """Per-example step size min(epsilon / 2, alpha)."""
    if epsilon <= 0 or alpha <= 0:
        raise ValueError("epsilon and alpha must be positive")
    return min(epsilon / 2.0, alpha)


def _step_rows(grads, alpha, step_kind):
    # Batched variant: one row per example; zero rows get a zero step so a
    # saturated example cannot abort the batch.
    if step_kind == "linf_sign":
        return alpha * np.sign(grads)
    peaks = np.abs(grads).max(axis=1)
    safe = np.where(peaks > 0, peaks, 1.0)
    scale = np.where(peaks > 0, alpha / safe, 0.0)
    return grads * scale[:, None]


# ---------------------------------------------------------------------------
# ball projections
# ---------------------------------------------------------------------------

def project_ball(candidate, original, threat, cost=None, warm=None,
                 with_duals=False):
    """Pull a candidate back inside the threat ball around the original.

    linf clamps each pixel to original +- epsilon and then to [0, 1]; l2
    shrinks the offset radially onto the sphere and then clamps to [0, 1].
    wasserstein normalizes both images against the original's channel masses
    and delegates to the dual projection, returning the projected
    distributions (flat for single-channel input) with no clamping after;
    with_duals=True additionally returns the per-channel duals and the
    termination report for warm-starting a following call.
    """
    orig = as_image(original)
    cand = as_image(candidate, "candidate", check_range=False)
    check_same_shape(orig, cand, "original", "candidate")
    if threat.kind == "linf":
        out = np.clip(cand, orig - threat.epsilon, orig + threat.epsilon)
        return np.clip(out, 0.0, 1.0)
    if threat.kind == "l2":
        delta = cand - orig
        dist = np.sqrt((delta ** 2).sum())
        if dist > threat.epsilon:
            delta *= threat.epsilon / dist
        return np.clip(orig + delta, 0.0, 1.0)

    na = normalize(orig)
    stack = cand[None, :, :] if cand.ndim == 2 else np.moveaxis(cand, 2, 0)
    w = stack.reshape(na.n_channels, -1) / na.l1_norms[:, None]
    if cost is None:
        cost = _grid_cost(na.height, na.width, threat)
    z, duals, report = project_distributions(
        na.distributions, w, na.l1_norms, cost, threat.epsilon, threat.lam,
        warm=warm, limits=threat.limits or ATTACK_LIMITS,
    )
    if not na.channel_axis:
        z = z[0]
    if with_duals:
        return z, duals, report
    return z


def _grid_cost(height, width, threat):
    loc = threat.locality
    if loc is not None and (height < loc or width < loc):
        loc = None
    return build_cost_matrix(height, width, threat.order, loc)


# ---------------------------------------------------------------------------
# batched attack engines
# ---------------------------------------------------------------------------

def _predict(model, images):
    return np.asarray(model.predict(images))


def _wrong(preds, labels, threat):
    if threat.targeted:
        return preds == threat.target
    return preds != labels


def _input_gradients(model, images, labels, threat):
    if threat.targeted:
        tgt = np.full(len(images), threat.target, dtype=np.int64)
        _, g = model.loss_and_input_gradient(images, tgt)
        # Targeted attacks descend the target-label loss.
        return -np.asarray(g, dtype=np.float64)
    _, g = model.loss_and_input_gradient(images, labels)
    return np.asarray(g, dtype=np.float64)


def _run_lp(model, images, labels, threat, start=None):
    """Vectorized lp PGD; returns (adv, preds, success, steps_used)."""
    orig = images.astype(np.float64)
    b = orig.shape[0]
    cur = orig.copy() if start is None else start.astype(np.float64).copy()
    steps_used = np.zeros(b, dtype=np.int64)
    alpha_eff = effective_step_size(threat.epsilon, threat.alpha)

    lo = hi = None
    if threat.kind == "linf":
        lo = np.clip(orig - threat.epsilon, 0.0, 1.0)
        hi = np.clip(orig + threat.epsilon, 0.0, 1.0)
        cur = np.clip(cur, lo, hi)

    preds = _predict(model, cur)
    success = _wrong(preds, labels, threat)
    for _ in range(threat.max_steps):
        active = ~success if threat.early_stop else np.ones(b, dtype=bool)
        if not np.any(active):
            break
        m = int(active.sum())
        grads = _input_gradients(model, cur[active], labels[active], threat)
        step = _step_rows(grads.reshape(m, -1), alpha_eff, threat.step_kind)
        nxt = cur[active] + step.reshape(grads.shape)
        if threat.kind == "linf":
            nxt = np.clip(np.clip(nxt, lo[active], hi[active]), 0.0, 1.0)
        else:
            delta = (nxt - orig[active]).reshape(m, -1)
            dist = np.sqrt((delta ** 2).sum(axis=1))
            safe = np.where(dist > 0, dist, 1.0)
            shrink = np.where(dist > threat.epsilon, threat.epsilon / safe,
                              1.0)
            delta *= shrink[:, None]
            nxt = np.clip(orig[active] + delta.reshape(nxt.shape), 0.0, 1.0)
        cur[active] = nxt
        steps_used[active] += 1
        preds_a = _predict(model, cur[active])
        preds[active] = preds_a
        success[active] = _wrong(preds_a, labels[active], threat)
    return cur, preds, success, steps_used


def _lp_report(original, adv, threat):
    delta = (adv - original).ravel()
    if threat.kind == "linf":
        dist = float(np.abs(delta).max()) if delta.size else 0.0
    else:
        dist = float(np.sqrt((delta ** 2).sum()))
    w_ok = dist <= threat.epsilon * (1.0 + 1e-9) + 1e-12
    range_ok = bool(adv.min() >= 0.0 and adv.max() <= 1.0)
    mass = original.sum()
    dev = abs(adv.sum() / mass - 1.0) if mass > 0 else 0.0
    return MembershipReport(
        w_estimate=dist, w_ok=w_ok, l1_deviation=np.array([dev]),
        l1_ok=True, range_ok=range_ok, passed=bool(w_ok and range_ok),
    )


class _TransportState:
    """Resumable per-image state of a batched transport attack."""

    def __init__(self, cur, duals, warmed):
        self.cur = cur          # (b*c, n) current compliant distributions
        self.duals = duals      # (A, B, P, F) batched dual arrays or None
        self.warmed = warmed


def _flatten_batch(images):
    """(b, h, w[, c]) to channel-major rows plus masses and shape info."""
    if images.ndim == 3:
        stack = images[:, None, :, :]
        channel_axis = False
    else:
        stack = np.moveaxis(images, 3, 1)
        channel_axis = True
    b, c, h, w = stack.shape
    flat = stack.reshape(b * c, h * w)
    norms = flat.sum(axis=1)
    if np.any(norms <= 0):
        raise ZeroMassChannel("every channel needs positive mass to attack")
    return flat / norms[:, None], norms, (b, c, h, w, channel_axis)


def _materialize(rows, norms, info):
    """Distributions back to images plus a per-image range-compliance mask."""
    b, c, h, w, channel_axis = info
    pixels = rows * norms[:, None]
    over = np.maximum(pixels.max(axis=1) - 1.0, -pixels.min(axis=1))
    ok_rows = over <= _FLOAT_SLACK
    np.clip(pixels, 0.0, 1.0, out=pixels)
    imgs = pixels.reshape(b, c, h, w)
    if channel_axis:
        imgs = np.moveaxis(imgs, 1, 3)
    else:
        imgs = imgs[:, 0]
    return imgs, ok_rows.reshape(b, c).all(axis=1)


def _run_wasserstein(model, images, labels, threat, cost, audit, state=None):
    """Batched transport-ball PGD.

    Returns (adv_images, preds, success, steps_used, reports, state);
    reports is a list of MembershipReport, or None when audit=False.
    """
    images = images.astype(np.float64)
    x_rows, norms, info = _flatten_batch(images)
    b, c, h, w, _ = info
    n = h * w
    if cost is None:
        cost = _grid_cost(h, w, threat)
    if cost.n_pixel != n:
        raise DimensionMismatch(
            f"cost grid has {cost.n_pixel} pixels, images have {n}"
        )
    limits = threat.limits or ATTACK_LIMITS
    eps_ch = threat.epsilon / c
    r_rows = 1.0 / norms
    alpha_eff = effective_step_size(threat.epsilon, threat.alpha)

    if state is None:
        cur = x_rows.copy()
        duals = None
        warmed = False
    else:
        cur = state.cur.copy()
        duals = state.duals
        warmed = state.warmed

    # Last two projection-compliant iterates per image, for rollback.
    good1 = cur.copy()
    good1_steps = np.zeros(b, dtype=np.int64)
    good0 = cur.copy()
    good0_steps = np.zeros(b, dtype=np.int64)

    alive = np.ones(b, dtype=bool)
    success = np.zeros(b, dtype=bool)
    preds = np.empty(b, dtype=np.int64)
    steps_used = np.zeros(b, dtype=np.int64)

    for t in range(threat.max_steps + 1):
        imgs, _ = _materialize(cur, norms, info)
        preds[:] = _predict(model, imgs)
        success = _wrong(preds, labels, threat)
        active = alive & ~success if threat.early_stop else alive.copy()
        if t == threat.max_steps or not np.any(active):
            break

        rows = np.repeat(active, c)
        m = int(active.sum())
        grads = _input_gradients(model, imgs[active], labels[active], threat)
        if grads.ndim == 3:
            gstack = grads[:, None, :, :]
        else:
            gstack = np.moveaxis(grads, 3, 1)
        # d loss / d distribution = d loss / d pixel times the fixed mass.
        g_rows = gstack.reshape(m * c, n) * norms[rows][:, None]
        step = _step_rows(g_rows.reshape(m, c * n), alpha_eff,
                          threat.step_kind)
        w_rows = cur[rows] + step.reshape(m * c, n)

        wsub = tuple(arr[rows] for arr in duals) if warmed else None
        z, wsub_out, reports = project_batch(
            x_rows[rows], w_rows, r_rows[rows], eps_ch, threat.lam, cost,
            warm=wsub, limits=limits,
        )
        if duals is None:
            duals = (np.zeros((b * c, n)), np.zeros((b * c, n)),
                     np.ones(b * c), np.ones((b * c, n)))
        for full, part in zip(duals, wsub_out):
            full[rows] = part
        warmed = True

        ok_imgs = np.fromiter(
            (rep.converged and rep.range_ok for rep in reports),
            dtype=bool, count=m * c,
        ).reshape(m, c).all(axis=1)
        act_idx = np.nonzero(active)[0]
        good_imgs = act_idx[ok_imgs]
        bad_imgs = act_idx[~ok_imgs]
        if good_imgs.size:
            grows = np.repeat(good_imgs * c, c) + np.tile(
                np.arange(c), good_imgs.size)
            zsel = z[np.repeat(ok_imgs, c)]
            good0[grows] = good1[grows]
            good0_steps[good_imgs] = good1_steps[good_imgs]
            cur[grows] = zsel
            good1[grows] = zsel
            steps_used[good_imgs] += 1
            good1_steps[good_imgs] = steps_used[good_imgs]
        if bad_imgs.size:
            # Projection failed: freeze these at their last good iterate.
            alive[bad_imgs] = False
            brows = np.repeat(bad_imgs * c, c) + np.tile(
                np.arange(c), bad_imgs.size)
            cur[brows] = good1[brows]

    adv, range_fine = _materialize(good1, norms, info)
    reports_out = None
    if audit:
        reports_out = []
        spec = _audit_spec(threat.epsilon, limits)
        for i in range(b):
            img_i, st, rep = _audited_choice(
                images[i], adv[i], good0, good0_steps, i, norms, info,
                spec, cost, bool(range_fine[i]),
            )
            if img_i is not None:
                adv[i] = img_i
                steps_used[i] = st
            reports_out.append(rep)
    preds = _predict(model, adv)
    success = _wrong(preds, labels, threat)
    return adv, preds, success, steps_used, reports_out, _TransportState(
        cur, duals, warmed)


def _audit_spec(epsilon, limits):
    rel = limits.w_over_rel + limits.w_over_abs / epsilon
    return BallSpec(epsilon=epsilon, wasserstein_tolerance=rel,
                    l1_tolerance=limits.delta_l1_tol)


def _audited_choice(original, adv, good0, good0_steps, i, norms, info, spec,
                    cost, range_fine):
    """Audit the final iterate; fall back to the previous compliant one,
    then to the original, when the audit fails.

    Returns (image, steps, report) with image None when adv stands as is.
    """
    rep = ball_membership(original, adv, spec, cost=cost)
    if rep.passed and range_fine:
        return None, None, rep
    _, c, h, w, channel_axis = info
    rows = slice(i * c, (i + 1) * c)
    pixels = good0[rows] * norms[rows][:, None]
    np.clip(pixels, 0.0, 1.0, out=pixels)
    prev = pixels.reshape(c, h, w)
    prev = np.moveaxis(prev, 0, 2) if channel_axis else prev[0]
    rep_prev = ball_membership(original, prev, spec, cost=cost)
    if rep_prev.passed:
        return prev, int(good0_steps[i]), rep_prev
    rep_orig = ball_membership(original, original, spec, cost=cost)
    return original.copy(), 0, rep_orig


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def attack_batch(model, images, labels, threat, cost=None, audit=False,
                 state=None, start=None):
    """Batched attack without per-image result wrapping.

    Returns (adversarial, predictions, success, steps_used, reports, state);
    reports is None unless audit=True, and state is None for lp threats
    (start, an image batch, resumes those instead). Adversarial training and
    the radius-grid evaluator both drive this entry point.
    """
    images = as_image_batch(images)
    labels = as_labels(labels, images.shape[0])
    if threat.kind == "wasserstein":
        return _run_wasserstein(model, images, labels, threat, cost,
                                audit=audit, state=state)
    adv, preds, success, steps = _run_lp(model, images, labels, threat,
                                         start=start)
    return adv, preds, success, steps, None, None


def pgd_attack(model, image, label, threat, cost=None):
    """Attack a single image; returns an AttackResult.

    The returned image always went through a compliance audit at the threat's
    thresholds; when every perturbed iterate fails it, the original image
    comes back and success reflects the model's clean prediction.
    """
    image = as_image(image)
    labels = np.array([int(label)], dtype=np.int64)
    batch = image[None]
    if threat.kind == "wasserstein":
        adv, preds, success, steps, reports, _ = _run_wasserstein(
            model, batch, labels, threat, cost, audit=True)
        rep = reports[0]
    else:
        adv, preds, success, steps = _run_lp(model, batch, labels, threat)
        rep = _lp_report(batch[0], adv[0], threat)
        if not rep.passed:
            # lp projections cannot overshoot; this only guards numerics.
            adv = batch.copy()
            steps = np.zeros(1, dtype=np.int64)
            rep = _lp_report(batch[0], adv[0], threat)
            success = _wrong(_predict(model, adv), labels, threat)
    return AttackResult(
        adversarial=adv[0],
        success=bool(success[0]),
        steps_used=int(steps[0]),
        budget_used=float(rep.w_estimate),
        compliance=rep,
    )


def evaluate_attack(model, dataset, threat, epsilon_grid, nested=False,
                    audit=False, return_details=False):
    """Accuracy after attack at each radius of the grid.

    dataset is an (images, labels) pair. epsilon_grid is in the threat's own
    epsilon units; the returned curve pairs each radius with the fraction of
    the dataset still classified correctly, the radius scaled to
    epsilon * n_pixel for transport threats (lp radii are reported as given).
    A zero radius means no attack, so the pair holds clean accuracy.
    nested=True resumes each radius from the previous radius's iterates (and
    duals, for transport threats) instead of starting fresh; with early
    stopping this makes accuracy non-increasing along the grid.
    return_details adds per-radius arrays: success, steps, and per-image
    audit reports when audit=True.
    """
    images, labels = dataset
    images = as_image_batch(images)
    labels = as_labels(labels, images.shape[0])
    grid = sorted(float(e) for e in epsilon_grid)
    if grid and grid[0] < 0:
        raise ValueError("radii must be nonnegative")
    n_pixel = images.shape[1] * images.shape[2]
    scale = n_pixel if threat.kind == "wasserstein" else 1.0

    cost = None
    if threat.kind == "wasserstein":
        cost = _grid_cost(images.shape[1], images.shape[2], threat)

    curve = []
    details = []
    state = None
    lp_start = None
    for eps in grid:
        if eps == 0.0:
            preds = _predict(model, images)
            acc = float((preds == labels).mean())
            curve.append((0.0, acc))
            details.append({"success": preds != labels,
                            "steps": np.zeros(len(labels), dtype=np.int64),
                            "audits": None})
            continue
        tk = replace(threat, epsilon=eps)
        adv, preds, success, steps, reports, state_out = attack_batch(
            model, images, labels, tk, cost=cost, audit=audit,
            state=state if nested else None,
            start=lp_start if nested else None,
        )
        if nested:
            state = state_out
            lp_start = adv
        acc = float((preds == labels).mean())
        curve.append((eps * scale, acc))
        details.append({"success": success, "steps": steps,
                        "audits": reports})
    if return_details:
        return curve, details
    return curve
