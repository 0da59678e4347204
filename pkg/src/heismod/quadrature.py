"""Adaptive panel quadrature that tolerates integrable endpoint blowups.

The workhorse is a 7/15 Gauss-Kronrod pair on panels.  All nodes are
strictly interior, so the integrand is never sampled at an interval
endpoint.  An endpoint flagged as (possibly) singular gets a ladder of
geometrically shrinking cells; for an integrand growing like u**beta
(beta > -1, measured from the endpoint) the cell masses decay
geometrically, and the mass hiding between the innermost cell and the
endpoint is recovered by iterated Aitken extrapolation of the running
cell sums.  Plain bisection cannot do this in float64: panel boundaries
within rounding distance of a non-zero endpoint stop moving long before
the unresolved mass drops below useful tolerances.

Singularities stronger than about u**-0.95 are rejected rather than
mis-integrated (the cell-mass ratio guard), as is anything whose cell
masses refuse to decay, e.g. 1/u.

Batch calls share one panel subdivision across all integrand columns;
refinement is driven by whichever column is furthest from its own
tolerance.  Node positions inside a ladder are computed as exact dyadic
offsets from the endpoint, never by subtracting nearly equal floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergent

_EPS = float(np.finfo(np.float64).eps)

# 7-point Gauss / 15-point Kronrod pair on [-1, 1].
_XK_HALF = np.array([
    0.991455371120813, 0.949107912342759, 0.864864423359769,
    0.741531185599394, 0.586087235467691, 0.405845151377397,
    0.207784955007898, 0.0])
_WK_HALF = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728])
_WG_HALF = np.array([
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469])

_NODES = np.concatenate((-_XK_HALF[:7], _XK_HALF[::-1]))   # ascending, 15
_WK = np.concatenate((_WK_HALF[:7], _WK_HALF[::-1]))
_WG15 = np.zeros(15)
_WG15[1:14:2] = np.concatenate((_WG_HALF[:3], _WG_HALF[::-1]))

_RATIO_CEILING = 0.97      # cell-mass decay slower than this is hopeless
_AITKEN_TERMS = 10
_AITKEN_PASSES = 4


@dataclass
class QuadResult:
    """Integral values per column with absolute error estimates."""

    value: np.ndarray      # (m,) complex128
    error: np.ndarray      # (m,) float64
    n_evals: int


def integrate_1d(f, a, b, **kwargs):
    """Integrate a vectorized scalar integrand, returning (value, error).

    `f` maps an (n,) array of positions to (n,) values.  All keyword
    arguments of `integrate_batch` are accepted.
    """
    res = integrate_batch(lambda x: np.asarray(f(x))[:, None], a, b, **kwargs)
    return complex(res.value[0]), float(res.error[0])


class _Panels:
    """Panel bookkeeping.  Offsets are measured from an anchor endpoint
    (0 -> a + off, 1 -> b - off) so ladder nodes never lose precision to
    cancellation; widths stay exact under halving."""

    def __init__(self, a, b):
        self.a, self.b = a, b
        self.olo = np.empty(0)
        self.ohi = np.empty(0)
        self.anc = np.empty(0, np.int8)
        self.side = np.empty(0, np.int8)    # -1 left ladder, 0 mid, 1 right
        self.cell = np.empty(0, np.int32)
        self.vals = None                    # (n, m) complex
        self.errs = None                    # (n, m) float

    def positions(self, olo, ohi, anc):
        mid = 0.5 * (olo + ohi)
        hw = 0.5 * (ohi - olo)
        off = mid[:, None] + hw[:, None] * _NODES[None, :]
        return np.where(anc[:, None] == 0, self.a + off, self.b - off)


def _panel_rule(fx, hw):
    """Kronrod value and scaled error estimate per panel and column.

    fx: (n, 15, m) complex at the nodes; hw: (n,) half-widths.
    """
    i15 = np.einsum("pnc,n->pc", fx, _WK) * hw[:, None]
    i7 = np.einsum("pnc,n->pc", fx, _WG15) * hw[:, None]
    fabs = np.abs(fx)
    resasc = np.einsum("pnc,n->pc",
                       np.abs(fx - (i15 / (2.0 * hw[:, None]))[:, None, :]),
                       _WK) * hw[:, None]
    diff = np.abs(i15 - i7)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = resasc * np.minimum(
            1.0, (200.0 * diff / np.where(resasc > 0, resasc, 1.0)) ** 1.5)
    err = np.where(resasc > 0, scaled, diff)
    ok = np.isfinite(fabs).all(axis=1)
    i15 = np.where(ok, i15, 0.0)
    err = np.where(ok, err, np.inf)
    return i15, err


def _aitken(seq, scale):
    """Iterated Aitken acceleration.  Returns (limit, final-pass spread)."""
    cur = seq
    for _ in range(_AITKEN_PASSES):
        if cur.size < 3:
            break
        d1 = np.diff(cur)
        d2 = np.diff(d1)
        good = np.abs(d2) > 64.0 * _EPS * scale
        if not good.any():
            break
        stop = len(d2) if good.all() else int(np.argmin(good))
        if stop == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            cur = cur[2:stop + 2] - d1[1:stop + 1] ** 2 / d2[:stop]
    spread = abs(cur[-1] - cur[-2]) if cur.size >= 2 else 0.0
    return cur[-1], spread


def _tail_limit(cells, noise, strict=True):
    """Estimate the full ladder mass (including the unsampled cap) from
    per-cell sums ordered outermost first.  Returns (limit, uncertainty).

    Pure power behavior makes the running sums a geometric sequence, which
    one Aitken pass resolves exactly; corrections to the leading power add
    further transients that extra passes absorb.  The uncertainty combines
    the final pass spread with the limit's sensitivity to dropping the two
    oldest input terms.
    """
    total = cells.sum()
    last = abs(cells[-1])
    if last <= noise:
        return total, last
    mags = np.abs(cells[-6:])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = mags[1:] / np.where(mags[:-1] > 0, mags[:-1], np.inf)
    med = float(np.median(ratios))
    if med >= _RATIO_CEILING:
        if not strict:
            return total, np.inf
        raise NonConvergent(
            "endpoint cell masses decay too slowly "
            f"(ratio {med:.3f}); singularity is not integrable enough")
    partial = np.cumsum(cells)
    scale = max(np.abs(partial).max(), noise)
    limit, spread = _aitken(partial[-_AITKEN_TERMS:], scale)
    alt, _ = _aitken(partial[-(_AITKEN_TERMS - 2):], scale)
    unc = spread + abs(limit - alt) + 16.0 * _EPS * scale
    return limit, unc


def integrate_batch(f, a, b, *, atol=1e-10, rtol=1e-8, singular=(True, True),
                    ladder_levels=30, ladder_frac=0.25, initial_panels=8,
                    max_panels=4096, max_rounds=48, aux_cols=0,
                    best_effort=False):
    """Integrate columns of `f` over [a, b] with a shared adaptive mesh.

    Parameters
    ----------
    f : callable mapping (n,) positions to (n, m) values (or (n,) for a
        single column).
    singular : pair of bools; flag an endpoint to enable its geometric
        ladder and tail extrapolation.  Unflagged endpoints are handled
        by ordinary bisection, which assumes the integrand is smooth
        enough there.
    atol, rtol : per-column convergence is err <= atol + rtol*|value|.
    aux_cols : the last `aux_cols` columns ride along on the shared mesh
        (useful for error-propagation channels) but are excluded from
        the convergence test and from refinement scoring.
    best_effort : return the result with its honest (possibly large)
        error estimates instead of raising NonConvergent.  Meant for
        inner stages of nested integration whose values are weighted by
        an enclosing quadrature: evaluation noise near a degenerate
        point then shows up as a large error bound on a value of tiny
        weight rather than aborting the whole computation.  An
        unresolvable ladder tail still yields an infinite error bound.

    Returns
    -------
    QuadResult

    Raises
    ------
    NonConvergent
        If tolerances cannot be met, the integrand keeps producing
        non-finite values, or an endpoint singularity is too strong
        (suppressed by `best_effort`).
    """
    a, b = float(a), float(b)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("integration bounds must be finite")
    if a == b:
        raise ValueError("degenerate integration interval")
    sign = 1.0
    if b < a:
        a, b = b, a
        sign = -1.0
        singular = (singular[1], singular[0])
    span = b - a
    sing_l, sing_r = bool(singular[0]), bool(singular[1])

    ps = _Panels(a, b)
    n_evals = 0

    def build_initial():
        olo, ohi, anc, side, cell = [], [], [], [], []
        ll = span * ladder_frac if sing_l else 0.0
        lr = span * ladder_frac if sing_r else 0.0
        for flag, width, anchor, sd in ((sing_l, ll, 0, -1),
                                        (sing_r, lr, 1, 1)):
            if not flag:
                continue
            hi = width
            for k in range(ladder_levels):
                lo = hi * 0.5
                olo.append(lo)
                ohi.append(hi)
                anc.append(anchor)
                side.append(sd)
                cell.append(k)
                hi = lo
        mid_w = span - ll - lr
        step = mid_w / initial_panels
        for j in range(initial_panels):
            olo.append(ll + j * step)
            ohi.append(ll + (j + 1) * step if j < initial_panels - 1
                       else span - lr)
            anc.append(0)
            side.append(0)
            cell.append(-1)
        return (np.array(olo), np.array(ohi), np.array(anc, np.int8),
                np.array(side, np.int8), np.array(cell, np.int32))

    def eval_and_append(olo, ohi, anc, side, cell):
        nonlocal n_evals
        pos = ps.positions(olo, ohi, anc)
        n_evals += pos.size
        with np.errstate(all="ignore"):
            fx = np.asarray(f(pos.ravel()))
        if fx.ndim == 0:
            # constant integrand: expand to one full column
            fx = np.full(pos.size, complex(fx))
        if fx.ndim == 1:
            fx = fx[:, None]
        m = fx.shape[-1]
        fx = fx.astype(np.complex128, copy=False).reshape(len(olo), 15, m)
        vals, errs = _panel_rule(fx, 0.5 * (ohi - olo))
        ps.olo = np.concatenate((ps.olo, olo))
        ps.ohi = np.concatenate((ps.ohi, ohi))
        ps.anc = np.concatenate((ps.anc, anc))
        ps.side = np.concatenate((ps.side, side))
        ps.cell = np.concatenate((ps.cell, cell))
        if ps.vals is None:
            ps.vals, ps.errs = vals, errs
        else:
            ps.vals = np.concatenate((ps.vals, vals))
            ps.errs = np.concatenate((ps.errs, errs))

    eval_and_append(*build_initial())
    if aux_cols and ps.vals.shape[1] <= aux_cols:
        raise ValueError("aux_cols must be fewer than the integrand columns")
    width_floor = 32.0 * _EPS * max(1.0, abs(a), abs(b))
    rounds = 0

    def targets():
        value = ps.vals.sum(axis=0)
        return value, atol + rtol * np.abs(value)

    def main_cols(arr):
        return arr[..., :arr.shape[-1] - aux_cols] if aux_cols else arr

    def refine_to(budget_frac):
        nonlocal rounds
        stall = 0
        prev_excess = None
        while rounds < max_rounds and len(ps.olo) < max_panels:
            value, tgt = (main_cols(x) for x in targets())
            perr = main_cols(ps.errs.sum(axis=0))
            failing = perr > budget_frac * tgt
            if not failing.any():
                return True
            excess = float(np.minimum(
                np.maximum(perr - budget_frac * tgt, 0.0), 1e300).sum())
            # splitting panels cannot beat an evaluation-noise floor;
            # two consecutive rounds without real progress mean the
            # residual error is noise, not unresolved structure
            if prev_excess is not None and excess > 0.9 * prev_excess:
                stall += 1
                if stall >= 2:
                    return False
            else:
                stall = 0
            prev_excess = excess
            nscore = (main_cols(ps.errs)[:, failing] / tgt[failing]).max(axis=1)
            splittable = (ps.ohi - ps.olo) > width_floor
            nscore = np.where(splittable, nscore, 0.0)
            top = nscore.max()
            if top <= 0.0:
                return False
            pick = nscore >= 0.25 * top
            room = max_panels - len(ps.olo)
            if room <= 0:
                return False
            if pick.sum() > room:
                order = np.argsort(nscore)[::-1]
                keep = order[:room]
                pick = np.zeros_like(pick)
                pick[keep] = True
            idx = np.flatnonzero(pick)
            if idx.size == 0:
                return False
            lo, hi = ps.olo[idx], ps.ohi[idx]
            mid = 0.5 * (lo + hi)
            olo = np.concatenate((lo, mid))
            ohi = np.concatenate((mid, hi))
            anc = np.tile(ps.anc[idx], 2)
            side = np.tile(ps.side[idx], 2)
            cell = np.tile(ps.cell[idx], 2)
            keep_mask = ~pick
            ps.olo, ps.ohi = ps.olo[keep_mask], ps.ohi[keep_mask]
            ps.anc, ps.side = ps.anc[keep_mask], ps.side[keep_mask]
            ps.cell = ps.cell[keep_mask]
            ps.vals, ps.errs = ps.vals[keep_mask], ps.errs[keep_mask]
            eval_and_append(olo, ohi, anc, side, cell)
            rounds += 1
        value, tgt = (main_cols(x) for x in targets())
        return not (main_cols(ps.errs.sum(axis=0)) > budget_frac * tgt).any()

    def finalize():
        value, tgt = targets()
        value = value.astype(np.complex128, copy=True)
        error = ps.errs.sum(axis=0).astype(float)
        m = ps.vals.shape[1]
        for sd in (-1, 1):
            if (sd == -1 and not sing_l) or (sd == 1 and not sing_r):
                continue
            mask = ps.side == sd
            cells = np.zeros((ladder_levels, m), np.complex128)
            np.add.at(cells, ps.cell[mask], ps.vals[mask])
            for c in range(m):
                # aux channels (error bookkeeping) may legitimately have
                # non-integrable-looking tails; keep their partial sums
                lim, unc = _tail_limit(cells[:, c], 1e-3 * tgt[c],
                                       strict=(not best_effort
                                               and c < m - aux_cols))
                if not np.isfinite(unc) and c >= m - aux_cols:
                    lim, unc = cells[:, c].sum(), 0.0
                value[c] += lim - cells[:, c].sum()
                error[c] += unc
        return value, error

    for budget in (0.5, 0.1):
        refine_to(budget)
        value, error = finalize()
        tgt = atol + rtol * np.abs(value)
        if not (main_cols(error) > main_cols(tgt)).any():
            return QuadResult(sign * value, error, n_evals)
    if best_effort:
        return QuadResult(sign * value, error, n_evals)
    ratio = main_cols(error) / np.maximum(main_cols(tgt), 1e-300)
    bad = int(np.argmax(ratio))
    raise NonConvergent(
        f"column {bad}: error estimate {error[bad]:.3e} exceeds "
        f"tolerance {tgt[bad]:.3e} after {len(ps.olo)} panels")
