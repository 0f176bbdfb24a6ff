"""Seeded generators for the three benchmark designs, their closed-form
ground truths, and an independent Monte Carlo verifier for every closed form.

Designs (pattern probabilities in parentheses):

* "single": one primary, two auxiliaries, Gaussian strata (1/8 each).
* "multiple": two primaries, two auxiliaries, equicorrelated Gaussian strata
  (1/16 each); target is the product of the primaries.
* "mpm": one auxiliary, two primaries drawn jointly Gaussian, pattern
  probabilities depending on the auxiliary through a normalized exponential
  mechanism; target is the linear regression of the second primary on the
  first.

Misspecification flags never alter the generated data; they only produce
design-column masks for the analyst-side fits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Functional, build_strata
from .errors import ConfigError
from .estimators import compute_weights
from .glm import design_matrix
from .patterns import Pattern, PatternPair

KINDS = ("single", "multiple", "mpm")
MISSPEC = ("none", "odds", "outcome", "both")


def equicorr(k: int, rho: float = 0.5) -> np.ndarray:
    return (1 - rho) * np.eye(k) + rho * np.ones((k, k))


@dataclass(frozen=True)
class SimDesign:
    kind: str
    n: int
    seed: object = 0
    misspec: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown design kind {self.kind!r}")
        if self.misspec not in MISSPEC:
            raise ConfigError(f"unknown misspecification flag {self.misspec!r}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")


class OracleOdds:
    """Known odds function for one pattern pair; duck-compatible with the
    fitted models but carries no estimation metadata."""

    def __init__(self, pair: PatternPair, fn):
        self.pair = pair
        self._fn = fn

    def predict(self, xr, la) -> np.ndarray:
        out = self._fn(np.atleast_2d(xr), np.atleast_2d(la))
        return np.asarray(out, dtype=float) * np.ones(np.atleast_2d(xr).shape[0])


class OracleOutcome:
    def __init__(self, pair: PatternPair, fn):
        self.pair = pair
        self._fn = fn

    def predict(self, xr, la) -> np.ndarray:
        out = self._fn(np.atleast_2d(xr), np.atleast_2d(la))
        return np.asarray(out, dtype=float) * np.ones(np.atleast_2d(xr).shape[0])


@dataclass
class GroundTruth:
    kind: str
    theta_true: object
    odds: dict
    outcomes: dict
    functional: Functional | None
    describe: str = ""


def default_functional(kind: str) -> Functional:
    if kind == "single":
        return Functional("coordinate", (0,))
    if kind == "multiple":
        return Functional("product", (0, 1))
    return None  # mpm targets a score spec, not a mean functional


def generate(design: SimDesign) -> Dataset:
    """Draw a dataset per the design; byte-identical for equal seeds."""
    rng = np.random.default_rng(design.seed)
    n = design.n
    if design.kind == "single":
        return _generate_single(rng, n)
    if design.kind == "multiple":
        return _generate_multiple(rng, n)
    return _generate_mpm(rng, n)


_MU_SINGLE = {1: np.array([1.0]), 2: np.array([1.0, -1.0]), 3: np.array([0.0, -1.0, -1.0])}
_MU_MULTI_SIDE = {1: np.array([0.5]), 2: np.array([1.0, 1.0]), 3: np.array([1.0, 1.0, 1.0])}


def _chol(k):
    return np.linalg.cholesky(equicorr(k))


def _generate_single(rng, n) -> Dataset:
    cat = rng.integers(0, 8, n)          # a = cat // 4, r = cat % 4
    z = rng.standard_normal((n, 3))
    X = np.full((n, 2), np.nan)
    L = np.full((n, 1), np.nan)
    chols = {k: _chol(k) for k in (1, 2, 3)}
    for a in (0, 1):
        for r in range(4):
            rows = np.flatnonzero((cat // 4 == a) & (cat % 4 == r))
            if rows.size == 0:
                continue
            xidx = list(Pattern(r, 2).indices)
            if a == 1:
                dim = len(xidx) + 1
                vec = _MU_SINGLE[dim] + z[rows, :dim] @ chols[dim].T
                L[rows, 0] = vec[:, 0]
                if xidx:
                    X[np.ix_(rows, xidx)] = vec[:, 1:]
            elif xidx:
                dim = len(xidx)
                X[np.ix_(rows, xidx)] = _MU_SINGLE[dim] + z[rows, :dim] @ chols[dim].T
    return Dataset(X, L, ("Y1", "Y2"), ("Y3",))


def _generate_multiple(rng, n) -> Dataset:
    cat = rng.integers(0, 16, n)         # a = cat // 4, r = cat % 4
    z = rng.standard_normal((n, 4))
    X = np.full((n, 2), np.nan)
    L = np.full((n, 2), np.nan)
    chols = {k: _chol(k) for k in (1, 2, 3, 4)}
    for a in range(4):
        for r in range(4):
            rows = np.flatnonzero((cat // 4 == a) & (cat % 4 == r))
            if rows.size == 0:
                continue
            xidx = list(Pattern(r, 2).indices)
            lidx = list(Pattern(a, 2).indices)
            dim = len(xidx) + len(lidx)
            if dim == 0:
                continue
            mu = np.ones(dim) if a == 3 else _MU_MULTI_SIDE[dim]
            vec = mu + z[rows, :dim] @ chols[dim].T
            if lidx:
                L[np.ix_(rows, lidx)] = vec[:, : len(lidx)]
            if xidx:
                X[np.ix_(rows, xidx)] = vec[:, len(lidx):]
    return Dataset(X, L, ("Y1", "Y2"), ("Y3", "Y4"))


def _generate_mpm(rng, n) -> Dataset:
    z = rng.standard_normal((n, 3))
    vec = np.array([1.0, 0.0, -1.0]) + z @ _chol(3).T    # (X, L1, L2)
    x, Lfull = vec[:, 0], vec[:, 1:]
    e = np.exp(0.5 * x)
    p0 = 1.0 / (5.0 + 3.0 * e)
    p1 = e * p0
    # category order: (r=0, a=0..3) then (r=1, a=0..3)
    probs = np.column_stack([p0, p0, p0, p0, p1, p1, p1, p0])
    cum = np.cumsum(probs, axis=1)
    u = rng.random(n)
    cat = np.minimum((u[:, None] >= cum).sum(axis=1), 7)
    r, a = cat // 4, cat % 4
    X = np.where(r[:, None] == 1, vec[:, :1], np.nan)
    L = Lfull.copy()
    L[:, 0] = np.where((a == 2) | (a == 3), L[:, 0], np.nan)
    L[:, 1] = np.where((a == 1) | (a == 3), L[:, 1], np.nan)
    return Dataset(X, L, ("Y1",), ("Y2", "Y3"))


def _pair(kind, r, a) -> PatternPair:
    p, d = {"single": (2, 1), "multiple": (2, 2), "mpm": (1, 2)}[kind]
    return PatternPair(Pattern(r, p), Pattern(a, d))


def oracle_value(kind: str) -> GroundTruth:
    """Exact closed-form target plus oracle nuisance handles per pair."""
    if kind == "single":
        odds = {
            (0, 0): OracleOdds(_pair(kind, 0, 0), lambda x, l: 0.25),
            (1, 0): OracleOdds(_pair(kind, 1, 0), lambda x, l: 0.5 * np.exp(2.0 * x[:, 0])),
            (2, 0): OracleOdds(_pair(kind, 2, 0), lambda x, l: 0.5 * np.exp(2.0 * x[:, 0])),
            (3, 0): OracleOdds(
                _pair(kind, 3, 0),
                lambda x, l: np.exp(8.0 / 3.0 * x[:, 0] - 4.0 / 3.0 * x[:, 1] - 4.0 / 3.0),
            ),
        }
        outcomes = {
            (0, 0): OracleOutcome(_pair(kind, 0, 0), lambda x, l: 0.75),
            (1, 0): OracleOutcome(_pair(kind, 1, 0), lambda x, l: x[:, 0] / 2.0 + 1.0),
            (2, 0): OracleOutcome(_pair(kind, 2, 0), lambda x, l: x[:, 0] / 2.0 + 1.0),
            (3, 0): OracleOutcome(_pair(kind, 3, 0), lambda x, l: (x[:, 0] + x[:, 1]) / 3.0 + 2.0 / 3.0),
        }
        return GroundTruth(kind, 89.0 / 96.0, odds, outcomes, default_functional(kind), "E[L1] = 89/96")

    if kind == "multiple":
        half_slope = lambda v: 0.5 * np.exp(0.375 - v / 2.0)

        odds = {}
        for a in (1, 2):
            odds[(0, a)] = OracleOdds(_pair(kind, 0, a), lambda x, l: 0.25 * np.exp(0.375 - l[:, 0] / 2.0))
            odds[(1, a)] = OracleOdds(_pair(kind, 1, a), lambda x, l: 0.5)
            odds[(2, a)] = OracleOdds(_pair(kind, 2, a), lambda x, l: 0.5)
            odds[(3, a)] = OracleOdds(_pair(kind, 3, a), lambda x, l: 1.0)
        odds[(0, 0)] = OracleOdds(_pair(kind, 0, 0), lambda x, l: 0.25)
        odds[(1, 0)] = OracleOdds(_pair(kind, 1, 0), lambda x, l: half_slope(x[:, 0]))
        odds[(2, 0)] = OracleOdds(_pair(kind, 2, 0), lambda x, l: half_slope(x[:, 0]))
        odds[(3, 0)] = OracleOdds(_pair(kind, 3, 0), lambda x, l: 1.0)

        outcomes = {
            (0, 0): OracleOutcome(_pair(kind, 0, 0), lambda x, l: 1.5),
            (1, 0): OracleOutcome(_pair(kind, 1, 0), lambda x, l: 0.25 + (x[:, 0] / 2.0 + 0.5) ** 2),
            (2, 0): OracleOutcome(_pair(kind, 2, 0), lambda x, l: 0.25 + (x[:, 0] / 2.0 + 0.5) ** 2),
            (3, 0): OracleOutcome(
                _pair(kind, 3, 0), lambda x, l: 1.0 / 6.0 + (x[:, 0] + x[:, 1] + 1.0) ** 2 / 9.0
            ),
        }
        for a in (1, 2):
            outcomes[(0, a)] = OracleOutcome(_pair(kind, 0, a), lambda x, l: 0.5 * l[:, 0] * (l[:, 0] + 1.0))
            outcomes[(1, a)] = OracleOutcome(
                _pair(kind, 1, a), lambda x, l: l[:, 0] * (x[:, 0] + l[:, 0] + 1.0) / 3.0
            )
            outcomes[(2, a)] = OracleOutcome(
                _pair(kind, 2, a), lambda x, l: l[:, 0] * (x[:, 0] + l[:, 0] + 1.0) / 3.0
            )
            outcomes[(3, a)] = OracleOutcome(
                _pair(kind, 3, a), lambda x, l: l[:, 0] * (x[:, 0] + x[:, 1] + l[:, 0] + 1.0) / 4.0
            )
        return GroundTruth(kind, 175.0 / 128.0, odds, outcomes, default_functional(kind), "E[L1*L2] = 175/128")

    if kind == "mpm":
        odds = {}
        for a in (0, 1, 2):
            odds[(0, a)] = OracleOdds(_pair(kind, 0, a), lambda x, l: 0.5)
            odds[(1, a)] = OracleOdds(_pair(kind, 1, a), lambda x, l: np.exp(0.5 * x[:, 0]))
        return GroundTruth(
            kind, np.array([-1.0, 0.5]), odds, {}, None, "E[L2 | L1] = -1 + L1 / 2"
        )
    raise ConfigError(f"unknown design kind {kind!r}")


def misspec_masks(kind: str, family: str) -> dict:
    """Design-column keep masks implementing the benchmark misspecifications.

    family "odds": the named pairs are refitted intercept-only.
    family "outcome": the named pairs drop the listed covariates.
    """
    if family not in ("odds", "outcome"):
        raise ConfigError(f"unknown model family {family!r}")
    if kind == "single":
        # full auxiliary pattern: drop both covariates (odds) or the second (outcome)
        return {(3, 0): (False, False)} if family == "odds" else {(3, 0): (True, False)}
    if kind == "multiple":
        # the two single-primary strata with no auxiliaries: intercept-only fits
        return {(0, 1): (False,), (0, 2): (False,)}
    return {}


# ---------------------------------------------------------------------------
# independent Monte Carlo verification of every closed form above
# ---------------------------------------------------------------------------


@dataclass
class CheckRow:
    name: str
    value: float
    target: float
    se: float
    nsig: float
    ok: bool


@dataclass
class OracleReport:
    kind: str
    n: int
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def summary(self) -> str:
        lines = [f"oracle verification for design {self.kind!r} at n={self.n}"]
        for r in self.rows:
            tag = "ok " if r.ok else "FAIL"
            lines.append(
                f"  [{tag}] {r.name}: value={r.value:.6g} target={r.target:.6g} "
                f"se={r.se:.3g} ({r.nsig:.2f} MC SEs)"
            )
        return "\n".join(lines)


def _check(rows, name, value, target, se, max_sig=4.0):
    se = max(se, 1e-300)
    nsig = abs(value - target) / se
    rows.append(CheckRow(name, float(value), float(target), float(se), float(nsig), bool(nsig <= max_sig)))


def _mean_check(rows, name, values, n, target):
    # values live on a subset of records; the rest contribute exact zeros
    mean = values.sum() / n
    var = (values**2).sum() / n - mean**2
    _check(rows, name, mean, target, np.sqrt(max(var, 0.0) / n))


def verify_oracles(design: SimDesign, n_big: int | None = None, seed=None) -> OracleReport:
    """Re-derive every closed form on a large sample and flag discrepancies
    beyond 4 Monte Carlo standard errors.

    Odds and regression functions are checked through exact moment
    identities: for any g, the case-stratum mean of g must match the
    odds-weighted pool mean of g, and regression residuals on the pool must
    be orthogonal to g.  Targets are checked by plugging the oracle functions
    into the weighting and regression identification formulas directly.
    """
    n_big = n_big if n_big is not None else design.n
    if n_big < 10**5:
        raise ConfigError(f"verify_oracles needs n_big >= 1e5, got {n_big}")
    ds = generate(SimDesign(design.kind, n_big, design.seed if seed is None else seed))
    strata = build_strata(ds)
    truth = oracle_value(design.kind)
    report = OracleReport(kind=design.kind, n=n_big)
    rows = report.rows
    n = ds.n

    if design.kind in ("single", "multiple"):
        p_target = 1.0 / 8.0 if design.kind == "single" else 1.0 / 16.0
        for pr in strata.pairs():
            count = strata.stratum(pr).size
            se = np.sqrt(p_target * (1 - p_target) / n)
            _check(rows, f"P(R={pr.r},A={pr.a})", count / n, p_target, se)

    # odds moment identities: E[g I(case)] = E[O g I(pool)]
    for key in sorted(truth.odds):
        model = truth.odds[key]
        pr = model.pair
        case = strata.stratum(pr)
        pool = strata.pool(pr.r)
        if case.size == 0 or pool.size == 0:
            continue
        Zc, names = design_matrix(ds, case, pr)
        Zp, _ = design_matrix(ds, pool, pr)
        ovals = model.predict(ds.x_block(pool, pr.r), ds.l_block(pool, pr.a))
        for j, nm in enumerate(names):
            vals = np.concatenate([Zc[:, j], -ovals * Zp[:, j]])
            _mean_check(rows, f"odds {pr} moment[{nm}]", vals, n, 0.0)

    # regression orthogonality: E[(f - m) g I(pool)] = 0
    f = truth.functional
    for key in sorted(truth.outcomes):
        model = truth.outcomes[key]
        pr = model.pair
        pool = strata.pool(pr.r)
        if pool.size == 0:
            continue
        Zp, names = design_matrix(ds, pool, pr)
        resid = f(ds.L[pool]) - model.predict(ds.x_block(pool, pr.r), ds.l_block(pool, pr.a))
        for j, nm in enumerate(names):
            _mean_check(rows, f"regression {pr} orth[{nm}]", resid * Zp[:, j], n, 0.0)

    if design.kind == "multiple":
        # pointwise windows for the richest pool regression
        pr = _pair("multiple", 3, 0)
        model = truth.outcomes[(3, 0)]
        pool = strata.pool(pr.r)
        xp = ds.x_block(pool, pr.r)
        resid = f(ds.L[pool]) - model.predict(xp, ds.l_block(pool, pr.a))
        for c in (0.5, 1.0, 1.5):
            g = ((np.abs(xp[:, 0] - c) <= 0.25) & (np.abs(xp[:, 1] - c) <= 0.25)).astype(float)
            _mean_check(rows, f"regression {pr} window@{c}", resid * g, n, 0.0)

    if design.kind in ("single", "multiple"):
        # target through the weighting identity with oracle odds
        wt = compute_weights(ds, strata, truth.odds)
        v = np.zeros(n)
        v[wt.rows] = f(ds.L[wt.rows]) * wt.total
        _mean_check(rows, "theta via oracle weights", v, n, truth.theta_true)
        # target through the regression identity with oracle outcomes
        v = np.zeros(n)
        complete = np.flatnonzero(ds.complete_mask)
        v[complete] = f(ds.L[complete])
        for pr in strata.incomplete_pairs():
            srows = strata.stratum(pr)
            v[srows] = truth.outcomes[pr.key].predict(ds.x_block(srows, pr.r), ds.l_block(srows, pr.a))
        _mean_check(rows, "theta via oracle regressions", v, n, truth.theta_true)

    if design.kind == "mpm":
        complete = ds.complete_mask
        # incomplete-vs-complete mass ratios implied by the mechanism:
        # E[g I(R=0, A=a)] = 1/2 E[g I(A=1_d)]             for g of L_a
        # E[g I(R=1, A=a)] = E[exp(x/2) g I(R=1, A=1_d)]   for g of (X, L_a)
        for a in (0, 1, 2):
            for rv in (0, 1):
                pr = _pair("mpm", rv, a)
                case = strata.stratum(pr)
                if case.size == 0:
                    continue
                if rv == 0:
                    ref = np.flatnonzero(complete)
                    wref = np.full(ref.size, 0.5)
                else:
                    ref = np.flatnonzero(complete & (ds.r_codes == 1))
                    wref = np.exp(0.5 * ds.X[ref, 0])
                la_case, la_ref = ds.l_block(case, pr.a), ds.l_block(ref, pr.a)
                pairs_g = [(np.ones(case.size), np.ones(ref.size))]
                pairs_g += [(la_case[:, j], la_ref[:, j]) for j in range(la_case.shape[1])]
                if rv == 1:
                    pairs_g.append((ds.X[case, 0], ds.X[ref, 0]))
                for j, (g_case, g_ref) in enumerate(pairs_g):
                    vals = np.concatenate([g_case, -wref * g_ref])
                    _mean_check(rows, f"mechanism {pr} moment[{j}]", vals, n, 0.0)
        # regression target through the oracle-weighted estimating equation
        from .mpm import ScoreSpec, sandwich_variance, solve_weighted_ee

        spec = ScoreSpec("linear", response=1, predictors=(0,))
        est = solve_weighted_ee(ds, strata, truth.odds, spec)
        cov = sandwich_variance(ds, strata, truth.odds, spec, est.theta_hat)
        for j, nm in enumerate(est.coef_names):
            _check(rows, f"beta[{nm}] via oracle weights", est.theta_hat[j], truth.theta_true[j], np.sqrt(cov[j, j]))

    return report
