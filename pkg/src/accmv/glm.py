"""Per-pattern nuisance models.

Two families, both on the design (1, x_r, l_a):

* logistic odds models  O(x_r, l_a) = exp(alpha . (1, x_r, l_a)), fitted by
  comparing the case stratum (R = r, A = a) against its pool (R >= r, A all
  observed) with Newton-Raphson on the exact binary log-likelihood;
* linear outcome regressions m(x_r, l_a) = beta . (1, x_r, l_a), fitted by
  least squares on the pool.

Both retain the normalizing matrices needed to evaluate per-record influence
contributions of the estimated coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Functional, StratumIndex
from .errors import (
    NonConvergenceError,
    PositivityError,
    SeparationError,
    SingularityError,
    SmallStratumError,
)
from .patterns import PatternPair

LINPRED_CLAMP = 30.0
SEPARATION_BOUND = 30.0
SCORE_TOL = 1e-8
MAX_ITER = 100
DEFAULT_N_MIN = 10


def design_matrix(ds: Dataset, rows, pair: PatternPair, keep=None):
    """Design (1, x_r, l_a) for the given record positions.

    `keep` optionally masks non-intercept columns; the intercept always stays.
    Raises if any requested covariate is unobserved (precondition guard).
    """
    rows = np.asarray(rows, dtype=int)
    cov = np.hstack([ds.x_block(rows, pair.r), ds.l_block(rows, pair.a)])
    names = [ds.x_names[j] for j in pair.r.indices] + [ds.l_names[j] for j in pair.a.indices]
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape[0] != cov.shape[1]:
            raise ValueError(f"keep mask length {keep.shape[0]} != {cov.shape[1]} covariates")
        cov = cov[:, keep]
        names = [nm for nm, k in zip(names, keep) if k]
    if np.isnan(cov).any():
        raise ValueError(f"unobserved covariate in design for {pair}")
    Z = np.hstack([np.ones((cov.shape[0], 1)), cov])
    return Z, ("intercept", *names)


def _clamped_eta(Z, coef):
    return np.clip(Z @ coef, -LINPRED_CLAMP, LINPRED_CLAMP)


def odds_negloglik(alpha, Z, y, n_total):
    """Mean negative log-likelihood of the case-vs-pool logistic model."""
    eta = _clamped_eta(Z, alpha)
    # log(1 + exp(eta)) computed stably
    lse = np.logaddexp(0.0, eta)
    return -(y @ eta - lse.sum()) / n_total


def odds_score_hessian(alpha, Z, y, n_total):
    """Exact analytic score and Hessian of the mean log-likelihood."""
    eta = _clamped_eta(Z, alpha)
    p = 1.0 / (1.0 + np.exp(-eta))
    score = Z.T @ (y - p) / n_total
    W = p * (1.0 - p)
    hess = -(Z.T * W) @ Z / n_total
    return score, hess


@dataclass
class OddsModel:
    """Fitted logistic odds for one pattern pair."""

    pair: PatternPair
    alpha: np.ndarray
    names: tuple[str, ...]
    converged: bool
    n_case: int
    n_pool: int
    info: np.ndarray                 # (1/n) sum of weighted design outer products at alpha
    keep: tuple | None = None
    n_iter: int = 0
    nll_path: list = field(default_factory=list)

    def linpred(self, xr, la) -> np.ndarray:
        cov = np.hstack([np.atleast_2d(xr), np.atleast_2d(la)])
        if self.keep is not None:
            cov = cov[:, np.asarray(self.keep, dtype=bool)]
        return self.alpha[0] + cov @ self.alpha[1:]

    def predict(self, xr, la) -> np.ndarray:
        """Odds values, positive, overflow-guarded."""
        return np.exp(np.clip(self.linpred(xr, la), -LINPRED_CLAMP, LINPRED_CLAMP))

    def to_text(self) -> str:
        lines = [
            f"odds-model r={self.pair.r} a={self.pair.a}",
            f"  converged: {str(self.converged).lower()}  iterations: {self.n_iter}",
            f"  n_case: {self.n_case}  n_pool: {self.n_pool}",
        ]
        for nm, v in zip(self.names, self.alpha):
            lines.append(f"  coef {nm} = {v!r}")
        return "\n".join(lines)


@dataclass
class OutcomeModel:
    """Fitted least-squares outcome regression for one pattern pair.

    When `scale_coords` is nonempty the fit regressed the product of the
    unobserved target coordinates on the design and prediction multiplies the
    affine part by the observed target coordinates (used for product
    functionals where part of the product is observed in the stratum).
    """

    pair: PatternPair
    beta: np.ndarray
    names: tuple[str, ...]
    n_pool: int
    n_total: int
    gram: np.ndarray                 # (1/n) sum over pool of design outer products
    residual_variance: float
    keep: tuple | None = None
    resp_coord: int | None = None    # L coordinate regressed on; None means f(L)
    scale_coords: tuple[int, ...] = ()

    def _affine(self, xr, la) -> np.ndarray:
        cov = np.hstack([np.atleast_2d(xr), np.atleast_2d(la)])
        if self.keep is not None:
            cov = cov[:, np.asarray(self.keep, dtype=bool)]
        return self.beta[0] + cov @ self.beta[1:]

    def scale_values(self, la, a_pattern) -> np.ndarray:
        """Product of the observed target coordinates, 1 when there are none."""
        la = np.atleast_2d(la)
        if not self.scale_coords:
            return np.ones(la.shape[0])
        pos = [a_pattern.indices.index(c) for c in self.scale_coords]
        return la[:, pos].prod(axis=1)

    def predict(self, xr, la) -> np.ndarray:
        return self._affine(xr, la) * self.scale_values(la, self.pair.a)

    def to_text(self) -> str:
        resp = f"L{self.resp_coord + 1}" if self.resp_coord is not None else "f(L)"
        lines = [
            f"outcome-model r={self.pair.r} a={self.pair.a}  response: {resp}",
            f"  n_pool: {self.n_pool}  residual_variance: {self.residual_variance!r}",
        ]
        if self.scale_coords:
            lines.append(f"  scaled by: {'*'.join(f'L{c+1}' for c in self.scale_coords)}")
        for nm, v in zip(self.names, self.beta):
            lines.append(f"  coef {nm} = {v!r}")
        return "\n".join(lines)


def fit_odds(
    ds: Dataset,
    strata: StratumIndex,
    pair: PatternPair,
    n_min: int = DEFAULT_N_MIN,
    keep=None,
    max_iter: int = MAX_ITER,
    tol: float = SCORE_TOL,
) -> OddsModel:
    """Fit the odds model for one pattern pair by Newton with step halving."""
    case = strata.stratum(pair)
    pool = strata.pool(pair.r)
    if pool.size == 0:
        raise PositivityError(f"empty pool for {pair}: no records with R >= {pair.r} and complete primaries")
    if case.size < n_min or pool.size < n_min:
        raise SmallStratumError(
            f"{pair}: case stratum has {case.size} and pool has {pool.size} records, need >= {n_min}"
        )
    rows = np.concatenate([case, pool])
    y = np.concatenate([np.ones(case.size), np.zeros(pool.size)])
    Z, names = design_matrix(ds, rows, pair, keep)
    n = ds.n

    alpha = np.zeros(Z.shape[1])
    nll = odds_negloglik(alpha, Z, y, n)
    nll_path = [nll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score, hess = odds_score_hessian(alpha, Z, y, n)
        if np.max(np.abs(score)) <= tol:
            converged = True
            # one polishing step: quadratic convergence leaves the score near
            # machine precision, keeping downstream influence means tiny
            try:
                polish = alpha + np.linalg.solve(-hess, score)
            except np.linalg.LinAlgError:
                break
            if odds_negloglik(polish, Z, y, n) <= nll + 1e-14 * (1.0 + abs(nll)):
                alpha = polish
            break
        try:
            step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            raise SingularityError(f"{pair}: singular Hessian in odds fit (collinear or separated design)")
        lam = 1.0
        accepted = False
        for _ in range(40):
            cand = alpha + lam * step
            cand_nll = odds_negloglik(cand, Z, y, n)
            if cand_nll <= nll + 1e-14 * (1.0 + abs(nll)):
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        alpha, nll = cand, cand_nll
        nll_path.append(nll)
        if np.max(np.abs(alpha)) > SEPARATION_BOUND:
            score, _ = odds_score_hessian(alpha, Z, y, n)
            if np.max(np.abs(score)) > tol:
                raise SeparationError(
                    f"{pair}: coefficient magnitude exceeded {SEPARATION_BOUND} with unconverged "
                    "score; case and pool look separable"
                )
    if not converged:
        score, _ = odds_score_hessian(alpha, Z, y, n)
        if np.max(np.abs(score)) <= tol:
            converged = True
        elif np.max(np.abs(alpha)) > SEPARATION_BOUND:
            raise SeparationError(f"{pair}: separation detected after {it} iterations")
        else:
            raise NonConvergenceError(
                f"{pair}: odds fit not converged after {it} iterations "
                f"(score max {np.max(np.abs(score)):.3e})",
                last_iterate=alpha,
            )
    if np.max(np.abs(Z @ alpha)) >= LINPRED_CLAMP:
        raise SeparationError(f"{pair}: linear predictor clamped at the solution; treating as separation")

    eta = Z @ alpha
    p = 1.0 / (1.0 + np.exp(-eta))
    info = (Z.T * (p * (1.0 - p))) @ Z / n
    return OddsModel(
        pair=pair,
        alpha=alpha,
        names=names,
        converged=converged,
        n_case=int(case.size),
        n_pool=int(pool.size),
        info=info,
        keep=tuple(keep) if keep is not None else None,
        n_iter=it,
        nll_path=nll_path,
    )


def fit_outcome(
    ds: Dataset,
    strata: StratumIndex,
    pair: PatternPair,
    f: Functional,
    n_min: int = DEFAULT_N_MIN,
    keep=None,
    decompose: bool = False,
) -> OutcomeModel:
    """Least-squares outcome regression on the pool of a pattern pair.

    With decompose=True and a product functional whose factors are all but
    one observed in the stratum, the remaining factor is regressed on the
    design and predictions multiply back the observed factors.
    """
    pool = strata.pool(pair.r)
    if pool.size == 0:
        raise PositivityError(f"empty pool for {pair}")
    if pool.size < n_min:
        raise SmallStratumError(f"{pair}: pool has {pool.size} records, need >= {n_min}")

    resp_coord = None
    scale_coords: tuple[int, ...] = ()
    if decompose and f.kind == "product":
        observed = set(pair.a.indices)
        missing = sorted(set(f.coords) - observed)
        present = tuple(sorted(set(f.coords) & observed))
        if len(missing) == 1 and present:
            resp_coord = missing[0]
            scale_coords = present

    rho = ds.L[pool, resp_coord] if resp_coord is not None else f(ds.L[pool])
    Z, names = design_matrix(ds, pool, pair, keep)
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise SingularityError(f"{pair}: rank-deficient outcome design on the pool")
    beta, _, _, _ = np.linalg.lstsq(Z, rho, rcond=None)
    resid = rho - Z @ beta
    dof = pool.size - Z.shape[1]
    return OutcomeModel(
        pair=pair,
        beta=beta,
        names=names,
        n_pool=int(pool.size),
        n_total=ds.n,
        gram=Z.T @ Z / ds.n,
        residual_variance=float(resid @ resid / dof) if dof > 0 else 0.0,
        keep=tuple(keep) if keep is not None else None,
        resp_coord=resp_coord,
        scale_coords=scale_coords,
    )


def psi_odds(model: OddsModel, ds: Dataset, strata: StratumIndex) -> np.ndarray:
    """Per-record influence contributions to the fitted odds coefficients,
    shape (n, k); zero rows outside the case stratum and pool."""
    case = strata.stratum(model.pair)
    pool = strata.pool(model.pair.r)
    rows = np.concatenate([case, pool])
    y = np.concatenate([np.ones(case.size), np.zeros(pool.size)])
    Z, _ = design_matrix(ds, rows, model.pair, model.keep)
    p = 1.0 / (1.0 + np.exp(-_clamped_eta(Z, model.alpha)))
    contrib = Z * (y - p)[:, None]
    out = np.zeros((ds.n, model.alpha.size))
    try:
        out[rows] = np.linalg.solve(model.info, contrib.T).T
    except np.linalg.LinAlgError:
        raise SingularityError(f"{model.pair}: singular information matrix")
    return out


def psi_outcome(model: OutcomeModel, ds: Dataset, strata: StratumIndex, f: Functional) -> np.ndarray:
    """Per-record influence contributions to the fitted regression
    coefficients, shape (n, k); zero rows outside the pool."""
    pool = strata.pool(model.pair.r)
    Z, _ = design_matrix(ds, pool, model.pair, model.keep)
    rho = ds.L[pool, model.resp_coord] if model.resp_coord is not None else f(ds.L[pool])
    resid = rho - Z @ model.beta
    out = np.zeros((ds.n, model.beta.size))
    try:
        out[pool] = np.linalg.solve(model.gram, (Z * resid[:, None]).T).T
    except np.linalg.LinAlgError:
        raise SingularityError(f"{model.pair}: singular design gram matrix")
    return out


def fit_all_odds(ds, strata, n_min: int = DEFAULT_N_MIN, keep: dict | None = None) -> dict:
    """Odds models for every pattern pair present with incomplete primaries,
    keyed by (r_value, a_value)."""
    keep = keep or {}
    return {
        pr.key: fit_odds(ds, strata, pr, n_min=n_min, keep=keep.get(pr.key))
        for pr in strata.incomplete_pairs()
    }


def fit_all_outcomes(
    ds, strata, f, n_min: int = DEFAULT_N_MIN, keep: dict | None = None, decompose: bool = False
) -> dict:
    keep = keep or {}
    return {
        pr.key: fit_outcome(ds, strata, pr, f, n_min=n_min, keep=keep.get(pr.key), decompose=decompose)
        for pr in strata.incomplete_pairs()
    }
