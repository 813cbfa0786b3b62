"""Constant-mixing decomposition fit by expectation-maximization.

The model: velocity | state is a K-component Gaussian mixture whose
component means are sparse polynomial flows, ``v ~ sum_k pi_k *
N(Z(x) theta_k, sigma_k^2 I)``. The E-step computes responsibilities in log
space; the M-step refits each expert by responsibility-weighted sparse
regression, with closed-form mixing-weight and noise-scale updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .datagen import SnapshotDataset
from .library import ExpertParams, PolyLibrary, build_library, design_matrix


@dataclass
class EmConfig:
    n_clusters: int = 3
    degree: int = 2
    alpha: float = 1e-4          # l1 strength in the expert regressions
    max_iter: int = 150
    tol: float = 1e-5            # absolute tolerance on the objective trace
    n_restarts: int = 10
    seed: int = 0
    sigma_floor: float = 1e-6
    responsibility_floor: float = 1e-12

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class LocalModel:
    """Fitted mixture of polynomial flows with constant mixing weights."""

    library: PolyLibrary
    thetas: np.ndarray           # (K, n_terms, dim)
    sigmas: np.ndarray           # (K,)
    mixing: np.ndarray           # (K,) simplex
    config: EmConfig
    train_log: list = field(default_factory=list)
    events: list = field(default_factory=list)
    converged: bool = True

    @property
    def n_experts(self) -> int:
        return self.thetas.shape[0]

    @property
    def experts(self) -> list[ExpertParams]:
        return [ExpertParams(self.thetas[k], float(self.sigmas[k]))
                for k in range(self.n_experts)]


def weighted_lasso(
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    lam: float,
    max_sweeps: int = 10_000,
    coef_tol: float = 1e-8,
    warm_start: np.ndarray | None = None,
) -> np.ndarray:
    """Sparse weighted regression, one run per target column.

    Rows are scaled by sqrt(w); columns are rescaled to unit root-mean-square
    (no centering) and the l1 penalty acts on the standardized coefficients,
    so the objective is ``sum_i w_i * (y_i - z_i @ beta)^2 + lam * sum_j
    rms_j * |beta_j|``. Solved by cyclic coordinate descent; coefficients are
    mapped back to the original column scaling afterward. Convergence: max
    standardized coefficient change below ``coef_tol``; all-zero columns keep
    coefficient 0.
    """
    Z = np.asarray(features, dtype=float)
    Y = np.atleast_2d(np.asarray(targets, dtype=float).T).T
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("negative weights")
    if Z.shape[0] != Y.shape[0] or Z.shape[0] != w.shape[0]:
        raise ValueError("row count mismatch between features/targets/weights")
    sw = np.sqrt(w)
    Zw = Z * sw[:, None]
    Yw = Y * sw[:, None]
    n, p = Zw.shape
    col_rms = np.sqrt((Zw ** 2).mean(axis=0))
    live = col_rms > 0.0
    scale = np.where(live, col_rms, 1.0)
    Zs = Zw / scale
    # precompute Gram and correlations once; sweeps are then O(p^2) and all
    # target columns advance together (the objective separates per column)
    G = Zs.T @ Zs
    B = Zs.T @ Yw
    diag = np.diag(G).copy()
    half = lam / 2.0
    # start descent at the least-squares solution; the optimum for small
    # lam is nearby, which tames ill-conditioned dictionaries. Spectral
    # directions more than 1e6 times weaker than the leading one are cut:
    # near-duplicate columns then share their weight instead of seeding a
    # huge mutually-canceling pair the l1 has to unwind one nudge at a time.
    beta = np.linalg.lstsq(G, B, rcond=1e-6)[0]
    beta[~live] = 0.0
    if warm_start is not None:
        # a stale warm point across a curved valley from the optimum makes
        # the descent crawl, so each column starts from whichever of the two
        # candidates scores better (constant terms of the objective cancel)
        wb = warm_start * scale[:, None]
        wb[~live] = 0.0

        def _obj(bm):
            return (np.einsum("im,im->m", bm, G @ bm)
                    - 2.0 * np.einsum("im,im->m", bm, B)
                    + lam * np.abs(bm).sum(axis=0))

        warm_wins = _obj(wb) < _obj(beta)
        beta[:, warm_wins] = wb[:, warm_wins]
    m = beta.shape[1]
    usable = live & (diag > 0.0)
    done = np.zeros(m, dtype=bool)
    for _ in range(max_sweeps):
        nd = np.flatnonzero(~done)
        if nd.size == 0:
            break
        delta = 0.0
        for i in range(p):
            if not usable[i]:
                continue
            rho = B[i, nd] - G[i] @ beta[:, nd] + diag[i] * beta[i, nd]
            new = np.sign(rho) * np.maximum(np.abs(rho) - half, 0.0) / diag[i]
            delta = max(delta, np.max(np.abs(new - beta[i, nd])))
            beta[i, nd] = new
        if delta < coef_tol:
            break
        # active-face refinement: for each unfinished column, solve the
        # normal equations restricted to the current sign pattern and accept
        # the solution only if it is a descent fixed point within coef_tol
        # (no sign flips, no coordinate wanting a move that large; the solve
        # itself can be inaccurate when the restricted Gram is near-singular,
        # so active stationarity is verified rather than assumed).
        # Ill-conditioned dictionaries then finish in a few sweeps instead of
        # crawling one soft-threshold step at a time.
        for j in nd:
            # active-set pivoting in the style of a sign-constrained least
            # squares inner loop: solve the face the sign pattern selects;
            # when the face minimum breaks the pattern, walk from the current
            # point toward it only as far as the first zero crossing and drop
            # the coordinate that crossed. Jumping straight between face
            # solutions instead of line-searching cycles on degenerate faces.
            # An accepted candidate must pass the fixed-point test below, so
            # a bad face merely falls back to plain descent.
            x = beta[:, j].copy()
            A = np.flatnonzero((x != 0.0) & usable)
            s = np.sign(x[A])
            for _ in range(4 * p + 4):
                if A.size:
                    GA = G[np.ix_(A, A)]
                    rhs = B[A, j] - half * s
                    try:
                        xA = np.linalg.solve(GA, rhs)
                        # one round of iterative refinement: a badly
                        # conditioned face otherwise leaves enough solve
                        # error to fail the stationarity check forever
                        xA += np.linalg.solve(GA, rhs - GA @ xA)
                    except np.linalg.LinAlgError:
                        xA = np.linalg.lstsq(GA, rhs, rcond=None)[0]
                        xA += np.linalg.lstsq(GA, rhs - GA @ xA, rcond=None)[0]
                    flip = np.sign(xA) != s
                    if flip.any():
                        cur = x[A]
                        with np.errstate(divide="ignore", invalid="ignore"):
                            ts = np.where(flip, cur / (cur - xA), np.inf)
                        ts = np.where(np.isfinite(ts), ts, 1.0)
                        drop_pos = int(np.argmin(ts))
                        t = max(ts[drop_pos], 0.0)
                        x[A] = cur + t * (xA - cur)
                        x[A[drop_pos]] = 0.0
                        keep = np.arange(A.size) != drop_pos
                        A, s = A[keep], s[keep]
                        continue
                    x[:] = 0.0
                    x[A] = xA
                else:
                    x[:] = 0.0
                corr = B[:, j] - G @ x
                inactive = usable & (x == 0.0)
                excess = np.where(
                    inactive, np.abs(corr) - (half + coef_tol * diag), -np.inf
                )
                enter = int(np.argmax(excess))
                if excess[enter] > 0.0:
                    A = np.append(A, enter)
                    s = np.append(s, np.sign(corr[enter]))
                    continue
                rho = corr[A] + diag[A] * x[A]
                step = np.sign(rho) * np.maximum(np.abs(rho) - half, 0.0) / diag[A]
                # the restricted solve carries O(eps * cond * |cand|) noise,
                # so the fixed-point test is relative in coefficient size
                if np.all(np.abs(step - x[A]) <= coef_tol * (1.0 + np.abs(x[A]))):
                    beta[:, j] = x
                    done[j] = True
                break
    out = beta / scale[:, None]
    out[~live] = 0.0
    return out


def _log_densities(model: LocalModel, Z: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Per-sample per-expert Gaussian log density of the velocities."""
    n, d = V.shape
    K = model.n_experts
    L = np.empty((n, K))
    for k in range(K):
        r2 = ((V - Z @ model.thetas[k]) ** 2).sum(axis=1)
        s2 = model.sigmas[k] ** 2
        L[:, k] = -0.5 * r2 / s2 - 0.5 * d * np.log(2.0 * np.pi * s2)
    return L


def e_step(model: LocalModel, data: SnapshotDataset, Z: np.ndarray | None = None) -> np.ndarray:
    """Posterior responsibilities, floored and row-renormalized."""
    if Z is None:
        Z = design_matrix(model.library, data.states)
    L = _log_densities(model, Z, data.velocities)
    with np.errstate(divide="ignore"):
        A = L + np.log(model.mixing)[None, :]
    R = np.exp(A - logsumexp(A, axis=1, keepdims=True))
    R = np.maximum(R, model.config.responsibility_floor)
    return R / R.sum(axis=1, keepdims=True)


def _m_step_core(
    data: SnapshotDataset,
    R: np.ndarray,
    cfg: EmConfig,
    library: PolyLibrary,
    Z: np.ndarray,
    warm_thetas: np.ndarray | None = None,
):
    V = data.velocities
    n, d = V.shape
    K = R.shape[1]
    events = []
    R = R.copy()
    col_mass = R.sum(axis=0)
    for k in range(K):
        if col_mass[k] < 1e-8:
            # re-seed a dead expert on the points the others explain worst
            if warm_thetas is None:
                resid = np.linalg.norm(V, axis=1)
            else:
                best = np.full(n, np.inf)
                for j in range(K):
                    if j == k:
                        continue
                    best = np.minimum(
                        best, np.linalg.norm(V - Z @ warm_thetas[j], axis=1)
                    )
                resid = best
            worst = np.argsort(resid)[-max(8, n // 50):]
            R[worst, k] = 1.0
            R /= R.sum(axis=1, keepdims=True)
            col_mass = R.sum(axis=0)
            events.append(f"reseeded expert {k}")
    thetas = np.empty((K, library.n_terms, d))
    sigmas = np.empty(K)
    r2 = np.empty((n, K))
    for k in range(K):
        # a fresh dense-solve start beats warm starting here: the descent
        # then lands within tolerance in a few sweeps even when the weighted
        # Gram is badly conditioned
        thetas[k] = weighted_lasso(Z, V, R[:, k], cfg.alpha)
        r2[:, k] = ((V - Z @ thetas[k]) ** 2).sum(axis=1)
        var = (R[:, k] * r2[:, k]).sum() / (d * col_mass[k])
        sigmas[k] = max(np.sqrt(var), cfg.sigma_floor)
    mixing = col_mass / n
    return thetas, sigmas, mixing, events, r2


def m_step(
    data: SnapshotDataset,
    R: np.ndarray,
    cfg: EmConfig,
    library: PolyLibrary,
    Z: np.ndarray | None = None,
    warm_thetas: np.ndarray | None = None,
):
    """Refit experts, noise scales, and mixing weights for given
    responsibilities. Returns (thetas, sigmas, mixing, events)."""
    if Z is None:
        Z = design_matrix(library, data.states)
    thetas, sigmas, mixing, events, _ = _m_step_core(
        data, R, cfg, library, Z, warm_thetas
    )
    return thetas, sigmas, mixing, events


def penalized_loglik(model: LocalModel, data: SnapshotDataset, Z: np.ndarray | None = None) -> float:
    """Total mixture log-likelihood minus the l1 penalty on all experts."""
    if Z is None:
        Z = design_matrix(model.library, data.states)
    L = _log_densities(model, Z, data.velocities)
    with np.errstate(divide="ignore"):
        A = L + np.log(model.mixing)[None, :]
    ll = logsumexp(A, axis=1).sum()
    return float(ll - model.config.alpha * np.abs(model.thetas).sum())


def _fit_one_restart(
    train: SnapshotDataset, cfg: EmConfig, library: PolyLibrary,
    Z: np.ndarray, rng: np.random.Generator,
) -> LocalModel:
    n = train.n
    K = cfg.n_clusters
    R = rng.dirichlet(np.ones(K), size=n)
    model = LocalModel(
        library=library,
        thetas=np.zeros((K, library.n_terms, train.dim)),
        sigmas=np.ones(K),
        mixing=np.full(K, 1.0 / K),
        config=cfg,
    )
    d = train.dim
    prev = None
    warm = None
    for _ in range(cfg.max_iter):
        thetas, sigmas, mixing, events, r2 = _m_step_core(
            train, R, cfg, library, Z, warm_thetas=warm
        )
        model.thetas, model.sigmas, model.mixing = thetas, sigmas, mixing
        model.events.extend(events)
        warm = thetas
        # objective and next responsibilities share the residual matrix
        s2 = sigmas ** 2
        with np.errstate(divide="ignore"):
            A = (-0.5 * r2 / s2 - 0.5 * d * np.log(2.0 * np.pi * s2)
                 + np.log(mixing))
        lse = logsumexp(A, axis=1)
        obj = float(lse.sum() - cfg.alpha * np.abs(thetas).sum())
        model.train_log.append(obj)
        if prev is not None and abs(obj - prev) < cfg.tol:
            return model
        prev = obj
        R = np.exp(A - lse[:, None])
        R = np.maximum(R, cfg.responsibility_floor)
        R /= R.sum(axis=1, keepdims=True)
    model.converged = False
    return model


def fit_local(
    train: SnapshotDataset, cfg: EmConfig, val: SnapshotDataset | None = None,
) -> LocalModel:
    """Restarted EM fit; best restart by held-out penalized log-likelihood.

    Each restart draws a fresh flat-Dirichlet responsibility matrix, then
    alternates expert refits and posterior updates until the objective trace
    moves less than ``cfg.tol`` or ``cfg.max_iter`` is hit (recorded on the
    model as ``converged=False``). With no validation split the training
    objective selects the winner.
    """
    library = build_library(train.dim, cfg.degree)
    Z = design_matrix(library, train.states)
    Zval = None if val is None else design_matrix(library, val.states)
    seeds = np.random.SeedSequence([cfg.seed, 917]).spawn(cfg.n_restarts)
    best = None
    best_score = -np.inf
    for ss in seeds:
        model = _fit_one_restart(train, cfg, library, Z, np.random.default_rng(ss))
        if val is None:
            score = model.train_log[-1]
        else:
            score = penalized_loglik(model, val, Z=Zval)
        if score > best_score:
            best, best_score = model, score
    return best


def predict_assignments(model: LocalModel, data: SnapshotDataset) -> np.ndarray:
    """Hard labels: argmax responsibility, lowest index on ties."""
    return np.argmax(e_step(model, data), axis=1)
