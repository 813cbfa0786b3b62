"""Polynomial feature dictionaries for expert flow fields.

A flow field is represented as ``f(x) = Z(x) @ theta`` where ``Z(x)`` stacks
monomials of the state up to a fixed total degree and ``theta`` is a
``(n_terms, dim)`` coefficient matrix (one column per output coordinate).
Terms are ordered graded-lexicographically: ascending total degree, and within
a degree block earlier state variables carry higher powers first, so for
``dim=2, degree=2`` the columns are ``1, x, y, x^2, x*y, y^2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PolyLibrary:
    """Monomial dictionary over a ``dim``-dimensional state.

    Attributes
    ----------
    dim : int
        State dimension.
    degree : int
        Maximum total degree of included monomials.
    terms : tuple[tuple[int, ...], ...]
        Exponent multi-indices in graded-lexicographic order; ``terms[p][j]``
        is the power of state coordinate ``j`` in feature ``p``.
    """

    dim: int
    degree: int
    terms: tuple[tuple[int, ...], ...] = field(default=())

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def term_label(self, term: tuple[int, ...], var_names=None) -> str:
        """Human-readable monomial string for one exponent tuple."""
        if var_names is None:
            var_names = [f"x{j}" for j in range(self.dim)]
        parts = []
        for name, e in zip(var_names, term):
            if e == 1:
                parts.append(name)
            elif e > 1:
                parts.append(f"{name}^{e}")
        return "*".join(parts) if parts else "1"


def build_library(dim: int, degree: int) -> PolyLibrary:
    """Enumerate all monomials of total degree <= ``degree`` in ``dim`` variables.

    The count is ``C(dim + degree, dim)``. Ordering is graded lexicographic:
    sort by total degree, then by exponent tuple with earlier coordinates'
    higher powers first.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    terms = [
        t
        for t in itertools.product(range(degree + 1), repeat=dim)
        if sum(t) <= degree
    ]
    terms.sort(key=lambda t: (sum(t), tuple(-e for e in t)))
    lib = PolyLibrary(dim=dim, degree=degree, terms=tuple(terms))
    assert lib.n_terms == math.comb(dim + degree, dim)
    return lib


def featurize(lib: PolyLibrary, x: np.ndarray) -> np.ndarray:
    """Evaluate all library monomials at a single state ``x`` (shape ``(dim,)``)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (lib.dim,):
        raise ValueError(f"expected state of shape ({lib.dim},), got {x.shape}")
    return design_matrix(lib, x[None, :])[0]

def design_matrix(lib: PolyLibrary, states: np.ndarray) -> np.ndarray:
    """Evaluate the library on a batch of states, returning ``(n, n_terms)``.

    Powers of each coordinate are computed once and reused across terms.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[1] != lib.dim:
        raise ValueError(f"expected states with {lib.dim} columns, got {X.shape[1]}")
    # pows[j][e] = X[:, j] ** e, shared across all terms
    pows = [
        np.vander(X[:, j], N=lib.degree + 1, increasing=True) for j in range(lib.dim)
    ]
    Z = np.empty((X.shape[0], lib.n_terms))
    for p, term in enumerate(lib.terms):
        col = np.ones(X.shape[0])
        for j, e in enumerate(term):
            if e:
                col = col * pows[j][:, e]
        Z[:, p] = col
    return Z


def expert_velocity(lib: PolyLibrary, theta: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Evaluate one expert's flow field ``Z(x) @ theta`` at ``states``.

    ``theta`` has shape ``(n_terms, dim)``; a 1-D ``states`` input returns a
    1-D velocity.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (lib.n_terms, lib.dim):
        raise ValueError(
            f"theta shape {theta.shape} does not match library ({lib.n_terms}, {lib.dim})"
        )
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    V = design_matrix(lib, states) @ theta
    return V[0] if single else V


@dataclass
class ExpertParams:
    """One expert flow: polynomial coefficients plus its noise scale."""

    theta: np.ndarray
    sigma: float


def rescale_theta(
    lib: PolyLibrary,
    theta: np.ndarray,
    state_scale: np.ndarray,
    velocity_scale: np.ndarray,
    to_raw: bool = True,
) -> np.ndarray:
    """Map coefficients between normalized and raw coordinates.

    Datasets store ``y = s * x`` and ``w = t * v`` with per-coordinate scale
    vectors ``s`` (states) and ``t`` (velocities). A model fitted in stored
    coordinates, ``w = Z(y) @ theta``, corresponds in raw coordinates to
    ``theta_raw[p, j] = theta[p, j] * prod_i(s_i ** e_i) / t_j`` for exponent
    tuple ``e = terms[p]``. ``to_raw=False`` applies the inverse map.
    """
    theta = np.asarray(theta, dtype=float)
    s = np.asarray(state_scale, dtype=float)
    t = np.asarray(velocity_scale, dtype=float)
    if s.shape != (lib.dim,) or t.shape != (lib.dim,):
        raise ValueError("scale vectors must have one entry per state coordinate")
    term_factor = np.array([np.prod(s ** np.array(term)) for term in lib.terms])
    factor = term_factor[:, None] / t[None, :]
    return theta * factor if to_raw else theta / factor
