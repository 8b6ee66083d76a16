"""Exact information quantities on small discrete distributions (natural log).

Used to check, by enumeration, the mutual-information rewrite behind the
confounder penalty and the variational upper bound on the compression term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ATOL = 1e-9


def _check_joint(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability table has negative entries")
    if abs(p.sum() - 1.0) > _ATOL:
        raise ValueError(f"probability table is not normalized (sums to {p.sum():.12g})")
    return p


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    nz = p > 0
    if np.any(q[nz] == 0):
        return float("inf")
    return float((p[nz] * np.log(p[nz] / q[nz])).sum())


def _h(p: np.ndarray, keep: tuple[int, ...]) -> float:
    """Entropy of the marginal over the axes in ``keep``."""
    drop = tuple(ax for ax in range(p.ndim) if ax not in keep)
    return entropy(p.sum(axis=drop) if drop else p)


# axes of a (t, s, y) table
T, S, Y = 0, 1, 2


@dataclass
class TripleInfo:
    """All the terms of the rewrite for one joint p(t, s, y)."""

    i_ts: float
    i_ty: float
    i_ty_given_s: float
    i_ts_given_y: float
    h_y_given_s: float
    h_y_given_ts: float

    @property
    def rewrite_residual(self) -> float:
        """I(t;s) - [I(t;y) - I(t;y|s)]; zero exactly when I(t;s|y) = 0."""
        return self.i_ts - (self.i_ty - self.i_ty_given_s)

    @property
    def entropy_form_residual(self) -> float:
        """I(t;s) - [I(t;y) - H(y|s) + H(y|t,s)]."""
        return self.i_ts - (self.i_ty - self.h_y_given_s + self.h_y_given_ts)


def triple_info(p_tsy: np.ndarray) -> TripleInfo:
    p = _check_joint(p_tsy)
    if p.ndim != 3:
        raise ValueError("expected a 3-d table indexed (t, s, y)")
    h_t, h_s, h_y = _h(p, (T,)), _h(p, (S,)), _h(p, (Y,))
    h_ts, h_ty, h_sy = _h(p, (T, S)), _h(p, (T, Y)), _h(p, (S, Y))
    h_tsy = _h(p, (T, S, Y))
    return TripleInfo(
        i_ts=h_t + h_s - h_ts,
        i_ty=h_t + h_y - h_ty,
        i_ty_given_s=h_ts + h_sy - h_tsy - h_s,
        i_ts_given_y=h_ty + h_sy - h_tsy - h_y,
        h_y_given_s=h_sy - h_s,
        h_y_given_ts=h_tsy - h_ts,
    )


def conditionally_independent_joint(p_y: np.ndarray, p_t_given_y: np.ndarray,
                                    p_s_given_y: np.ndarray) -> np.ndarray:
    """p(t, s, y) = p(y) p(t|y) p(s|y), i.e. t and s independent given y.

    ``p_t_given_y`` has shape (n_t, n_y), columns summing to one; same for s.
    """
    return np.einsum("y,ty,sy->tsy", p_y, p_t_given_y, p_s_given_y)


def compression_bound_gap(p_x: np.ndarray, p_t_given_x: np.ndarray, q_t: np.ndarray
                          ) -> tuple[float, float]:
    """Return (E_x KL(p(t|x) || p(t)), E_x KL(p(t|x) || q(t))).

    The first is I(t; x); the second upper-bounds it for every q, with
    equality when q is the true marginal. ``p_t_given_x`` is (n_x, n_t).
    """
    p_x = _check_joint(p_x)
    rows = np.asarray(p_t_given_x, dtype=np.float64)
    if np.any(np.abs(rows.sum(axis=1) - 1.0) > _ATOL) or np.any(rows < 0):
        raise ValueError("p(t|x) rows are not normalized")
    q_t = _check_joint(q_t)
    p_t = p_x @ rows
    exact = sum(px * kl_divergence(r, p_t) for px, r in zip(p_x, rows))
    bound = sum(px * kl_divergence(r, q_t) for px, r in zip(p_x, rows))
    return float(exact), float(bound)


@dataclass
class IdentityReport:
    # both maxima are taken over the tables satisfying t ⊥ s | y
    max_rewrite_residual: float
    max_entropy_form_residual: float
    bound_violations: int
    n_bound_cases: int
    n_tables: int
    premise_violations: list[int]  # indices of tables with I(t;s|y) > tol

    def passed(self, tol: float = 1e-12) -> bool:
        return (self.max_rewrite_residual < tol and self.max_entropy_form_residual < tol
                and self.bound_violations == 0)


def analytic_identity_check(tables, bound_cases=(), tol: float = 1e-12) -> IdentityReport:
    """Check the rewrite on every (t, s, y) table and the bound on every case.

    ``tables`` is an iterable of 3-d joint arrays. Tables whose conditional
    mutual information I(t;s|y) exceeds ``tol`` violate the premise of the
    rewrite; they are listed in ``premise_violations`` and excluded from
    ``max_rewrite_residual``. ``bound_cases`` holds ``(p_x, p_t_given_x, q)``.
    """
    worst_rw, worst_ent, flagged, n = 0.0, 0.0, [], 0
    for idx, p in enumerate(tables):
        info = triple_info(p)
        n += 1
        if info.i_ts_given_y > tol:
            flagged.append(idx)
        else:
            worst_rw = max(worst_rw, abs(info.rewrite_residual))
            worst_ent = max(worst_ent, abs(info.entropy_form_residual))
    violations, m = 0, 0
    for p_x, p_t_given_x, q in bound_cases:
        exact, bound = compression_bound_gap(p_x, p_t_given_x, q)
        m += 1
        if exact > bound + tol:
            violations += 1
    return IdentityReport(worst_rw, worst_ent, violations, m, n, flagged)


def random_identity_suite(seed: int = 0, n_tables: int = 50, n_bound: int = 100,
                          sizes=(2, 3, 4)) -> IdentityReport:
    """Random premise-satisfying tables plus random variational q's."""
    rng = np.random.default_rng(seed)
    tables = []
    for i in range(n_tables):
        nt, ns, ny = (sizes[(i + j) % len(sizes)] for j in range(3))
        p_y = rng.dirichlet(np.ones(ny))
        p_t = rng.dirichlet(np.ones(nt), size=ny).T
        p_s = rng.dirichlet(np.ones(ns), size=ny).T
        tables.append(conditionally_independent_joint(p_y, p_t, p_s))
    cases = []
    for _ in range(n_bound):
        nx, nt = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        cases.append((rng.dirichlet(np.ones(nx)), rng.dirichlet(np.ones(nt), size=nx),
                      rng.dirichlet(np.ones(nt))))
    return analytic_identity_check(tables, cases)
