"""L2-regularized logistic regression with an unregularized bias.

Minimizes ``J(W, b) = 0.5 * ||W||^2 + P * sum_i CE(y_i, sigmoid(x_i . W + b))``,
so larger ``P`` means weaker regularization. The solver is damped Newton
with Armijo backtracking from the zero vector. When there are more
features than samples the Newton system is solved through an N x N
Woodbury form, which keeps a fit on 1000 features and ~200 models cheap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_matrix

GRAD_TOL = 1e-8
MAX_ITER = 10000
ROUNDING_RTOL = 1e-13


def objective(W, b, X, y, P) -> float:
    z = X @ W + b
    # -y log p - (1-y) log(1-p) == log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0
    return float(0.5 * W @ W + P * np.logaddexp(0.0, np.where(y > 0, -z, z)).sum())


def gradient(W, b, X, y, P) -> tuple[np.ndarray, float]:
    r = expit(X @ W + b) - y
    return W + P * (X.T @ r), float(P * r.sum())


@dataclass
class LogRegFit:
    W: np.ndarray
    b: float
    converged: bool
    n_iter: int
    grad_norm: float
    history: list[float] = field(default_factory=list)


def _newton_direction(X, gram, s, gW, gb, P):
    """Solve the Newton system for (dW, db); returns None if it is singular."""
    n, d = X.shape
    ps = P * s
    c = X.T @ ps  # Hessian block coupling W and b
    h_bb = float(ps.sum())
    if d <= n:
        H = np.empty((d + 1, d + 1))
        H[:d, :d] = (X.T * ps) @ X
        H[:d, :d].flat[:: d + 1] += 1.0
        H[:d, d] = H[d, :d] = c
        H[d, d] = h_bb
        try:
            step = linalg.solve(H, -np.r_[gW, gb], assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            return None
        return step[:d], float(step[d])

    # A = I + X^T diag(ps) X, A^-1 r = r - X^T Q (I + Q K Q)^-1 Q X r with Q = sqrt(ps)
    q = np.sqrt(ps)
    M = q[:, None] * gram * q[None, :]
    M.flat[:: n + 1] += 1.0
    try:
        cf = linalg.cho_factor(M)
    except linalg.LinAlgError:
        return None

    def a_inv(r):
        return r - X.T @ (q * linalg.cho_solve(cf, q * (X @ r)))

    u = a_inv(-gW)
    v = a_inv(c)
    schur = h_bb - c @ v
    if not schur > 0:
        return None
    db = (-gb - c @ u) / schur
    return u - v * db, float(db)


def fit_logreg(X, y, P: float, tol: float = GRAD_TOL, max_iter: int = MAX_ITER, gram=None) -> LogRegFit:
    """Run the solver and report convergence details.

    ``gram`` may pass a precomputed ``X @ X.T`` to skip recomputing it.
    Stops once the gradient's infinity norm is at most ``tol``, after
    ``max_iter`` iterations, or when no step decreases the objective.
    """
    X = check_matrix(X)
    y = check_labels(y, len(X)).astype(np.float64)
    if not P > 0:
        raise ValueError(f"P must be positive, got {P}")
    n, d = X.shape
    if d > n and gram is None:
        gram = X @ X.T
    W, b = np.zeros(d), 0.0
    J = objective(W, b, X, y, P)
    history = [J]
    converged = False
    it = 0
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        gW, gb = gradient(W, b, X, y, P)
        gnorm = max(float(np.max(np.abs(gW), initial=0.0)), abs(gb))
        if gnorm <= tol:
            converged = True
            it -= 1
            break
        s = expit(X @ W + b)
        s = s * (1.0 - s)
        direction = _newton_direction(X, gram, s, gW, gb, P)
        slope = None
        if direction is not None:
            dW, db = direction
            slope = float(gW @ dW + gb * db)
        if direction is None or not slope < 0:
            dW, db = -gW, -gb
            slope = -float(gW @ gW + gb * gb)
        t = 1.0
        full = None
        while True:
            W_new, b_new = W + t * dW, b + t * db
            J_new = objective(W_new, b_new, X, y, P)
            if full is None:
                full = (W_new, b_new, J_new)
            if J_new <= J + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if not J_new < J:
            # Near the optimum J is flat to within rounding; keep taking full
            # steps while they shrink the gradient and J moves only by rounding.
            W_new, b_new, J_new = full
            g2W, g2b = gradient(W_new, b_new, X, y, P)
            g2 = max(float(np.max(np.abs(g2W), initial=0.0)), abs(g2b))
            if not (J_new <= J + ROUNDING_RTOL * abs(J) and g2 < gnorm):
                break
        W, b, J = W_new, b_new, J_new
        history.append(J)
    return LogRegFit(W, b, converged, it, gnorm, history)


def train_logreg(X, y, P: float, tol: float = GRAD_TOL, max_iter: int = MAX_ITER, gram=None):
    """Return ``(W, b)``; warns with ConvergenceWarning if the tolerance was not met."""
    fit = fit_logreg(X, y, P, tol, max_iter, gram)
    if not fit.converged:
        warnings.warn(
            f"logistic regression stopped after {fit.n_iter} iterations with "
            f"gradient norm {fit.grad_norm:.3g} (P={P:g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return fit.W, fit.b


def sigmoid(z):
    return expit(z)


class L2LogisticRegression(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_logreg` for plain feature matrices."""

    def __init__(self, P=1.0, tol=GRAD_TOL, max_iter=MAX_ITER):
        self.P = P
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        fit = fit_logreg(X, y, self.P, self.tol, self.max_iter)
        if not fit.converged:
            warnings.warn(f"did not converge (gradient norm {fit.grad_norm:.3g})", ConvergenceWarning)
        self.coef_ = fit.W
        self.intercept_ = fit.b
        self.n_iter_ = fit.n_iter
        self.converged_ = fit.converged
        self.objective_history_ = fit.history
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = len(fit.W)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_matrix(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)
