"""Orthogonal dictionary learning by alternating proximal updates.

Solves, for patch data ``X`` (K x M),

    min_{D in O_K, C}  1/2 ||D C - X||_F^2 + beta ||C||_1

by alternating the two closed-form proximal steps

    D+ = U V^T,              U S V^T = X C^T + lambda_D D
    C+ = soft((D+^T X + lambda_C C) / (1 + lambda_C), beta / (1 + lambda_C))

The iterates form a descent sequence; :class:`DescentCertificate` records the
quantities needed to check that per iteration.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DictLearnParams",
    "DescentCertificate",
    "soft_threshold",
    "update_dictionary",
    "update_codes",
    "dict_objective",
    "stationarity_residual",
    "dict_learn",
    "orthogonality_error",
]

_ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class DictLearnParams:
    beta: float
    lambda_D: float = 1.0
    lambda_C: float = 1.0
    eta: float = 1e-3
    max_iters: int = 500

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.lambda_D < 0 or self.lambda_C < 0:
            raise ValueError("proximal weights must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def sigma1(self):
        """Sufficient-decrease constant ``min(lambda_D, lambda_C)``."""
        return min(self.lambda_D, self.lambda_C)


@dataclass
class DescentCertificate:
    """Per-iteration record of one :func:`dict_learn` run.

    ``objective[0]`` is the value at the initial point; the other lists have
    one entry per iteration.
    """

    lambda_D: float
    lambda_C: float
    objective: list = field(default_factory=list)
    step_D: list = field(default_factory=list)
    step_C: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    code_norm: list = field(default_factory=list)
    converged: bool = False
    data_norm: float = 0.0

    @property
    def sigma1(self):
        return min(self.lambda_D, self.lambda_C)

    @property
    def n_iters(self):
        return len(self.step_D)

    @property
    def steps(self):
        return np.hypot(self.step_D, self.step_C)

    @property
    def sigma2(self):
        """Gradient-inequality constant ``max(sup ||C_n||_F, lambda_C, lambda_D)``."""
        return max(max(self.code_norm, default=0.0), self.lambda_C, self.lambda_D)

    @property
    def sigma2_bound(self):
        """Constant that provably bounds ``residual / ||dz||``.

        From the prox optimality conditions the dictionary part of the
        residual is at most ``(2 L_C + ||X||) ||dC|| + lambda_D ||dD||`` and the
        code part is ``lambda_C ||dC||``.  Unlike :attr:`sigma2` this depends
        on the data norm.
        """
        L_C = max(self.code_norm, default=0.0)
        return float(np.hypot(2 * L_C + self.data_norm + self.lambda_C, self.lambda_D))

    def sufficient_decrease_gaps(self):
        """``g(z^n) - sigma1/2 ||dz||^2 - g(z^{n+1})``, non-negative for a descent sequence."""
        g = np.asarray(self.objective)
        return g[:-1] - 0.5 * self.sigma1 * self.steps ** 2 - g[1:]

    def gradient_ratios(self):
        """``residual / ||dz||`` per iteration (nan where the step is zero)."""
        steps = self.steps
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(steps > 0, np.asarray(self.residual) / steps, np.nan)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "objective", "step_D", "step_C", "residual", "code_norm"])
            w.writerow([0, repr(float(self.objective[0])), "", "", "", ""])
            for n in range(self.n_iters):
                w.writerow([n + 1, repr(float(self.objective[n + 1])),
                            repr(float(self.step_D[n])), repr(float(self.step_C[n])),
                            repr(float(self.residual[n])), repr(float(self.code_norm[n]))])


def soft_threshold(x, tau):
    """Entrywise ``sign(x) * max(|x| - tau, 0)``."""
    if not tau > 0:
        raise ValueError(f"threshold must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def orthogonality_error(D):
    D = np.asarray(D)
    return np.linalg.norm(D.T @ D - np.eye(D.shape[1]))


def update_dictionary(X, C, D_prev, lambda_D):
    """Closed-form minimizer of ``1/2||DC - X||^2 + lambda_D/2 ||D - D_prev||^2`` over O_K."""
    X, C, D_prev = (np.asarray(a, dtype=float) for a in (X, C, D_prev))
    if X.shape[1] != C.shape[1] or D_prev.shape != (X.shape[0], C.shape[0]):
        raise ValueError(f"shape mismatch: X {X.shape}, C {C.shape}, D {D_prev.shape}")
    U, _, Vt = np.linalg.svd(X @ C.T + lambda_D * D_prev)
    return U @ Vt


def update_codes(X, D, C_prev, beta, lambda_C):
    """Closed-form minimizer of
    ``1/2||DC - X||^2 + lambda_C/2 ||C - C_prev||^2 + beta ||C||_1``.

    Only valid for orthogonal `D`; anything else raises ``ValueError``.
    """
    X, D, C_prev = (np.asarray(a, dtype=float) for a in (X, D, C_prev))
    if orthogonality_error(D) > _ORTHO_TOL * max(1.0, D.shape[0]):
        raise ValueError("update_codes requires an orthogonal dictionary")
    z = (D.T @ X + lambda_C * C_prev) / (1.0 + lambda_C)
    if beta == 0:
        return z
    return soft_threshold(z, beta / (1.0 + lambda_C))


def dict_objective(X, D, C, beta):
    """``1/2 ||DC - X||_F^2 + beta ||C||_1``."""
    R = D @ C - X
    return 0.5 * float(np.vdot(R, R)) + beta * float(np.abs(C).sum())


def stationarity_residual(X, D, C, beta):
    """``dist(0, dg(D, C))`` for the objective restricted to ``D in O_K``.

    The normal cone of O_K at D is ``{D S : S symmetric}``, so the D part
    reduces to the skew part of ``D^T grad_D``.  For C the l1 subdifferential
    is handled entrywise.
    """
    R = D @ C - X
    G = D.T @ (R @ C.T)
    skew = 0.5 * (G - G.T)
    gC = D.T @ R
    nz = C != 0
    rC = np.where(nz, gC + beta * np.sign(C), np.maximum(np.abs(gC) - beta, 0.0))
    return float(np.sqrt(np.vdot(skew, skew) + np.vdot(rC, rC)))


def _explicit_residual(X, D_prev, C_prev, D, C, lambda_D, lambda_C):
    """Norm of the subgradient at (D, C) built from the two prox optimality conditions."""
    # D part: grad_D at the new point minus the prox-step gradient, which is
    # normal to O_K at D; keep only its tangential (skew) component.
    G = (D @ C - X) @ C.T - (D @ C_prev - X) @ C_prev.T - lambda_D * (D - D_prev)
    S = D.T @ G
    skew = 0.5 * (S - S.T)
    rC = -lambda_C * (C - C_prev)
    return float(np.sqrt(np.vdot(skew, skew) + np.vdot(rC, rC)))


def dict_learn(X, init, params, record=True):
    """Alternate dictionary and code updates until the step falls below ``eta``.

    Parameters
    ----------
    X : ndarray (K, M)
        Patch data.
    init : tuple (D0, C0)
        Orthogonal starting dictionary and starting codes.
    params : DictLearnParams
    record : bool
        Compute the per-iteration objective and residual. Costs one extra
        product per iteration.

    Returns
    -------
    D, C : ndarray
    cert : DescentCertificate
        ``cert.converged`` is False when ``max_iters`` ran out.
    """
    X = np.asarray(X, dtype=float)
    D, C = (np.array(a, dtype=float) for a in init)
    if orthogonality_error(D) > _ORTHO_TOL * max(1.0, D.shape[0]):
        raise ValueError("initial dictionary must be orthogonal")
    cert = DescentCertificate(lambda_D=params.lambda_D, lambda_C=params.lambda_C,
                              data_norm=float(np.linalg.norm(X)))
    if record:
        cert.objective.append(dict_objective(X, D, C, params.beta))
    for _ in range(params.max_iters):
        D_new = update_dictionary(X, C, D, params.lambda_D)
        C_new = update_codes(X, D_new, C, params.beta, params.lambda_C)
        dD = np.linalg.norm(D_new - D)
        dC = np.linalg.norm(C_new - C)
        cert.step_D.append(float(dD))
        cert.step_C.append(float(dC))
        cert.code_norm.append(float(max(np.linalg.norm(C), np.linalg.norm(C_new))))
        if record:
            cert.objective.append(dict_objective(X, D_new, C_new, params.beta))
            cert.residual.append(_explicit_residual(
                X, D, C, D_new, C_new, params.lambda_D, params.lambda_C))
        D, C = D_new, C_new
        if dD * dD + dC * dC <= params.eta * params.eta:
            cert.converged = True
            break
    return D, C, cert
