"""Matrix-free solver for strictly convex box-constrained quadratic programs.

Minimizes ``q(x) = 1/2 <x, H x> + <c, x>`` subject to ``lo <= x <= hi``.
Each sweep takes projected-gradient steps to settle the active set and then
runs preconditioned conjugate gradients on the free variables.  A CG step
that leaves the box is followed by a projected search along its direction
(gradient projection / CG in the spirit of More and Toraldo).  Arrays may have any shape; ``hess`` maps an array to an
array of the same shape.
"""
from __future__ import annotations

import numpy as np

__all__ = ["QPNotConverged", "QPResult", "solve_box_qp", "projected_gradient"]


class QPNotConverged(RuntimeError):
    """Iteration cap hit before the projected-gradient tolerance."""

    def __init__(self, residual, target, iterations):
        super().__init__(f"box QP did not converge after {iterations} iterations: "
                         f"projected gradient {residual:.3e} > {target:.3e}")
        self.residual = residual
        self.target = target
        self.iterations = iterations


class QPResult:
    __slots__ = ("x", "residual", "iterations", "cg_iterations")

    def __init__(self, x, residual, iterations, cg_iterations):
        self.x = x
        self.residual = residual
        self.iterations = iterations
        self.cg_iterations = cg_iterations


def projected_gradient(x, g, lo, hi):
    """``x - proj(x - g)``; zero exactly at KKT points."""
    return x - np.clip(x - g, lo, hi)


def _binding(x, g, lo, hi):
    return ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))


def solve_box_qp(hess, c, lo, hi, x0, precond=None, tol=1e-8, atol=1e-14,
                 maxiter=200, max_cg=None, pg_steps=3, cg_forcing=1e-2, scale=None):
    """Solve the box-constrained QP to a relative projected-gradient tolerance.

    Parameters
    ----------
    hess : callable
        ``hess(v) -> H v``; H must be symmetric positive definite.
    c : ndarray
        Linear term.
    lo, hi : ndarray or float
        Bounds, broadcastable to ``c``.
    x0 : ndarray
        Starting point; projected onto the box first.
    precond : callable, optional
        ``precond(free) -> (r -> z)`` building an approximate inverse of H
        restricted to the boolean mask ``free``.
    tol, atol : float
        Stop once ``||pg|| <= max(tol * ||pg(x0)||, atol)``.
    maxiter : int
        Number of projected-gradient/CG sweeps.
    max_cg : int, optional
        CG iterations per sweep (default: number of variables).
    cg_forcing : float
        Relative residual reduction at which a CG sweep ends.
    scale : ndarray, optional
        Positive diagonal scaling for the projected-gradient steps,
        typically the diagonal of H.

    Raises
    ------
    QPNotConverged
    """
    lo = np.broadcast_to(np.asarray(lo, dtype=float), c.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), c.shape)
    if np.any(lo > hi):
        raise ValueError("empty box: lo > hi")
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    Hx = hess(x)
    g = Hx + c
    target = max(tol * np.linalg.norm(projected_gradient(x, g, lo, hi)), atol)
    max_cg = max_cg or c.size
    inv_scale = 1.0 if scale is None else 1.0 / np.asarray(scale, dtype=float)
    total_cg = 0

    def q(xv, Hxv):
        return 0.5 * np.vdot(xv, Hxv).real + np.vdot(c, xv).real

    for sweep in range(maxiter):
        pg_norm = np.linalg.norm(projected_gradient(x, g, lo, hi))
        if pg_norm <= target:
            return QPResult(x, pg_norm, sweep, total_cg)

        # projected gradient steps with an Armijo search along the projected path
        active = _binding(x, g, lo, hi)
        for _ in range(pg_steps):
            d = np.where(active, 0.0, -g * inv_scale)
            Hd = hess(d)
            curv = np.vdot(d, Hd).real
            if curv <= 0:
                break
            step = -np.vdot(g, d).real / curv
            qx = q(x, Hx)
            for _ in range(40):
                xn = np.clip(x + step * d, lo, hi)
                Hxn = hess(xn)
                if q(xn, Hxn) <= qx + 1e-4 * np.vdot(g, xn - x).real:
                    break
                step *= 0.5
            else:
                break
            x, Hx = xn, Hxn
            g = Hx + c
            new_active = _binding(x, g, lo, hi)
            if np.array_equal(new_active, active):
                break
            active = new_active

        # conjugate gradients on the current face
        free = ~(_binding(x, g, lo, hi) | ((x <= lo) & (g >= 0)) | ((x >= hi) & (g <= 0)))
        if not free.any():
            continue
        apply_M = precond(free) if precond is not None else (lambda v: v)
        r = np.where(free, -g, 0.0)
        r0 = np.linalg.norm(r)
        z = np.where(free, apply_M(r), 0.0)
        p = z
        rz = np.vdot(r, z).real
        for _ in range(max_cg):
            Hp = hess(p)
            curv = np.vdot(p, Hp).real
            if curv <= 0:
                break
            alpha = rz / curv
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                to_bound = np.where(p > 0, (hi - x) / p, np.where(p < 0, (lo - x) / p, np.inf))
            alpha_max = float(np.min(np.where(free, to_bound, np.inf)))
            total_cg += 1
            if alpha >= alpha_max:
                # projected search along p: let several bounds activate at once
                qx = q(x, Hx)
                step = alpha
                while step > alpha_max:
                    xn = np.clip(x + step * p, lo, hi)
                    Hxn = hess(xn)
                    if q(xn, Hxn) <= qx + 1e-4 * np.vdot(g, xn - x).real:
                        break
                    step *= 0.5
                else:
                    xn = x + alpha_max * p
                    hit = free & (to_bound <= alpha_max)
                    xn = np.where(hit & (p > 0), hi, np.where(hit & (p < 0), lo, xn))
                    xn = np.clip(xn, lo, hi)
                    Hxn = hess(xn)
                x, Hx = xn, Hxn
                g = Hx + c
                break
            x = x + alpha * p
            Hx = Hx + alpha * Hp
            g = Hx + c
            r = np.where(free, -g, 0.0)
            if np.linalg.norm(r) <= max(cg_forcing * r0, 0.5 * target):
                break
            z = np.where(free, apply_M(r), 0.0)
            rz_new = np.vdot(r, z).real
            p = z + (rz_new / rz) * p
            rz = rz_new
        # refresh to limit drift of the recurrence
        Hx = hess(x)
        g = Hx + c

    pg_norm = np.linalg.norm(projected_gradient(x, g, lo, hi))
    if pg_norm <= target:
        return QPResult(x, pg_norm, maxiter, total_cg)
    raise QPNotConverged(pg_norm, target, maxiter)
