"""Nested alternating Levenberg-Marquardt / dictionary-learning solver.

Minimizes over ``u in U_ad``, ``D_j in O_K``, ``C_j``::

    J_d = h^2/2 ||F_d(u) - f||^2 + alpha/2 ||grad u||_{U1}^2
          + sum_j lambda_j * g_j(u, D_j, C_j)

    g_j = 1/2 ||P[u_j / M_j] - D_j C_j||_F^2 + (beta_j / lambda_j) ||C_j||_1

Each outer iteration runs an inner dictionary-learning loop per channel
(the z-step) and then one Levenberg-Marquardt step in ``u`` whose damping is
found by backtracking on ``J_d`` (the u-step).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.fft

from . import dictlearn, forward
from .boxqp import QPNotConverged, solve_box_qp
from .config import ConfigError

__all__ = [
    "SolverConfig",
    "PRESETS",
    "DictState",
    "IterationTrace",
    "SolveResult",
    "BacktrackingFailed",
    "scaled_norm_U",
    "scaled_norm_U1",
    "objective_Jd",
    "objective_terms",
    "u_subproblem",
    "backtrack_u",
    "z_step",
    "eta_schedule",
    "nested_solve",
    "one_step_solve",
    "vanilla_lm_solve",
    "stationarity_estimate",
    "check_trace",
    "QPNotConverged",
]

CHANNELS = ("rho", "t1", "t2")


class BacktrackingFailed(RuntimeError):
    """No damping parameter up to the cap gave sufficient decrease."""


@dataclass(frozen=True)
class SolverConfig:
    """Scalar hyperparameters of the nested solver.

    ``lam`` holds the per-channel dictionary weights (``lambda`` in config
    files), ``beta`` the sparsity weights and ``M`` the channel scalings
    used in the norms and patch normalization.
    """

    alpha: float = 1e-3
    lam: tuple = (45.0, 45.0, 45.0)
    beta: tuple = (0.0045, 0.0045, 0.0045)
    M: tuple = (100.0, 260.0, 260.0)
    lambda_D: float = 1.0
    lambda_C: float = 1.0
    gamma: float = 0.75
    lambda0: float = 1.0
    tau: float = 8.0
    sigma_BT: float = 0.5
    p: int = 8
    h: float = 1.0
    eps1: float = 1e-4
    eps2: float = 1e-4
    max_outer: int = 100
    max_inner: int = 500
    lm_iters: int = 20
    r: int | None = None
    rho_max: float = 110.0
    T_max: float = 300.0
    tol_qp: float = 1e-8
    max_qp_sweeps: int = 200
    max_backtrack: int = 40
    dict_init: str = "dct"

    def __post_init__(self):
        for name in ("lam", "beta", "M"):
            value = getattr(self, name)
            value = tuple(float(v) for v in np.broadcast_to(np.asarray(value, float), (3,)))
            object.__setattr__(self, name, value)
        if not self.tau > 1:
            raise ValueError("tau must exceed 1")
        if not 0 < self.sigma_BT < 1:
            raise ValueError("sigma_BT must lie in (0, 1)")
        if self.lambda0 <= 0 or self.h <= 0 or self.alpha < 0:
            raise ValueError("lambda0 and h must be positive, alpha non-negative")
        if any(v < 0 for v in self.lam + self.beta) or any(v <= 0 for v in self.M):
            raise ValueError("lambda, beta must be non-negative and M positive")
        if self.dict_init not in DICT_INITS:
            raise ValueError(f"dict_init must be one of {sorted(DICT_INITS)}")
        if self.r is not None and int(self.r) < 1:
            raise ValueError("r must be >= 1")

    @property
    def K(self):
        return self.p * self.p

    @property
    def lower(self):
        return np.zeros(3)

    @property
    def upper(self):
        return np.array([self.rho_max, self.T_max, self.T_max])

    # -- plain-text form --------------------------------------------------
    _VECTOR_KEYS = {"lambda": "lam", "beta": "beta", "M": "M"}
    _ALIASES = {"sigma3": "sigma_BT", "M_scale": "M"}

    @classmethod
    def from_mapping(cls, values, base=None):
        """Build from ``{key: str}`` using the symbol names of the parameter table.

        Unknown keys raise :class:`ConfigError`.
        """
        base = base or cls()
        names = {f.name: f for f in fields(cls)}
        kwargs = {}
        K = None
        for key, text in values.items():
            key = cls._ALIASES.get(key, key)
            if key == "K":
                K = int(text)
                continue
            attr = cls._VECTOR_KEYS.get(key, key)
            if attr not in names or key == "lam":
                raise ConfigError(f"unknown solver key {key!r}")
            current = getattr(base, attr)
            try:
                if attr in ("lam", "beta", "M"):
                    vals = [float(v) for v in str(text).replace(",", " ").split()]
                    if len(vals) not in (1, 3):
                        raise ValueError("expected 1 or 3 values")
                    kwargs[attr] = tuple(vals) if len(vals) == 3 else (vals[0],) * 3
                elif attr == "dict_init":
                    kwargs[attr] = str(text)
                elif attr == "r":
                    kwargs[attr] = None if str(text).lower() == "none" else int(text)
                elif isinstance(current, bool):
                    kwargs[attr] = str(text).lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    kwargs[attr] = int(text)
                else:
                    kwargs[attr] = float(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for solver key {key!r}: {text!r} ({exc})") from exc
        try:
            cfg = replace(base, **kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if K is not None and K != cfg.K:
            raise ConfigError(f"K={K} inconsistent with p={cfg.p} (K must be p^2)")
        return cfg

    def to_mapping(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            key = {"lam": "lambda"}.get(f.name, f.name)
            if isinstance(value, str):
                out[key] = value
            elif isinstance(value, tuple):
                out[key] = ", ".join(repr(v) for v in value)
            else:
                out[key] = repr(value) if isinstance(value, float) else str(value)
        out["K"] = str(self.K)
        return out


# -- norms and objective -----------------------------------------------------

def _channel_weights(cfg):
    return cfg.h ** 2 / np.asarray(cfg.M) ** 2


def scaled_norm_U(u, cfg):
    """``sqrt(sum_j h^2/M_j^2 ||u_j||^2)`` for ``u`` of shape (n1, n2, 3)."""
    u = np.asarray(u, dtype=float)
    sq = np.sum(u * u, axis=(0, 1))
    return float(np.sqrt(np.dot(_channel_weights(cfg), sq)))


def scaled_norm_U1(v, cfg):
    """Same weighting for gradient fields of shape (n1, n2, 3, 2)."""
    v = np.asarray(v, dtype=float)
    sq = np.sum(v * v, axis=(0, 1, 3))
    return float(np.sqrt(np.dot(_channel_weights(cfg), sq)))


def _grad(u, cfg):
    return np.stack([forward.grad_h(u[..., c], cfg.h) for c in range(3)], axis=2)


def _step_sq(du, cfg):
    return scaled_norm_U(du, cfg) ** 2 + scaled_norm_U1(_grad(du, cfg), cfg) ** 2


def _gram_L(u, cfg):
    """``grad^T grad`` per channel."""
    return -forward.laplace_h(u, cfg.h)


def dct_dictionary(p):
    """Orthonormal separable 2D DCT-II basis for p x p patches, atoms as columns.

    Row ``a + b*p`` matches the patch vector ordering of
    :func:`forward.patch_extract`.
    """
    c = scipy.fft.dct(np.eye(p), norm="ortho", axis=0).T  # columns: 1D atoms
    return np.kron(c, c)


DICT_INITS = {"dct": dct_dictionary, "identity": lambda p: np.eye(p * p)}


PRESETS = {
    "paper16x": SolverConfig(lam=(45.0,) * 3, beta=(0.0045,) * 3, r=16),
    "paper32x": SolverConfig(lam=(50.0,) * 3, beta=(0.0095,) * 3, r=32),
    # weights retuned for the 64x64 phantom, see README
    "desk": SolverConfig(lam=(20.0,) * 3, beta=(1.0,) * 3, r=8, max_outer=40,
                         lm_iters=15),
}


@dataclass
class DictState:
    """Dictionaries ``D`` (3, K, K) and codes ``C`` (3, K, M)."""

    D: np.ndarray
    C: np.ndarray

    @classmethod
    def initial(cls, p, M, kind="dct"):
        D0 = DICT_INITS[kind](p)
        return cls(np.stack([D0] * 3), np.zeros((3, p * p, M)))

    def copy(self):
        return DictState(self.D.copy(), self.C.copy())


def _patch_cfg(shape, cfg):
    return forward.PatchConfig(cfg.p, shape[0], shape[1])


def _inner_beta(cfg, j):
    return cfg.beta[j] / cfg.lam[j]


def objective_terms(u, D, C, data, cfg, seq, pointwise=None):
    """Return the parts of ``J_d`` as a dict (``total`` included)."""
    u = np.asarray(u, dtype=float)
    lo, hi = cfg.lower, cfg.upper
    feasible = bool(np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12))
    if pointwise is None:
        Fu = forward.forward(u, seq, data.masks).data
    else:
        Fu = forward.apply_A(pointwise(u)[0], data.masks).data
    res = Fu - data.data
    data_term = 0.5 * cfg.h ** 2 * float(np.vdot(res, res).real)
    grad_term = 0.5 * cfg.alpha * scaled_norm_U1(_grad(u, cfg), cfg) ** 2
    pc = _patch_cfg(u.shape, cfg)
    dict_terms = []
    for j in range(3):
        if cfg.lam[j] == 0:
            dict_terms.append(0.0)
            continue
        X = forward.patch_extract(u[..., j] / cfg.M[j], pc)
        dict_terms.append(cfg.lam[j] * dictlearn.dict_objective(X, D[j], C[j], _inner_beta(cfg, j)))
    total = data_term + grad_term
    for t in dict_terms:
        total = total + t
    if not feasible:
        total = math.inf
    return {"total": total, "data": data_term, "grad": grad_term, "dict": dict_terms,
            "feasible": feasible}


def objective_Jd(u, D, C, data, cfg, seq, pointwise=None):
    """Objective value; ``inf`` outside the admissible box."""
    return objective_terms(u, D, C, data, cfg, seq, pointwise)["total"]


# -- u-step ---------------------------------------------------------------------

class _UStepModel:
    """Quadratic model of the u-step at ``u_k``, reused across damping trials."""

    def __init__(self, u_k, D, C, data, cfg, seq, pointwise=None, r=None):
        self.u_k = np.asarray(u_k, dtype=float)
        self.cfg = cfg
        self.r = r or cfg.r or data.masks.r
        lin = forward.linearize(self.u_k, seq, data.masks, pointwise)
        self.lin = lin
        h2 = cfg.h ** 2
        self.G = lin.gram * (h2 / self.r)
        self.S = _channel_weights(cfg)
        self.kappa = np.array([cfg.lam[j] * cfg.K / cfg.M[j] ** 2 for j in range(3)])
        resid = forward.KSpaceData(lin.value.data - data.data, data.masks)
        self.grad_data = h2 * lin.vjp(resid)
        pc = _patch_cfg(self.u_k.shape, cfg)
        dict_pull = np.zeros_like(self.u_k)
        for j in range(3):
            if cfg.lam[j] > 0:
                dict_pull[..., j] = cfg.lam[j] / cfg.M[j] * forward.patch_adjoint(D[j] @ C[j], pc)
        self.dict_pull = dict_pull
        n1, n2 = self.u_k.shape[:2]
        ii = (np.arange(n1) >= 1).astype(float)[:, None]
        jj = (np.arange(n2) >= 1).astype(float)[None, :]
        self.L_diag = (2.0 + ii + jj) / cfg.h ** 2

    def _apply_G(self, v):
        return np.einsum("...cd,...d->...c", self.G, v)

    def hess(self, lam):
        S, alpha, kappa = self.S, self.cfg.alpha, self.kappa

        def apply(v):
            Lv = _gram_L(v, self.cfg)
            return self._apply_G(v) + S * (lam * (v + Lv) + alpha * Lv) + kappa * v

        return apply

    def linear(self, lam):
        """Gradient of the model at ``u_k``; the QP is posed in the step ``u - u_k``."""
        u = self.u_k
        Lu = _gram_L(u, self.cfg)
        return self.grad_data + self.S * self.cfg.alpha * Lu + self.kappa * u - self.dict_pull

    def _block_diag(self, lam):
        return self.S * (lam * (1.0 + self.L_diag[..., None]) + self.cfg.alpha * self.L_diag[..., None]) + self.kappa

    def precond(self, lam):
        diag = self._block_diag(lam)
        B = self.G + np.einsum("...c,cd->...cd", diag, np.eye(3))

        def factory(free):
            Bf = np.where(free[..., :, None] & free[..., None, :], B, 0.0)
            Bf = Bf + np.einsum("...c,cd->...cd", (~free).astype(float), np.eye(3))
            Binv = np.linalg.inv(Bf)
            return lambda r: np.einsum("...cd,...d->...c", Binv, r)

        return factory

    def solve(self, lam, x0=None):
        cfg = self.cfg
        lo = np.broadcast_to(cfg.lower, self.u_k.shape)
        hi = np.broadcast_to(cfg.upper, self.u_k.shape)
        d0 = np.zeros_like(self.u_k) if x0 is None else x0 - self.u_k
        res = solve_box_qp(self.hess(lam), self.linear(lam), lo - self.u_k, hi - self.u_k, d0,
                           precond=self.precond(lam), tol=cfg.tol_qp,
                           scale=np.einsum("...cc->...c", self.G) + self._block_diag(lam),
                           maxiter=cfg.max_qp_sweeps, max_cg=500)
        res.x = np.clip(self.u_k + res.x, lo, hi)
        return res


def u_subproblem(u_k, D, C, data, lambda_k, cfg, seq, pointwise=None, model=None):
    """Solve the damped, linearized u-subproblem over the box.

    The data-misfit Hessian uses the surrogate ``(1/r) Pi'^* Pi'``.
    Raises :class:`QPNotConverged` when the QP sweep cap is hit.
    """
    model = model or _UStepModel(u_k, D, C, data, cfg, seq, pointwise)
    return model.solve(lambda_k).x


@dataclass
class _UStep:
    u: np.ndarray
    lam: float
    trials: int
    J_new: float
    step_sq: float
    qp_residual: float
    qp_sweeps: int


def backtrack_u(u_k, D, C, data, cfg, seq, J_k=None, pointwise=None):
    """Increase the damping ``lambda0 * tau^j`` until sufficient decrease.

    Returns ``(u_hat, lambda_k)``; see :func:`_backtrack` for the details
    recorded in traces.
    """
    step = _backtrack(u_k, D, C, data, cfg, seq, J_k, pointwise)
    return step.u, step.lam


def _backtrack(u_k, D, C, data, cfg, seq, J_k=None, pointwise=None):
    if J_k is None:
        J_k = objective_Jd(u_k, D, C, data, cfg, seq, pointwise)
    model = _UStepModel(u_k, D, C, data, cfg, seq, pointwise)
    scale = max(1.0, float(np.max(np.abs(u_k))))
    for j in range(cfg.max_backtrack + 1):
        lam = cfg.lambda0 * cfg.tau ** j
        res = model.solve(lam)
        u_hat = res.x
        if np.max(np.abs(u_hat - u_k)) <= 1e-13 * scale:
            # numerically a null step: keep u_k so the value is reproduced exactly
            return _UStep(np.array(u_k, dtype=float), lam, j + 1, J_k, 0.0,
                          res.residual, res.iterations)
        step_sq = _step_sq(u_hat - u_k, cfg)
        J_new = objective_Jd(u_hat, D, C, data, cfg, seq, pointwise)
        if J_new <= J_k - 0.5 * cfg.sigma_BT * lam * step_sq:
            return _UStep(u_hat, lam, j + 1, J_new, step_sq, res.residual, res.iterations)
    raise BacktrackingFailed(
        f"no sufficient decrease after {cfg.max_backtrack + 1} damping trials "
        f"(last lambda={lam:.3e})")


# -- z-step ---------------------------------------------------------------------

def eta_schedule(eta0, k, gamma):
    """Inner tolerance ``eta0 * (k + 1)^(-gamma)`` for outer index ``k >= 0``."""
    return eta0 * (k + 1.0) ** (-gamma)


@dataclass
class _ZInfo:
    n_inner: list
    certs: list
    g_before: list
    g_after: list
    inner_sq: list
    step_sq: float


def z_step(u_k, state, k, cfg, eta0, max_iters=None):
    """Run the inner dictionary-learning loop for every channel with ``lambda_j > 0``.

    Returns ``(D, C, n_k, certificates)`` where ``n_k`` lists the inner
    iteration counts per channel (0 for inactive channels).
    """
    info, new = _z_step(u_k, state, k, cfg, eta0, max_iters)
    return new.D, new.C, info.n_inner, info.certs


def _z_step(u_k, state, k, cfg, eta0, max_iters=None):
    pc = _patch_cfg(u_k.shape, cfg)
    new = state.copy()
    info = _ZInfo([0, 0, 0], [None] * 3, [0.0] * 3, [0.0] * 3, [0.0] * 3, 0.0)
    for j in range(3):
        if cfg.lam[j] == 0:
            continue
        X = forward.patch_extract(u_k[..., j] / cfg.M[j], pc)
        eta = eta_schedule(eta0[j], k, cfg.gamma)
        params = dictlearn.DictLearnParams(
            beta=_inner_beta(cfg, j), lambda_D=cfg.lambda_D, lambda_C=cfg.lambda_C,
            eta=eta, max_iters=max_iters or cfg.max_inner)
        D, C, cert = dictlearn.dict_learn(X, (state.D[j], state.C[j]), params)
        g0, g1 = cert.objective[0], cert.objective[-1]
        if not g1 <= g0:
            # roundoff at a fixed point; keep the previous iterate
            D, C, g1 = state.D[j], state.C[j], g0
        new.D[j], new.C[j] = D, C
        info.n_inner[j] = cert.n_iters
        info.certs[j] = cert
        info.g_before[j], info.g_after[j] = g0, g1
        info.inner_sq[j] = float(np.sum(cert.steps ** 2))
        info.step_sq += float(np.sum((D - state.D[j]) ** 2) + np.sum((C - state.C[j]) ** 2))
    return info, new


# -- traces ----------------------------------------------------------------------

TRACE_COLUMNS = (
    "k", "J", "J_mid", "data_residual", "grad_term",
    "dict_rho", "dict_t1", "dict_t2",
    "lambda_k", "n_backtrack", "qp_residual", "qp_sweeps",
    "step_u", "step_u_sq", "step_z",
    "n_inner_rho", "n_inner_t1", "n_inner_t2", "eta",
    "g_drop_rho", "g_drop_t1", "g_drop_t2",
    "inner_sq_rho", "inner_sq_t1", "inner_sq_t2",
    "lam_rho", "lam_t1", "lam_t2",
    "sigma_BT", "sigma1",
)


@dataclass
class IterationTrace:
    """One row per outer iteration; row 0 is the starting point.

    Columns (in CSV order):

    ``k`` outer index; ``J`` objective after the iteration; ``J_mid``
    objective after the z-step and before the u-step; ``data_residual``,
    ``grad_term``, ``dict_*`` the parts of ``J``; ``lambda_k`` accepted
    damping; ``n_backtrack`` damping trials; ``qp_residual``/``qp_sweeps``
    from the accepted QP solve; ``step_u`` and ``step_u_sq`` the scaled
    ``U``+``U1`` step norm and its square; ``step_z`` the change of all
    dictionaries and codes; ``n_inner_*`` inner iterations per channel;
    ``eta`` inner tolerance (same for all channels); ``g_drop_*`` decrease
    of the inner objective; ``inner_sq_*`` sum of squared inner steps;
    ``lam_*`` dictionary weights; ``sigma_BT``, ``sigma1`` descent
    constants.
    """

    rows: list = field(default_factory=list)
    variant: str = "nested"

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([row.get(name, np.nan) for row in self.rows], dtype=float)

    @property
    def J(self):
        return self.column("J")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row.get(c), c in _INT_COLUMNS) for c in TRACE_COLUMNS])

    @classmethod
    def from_csv(cls, path, variant="nested"):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty trace")
            rows = []
            for rec in reader:
                if len(rec) != len(header):
                    raise ValueError(f"{path}: row has {len(rec)} fields, header {len(header)}")
                rows.append({h: (float(v) if v != "" else np.nan) for h, v in zip(header, rec)})
        return cls(rows=rows, variant=variant)


_INT_COLUMNS = {"k", "n_backtrack", "qp_sweeps"} | {f"n_inner_{n}" for n in CHANNELS}


def _fmt(value, integer=False):
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return ""
    return str(int(value)) if integer else repr(value)


@dataclass
class SolveResult:
    u: np.ndarray
    state: DictState
    trace: IterationTrace
    converged: bool

    @property
    def D(self):
        return self.state.D

    @property
    def C(self):
        return self.state.C


# -- outer loop -------------------------------------------------------------------

def default_u0(shape, cfg):
    """Constant image at the middle of the admissible box."""
    return np.broadcast_to(0.5 * (cfg.lower + cfg.upper), tuple(shape[:2]) + (3,)).copy()


def _solve(data, cfg, seq, u0=None, z0=None, inner_cap=None, stop_on_tolerance=True,
           n_outer=None, pointwise=None, variant="nested", callback=None):
    n1, n2 = data.data.shape[:2]
    u = default_u0((n1, n2), cfg) if u0 is None else np.clip(np.asarray(u0, float), cfg.lower, cfg.upper)
    state = DictState.initial(cfg.p, n1 * n2, cfg.dict_init) if z0 is None else z0.copy()
    eta0 = [math.sqrt(float(np.sum(state.C[j] ** 2) + np.sum(state.D[j] ** 2))) for j in range(3)]
    trace = IterationTrace(variant=variant)
    terms = objective_terms(u, state.D, state.C, data, cfg, seq, pointwise)
    if not terms["feasible"]:
        raise ValueError("starting point is not admissible")
    trace.rows.append({"k": 0, "J": terms["total"], "data_residual": terms["data"],
                       "grad_term": terms["grad"], "dict_rho": terms["dict"][0],
                       "dict_t1": terms["dict"][1], "dict_t2": terms["dict"][2]})
    J = terms["total"]
    n_outer = cfg.max_outer if n_outer is None else n_outer
    converged = False
    sigma1 = min(cfg.lambda_D, cfg.lambda_C)
    for k in range(n_outer):
        zinfo, state = _z_step(u, state, k, cfg, eta0, inner_cap)
        J_mid = objective_Jd(u, state.D, state.C, data, cfg, seq, pointwise)
        step = _backtrack(u, state.D, state.C, data, cfg, seq, J_mid, pointwise)
        u = step.u
        terms = objective_terms(u, state.D, state.C, data, cfg, seq, pointwise)
        J = terms["total"]
        row = {
            "k": k + 1, "J": J, "J_mid": J_mid, "data_residual": terms["data"],
            "grad_term": terms["grad"], "dict_rho": terms["dict"][0],
            "dict_t1": terms["dict"][1], "dict_t2": terms["dict"][2],
            "lambda_k": step.lam, "n_backtrack": step.trials,
            "qp_residual": step.qp_residual, "qp_sweeps": step.qp_sweeps,
            "step_u": math.sqrt(step.step_sq), "step_u_sq": step.step_sq,
            "step_z": math.sqrt(zinfo.step_sq),
            "eta": eta_schedule(eta0[0], k, cfg.gamma),
            "sigma_BT": cfg.sigma_BT, "sigma1": sigma1,
        }
        for j, name in enumerate(CHANNELS):
            row[f"n_inner_{name}"] = zinfo.n_inner[j]
            row[f"g_drop_{name}"] = zinfo.g_before[j] - zinfo.g_after[j]
            row[f"inner_sq_{name}"] = zinfo.inner_sq[j]
            row[f"lam_{name}"] = cfg.lam[j]
        trace.rows.append(row)
        if callback is not None:
            callback(k + 1, u, state, row)
        if stop_on_tolerance and step.step_sq < cfg.eps1 ** 2 and zinfo.step_sq < cfg.eps2 ** 2:
            converged = True
            break
    return SolveResult(u=u, state=state, trace=trace, converged=converged)


def nested_solve(data, cfg, seq, u0=None, z0=None, pointwise=None, callback=None):
    """Nested alternating minimization; the inner loop runs to tolerance ``eta_k``.

    Stops when both the scaled u-step and the dictionary/code change fall
    below ``eps1``/``eps2``, or after ``cfg.max_outer`` iterations.
    """
    return _solve(data, cfg, seq, u0, z0, pointwise=pointwise, variant="nested",
                  callback=callback)


def one_step_solve(data, cfg, seq, u0=None, z0=None, pointwise=None, callback=None):
    """Same as :func:`nested_solve` with a single inner update per outer iteration."""
    return _solve(data, cfg, seq, u0, z0, inner_cap=1, pointwise=pointwise,
                  variant="one-step", callback=callback)


def vanilla_lm_solve(data, cfg, seq, u0=None, n_iters=None, pointwise=None, callback=None):
    """Levenberg-Marquardt without the dictionary prior (``lambda_j = 0``).

    Runs a fixed budget of ``cfg.lm_iters`` iterations (or `n_iters`).
    Returns ``(u, trace)``.
    """
    lm_cfg = replace(cfg, lam=(0.0, 0.0, 0.0))
    res = _solve(data, lm_cfg, seq, u0, stop_on_tolerance=False,
                 n_outer=cfg.lm_iters if n_iters is None else n_iters,
                 pointwise=pointwise, variant="lm", callback=callback)
    return res.u, res.trace


SOLVERS = {"nested": nested_solve, "one-step": one_step_solve}


def solve_variant(variant, data, cfg, seq, u0=None):
    """Dispatch by name; returns ``(u, trace)``."""
    if variant == "lm":
        return vanilla_lm_solve(data, cfg, seq, u0)
    if variant not in SOLVERS:
        raise ValueError(f"unknown variant {variant!r}")
    res = SOLVERS[variant](data, cfg, seq, u0)
    return res.u, res.trace


# -- diagnostics ------------------------------------------------------------------

def _descent_constant(trace):
    rows = trace.rows[1:]
    if not rows:
        return math.nan
    lam_min = min(r["lambda_k"] for r in rows)
    c = rows[0]["sigma_BT"] * lam_min
    weights = [rows[0][f"lam_{n}"] for n in CHANNELS if rows[0][f"lam_{n}"] > 0]
    if weights:
        c = min(c, rows[0]["sigma1"] * min(weights))
    return c


def stationarity_estimate(trace):
    """Running minimum of the per-iteration residual surrogate.

    The surrogate is ``r_k = sqrt(step_u_sq + sum_j inner_sq_j)``: the
    scaled u-step plus all inner dictionary steps of iteration k.  Also
    returns the envelope ``C sqrt((J_0 - J_N + sum eta^2) / N)`` with
    ``C = sqrt(2 / c)``, ``c`` the smallest realized descent constant; by
    the sufficient-decrease conditions the running minimum stays below it.

    Returns
    -------
    running_min, envelope : ndarray, one entry per outer iteration
    """
    rows = trace.rows[1:]
    if not rows:
        return np.array([]), np.array([])
    r = np.array([math.sqrt(row["step_u_sq"] + sum(row[f"inner_sq_{n}"] for n in CHANNELS))
                  for row in rows])
    running = np.minimum.accumulate(r)
    J = trace.J
    eta_sq = np.cumsum([row["eta"] ** 2 if row["eta"] == row["eta"] else 0.0 for row in rows])
    N = np.arange(1, len(rows) + 1)
    C = math.sqrt(2.0 / _descent_constant(trace))
    envelope = C * np.sqrt(np.maximum(J[0] - J[1:] + eta_sq, 0.0) / N)
    return running, envelope


def check_trace(trace, strict_inner_bound=True):
    """Verify the descent properties recorded in a trace.

    Returns a list of ``(name, passed, first_failing_k_or_None, detail)``.
    """
    rows = trace.rows
    results = []
    if len(rows) < 2:
        raise ValueError("trace has no iterations")

    def first_fail(pred):
        for row in rows[1:]:
            if not pred(row):
                return int(row["k"])
        return None

    prev = {int(r["k"]): r for r in rows}
    bad = first_fail(lambda r: r["J"] <= prev[int(r["k"]) - 1]["J"])
    results.append(("monotone_J", bad is None, bad, "J_d non-increasing"))
    bad = first_fail(lambda r: r["J_mid"] <= prev[int(r["k"]) - 1]["J"])
    results.append(("z_step_descent", bad is None, bad, "z-step does not increase J_d"))
    bad = first_fail(lambda r: r["J"] <= r["J_mid"] - 0.5 * r["sigma_BT"] * r["lambda_k"] * r["step_u_sq"])
    results.append(("u_step_descent", bad is None, bad,
                    "J(u+) <= J(u) - sigma_BT lambda_k/2 ||du||^2"))

    def inner_ok(r):
        for n in CHANNELS:
            nk = r[f"n_inner_{n}"]
            if nk == 0:
                continue
            bound = 2.0 * r[f"g_drop_{n}"] / (r["sigma1"] * r["eta"] ** 2)
            if nk > bound + (0 if strict_inner_bound else 1):
                return False
        return True

    bad = first_fail(inner_ok)
    results.append(("inner_complexity", bad is None, bad,
                    "n_k <= 2 (g(z_k) - g(z_k+1)) / (sigma1 eta_k^2)"
                    + ("" if strict_inner_bound else " + 1")))
    running, envelope = stationarity_estimate(trace)
    viol = np.nonzero(running > envelope * (1 + 1e-12))[0]
    results.append(("sublinear_envelope", viol.size == 0,
                    int(viol[0]) + 1 if viol.size else None,
                    "min_k r_k <= C sqrt((J_0 - J_N + sum eta^2)/N)"))
    return results
