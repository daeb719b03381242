"""Time-discrete Bloch recursion and the pointwise signal map.

The magnetization of a single voxel evolves as

.. math::

    m_{k+1} = E_k(T_1, T_2) R(\\alpha_k) m_k + b_k(T_1),
    \\qquad m_0 = (0, 0, m_0)^\\top

with ``E_k = diag(e^{-TR_k/T2}, e^{-TR_k/T2}, e^{-TR_k/T1})`` and
``b_k = (0, 0, m_eq (1 - e^{-TR_k/T1}))``.  The stored trajectory is
``m_1, ..., m_L``: ``m_k`` is the state after the k-th RF pulse *and* the
subsequent relaxation over ``TR_k``.

Relaxation times are projected onto ``[0, inf)`` before evaluation; at
``T = 0`` the exponentials take their limit value 0 and so do their
derivatives.

All functions broadcast over leading axes, so a whole image of parameters
can be simulated in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ROTATION_AXIS",
    "PulseSequence",
    "default_sequence",
    "relax_matrix",
    "relax_offset",
    "rotation",
    "simulate_magnetization",
    "simulate_with_derivatives",
    "signal",
    "signal_jacobian",
    "signal_and_jacobian",
    "read_sequence",
    "write_sequence",
]

#: Axis of the RF rotation. ``"x"`` or ``"y"``.
ROTATION_AXIS = "x"

# exp(-x) underflows to exactly 0 beyond this; also keeps x/t finite.
_EXP_CUTOFF = 745.0


@dataclass(frozen=True)
class PulseSequence:
    """Acquisition protocol driving the discrete Bloch system.

    Parameters
    ----------
    tr : array_like
        Repetition times in ms, one per time step, all positive.
    flip : array_like
        Flip angles in radians, one per time step.
    m0 : float
        Initial longitudinal magnetization.
    m_eq : float
        Equilibrium magnetization.
    seed : int or None
        Seed the sequence was generated from, if any. Informational only.
    """

    tr: np.ndarray
    flip: np.ndarray
    m0: float = 1.0
    m_eq: float = 1.0
    seed: int | None = None
    axis: str = field(default=ROTATION_AXIS)

    def __post_init__(self):
        tr = np.asarray(self.tr, dtype=float).ravel()
        flip = np.asarray(self.flip, dtype=float).ravel()
        if tr.shape != flip.shape:
            raise ValueError(
                f"tr and flip must have equal length, got {tr.size} and {flip.size}")
        if tr.size == 0:
            raise ValueError("sequence must contain at least one time step")
        if np.any(tr <= 0) or not np.all(np.isfinite(tr)):
            raise ValueError("repetition times must be finite and positive")
        if self.axis not in ("x", "y"):
            raise ValueError(f"unknown rotation axis {self.axis!r}")
        tr.flags.writeable = False
        flip.flags.writeable = False
        object.__setattr__(self, "tr", tr)
        object.__setattr__(self, "flip", flip)

    @property
    def L(self) -> int:
        return int(self.tr.size)

    def __eq__(self, other):
        if not isinstance(other, PulseSequence):
            return NotImplemented
        return (np.array_equal(self.tr, other.tr)
                and np.array_equal(self.flip, other.flip)
                and self.m0 == other.m0 and self.m_eq == other.m_eq
                and self.axis == other.axis)

    __hash__ = None


def default_sequence(L=20, seed=0, m_eq=1.0):
    """Inversion-recovery fingerprinting sequence.

    The first pulse is an inversion (flip angle pi), the remaining flip
    angles are drawn uniformly from [10, 70] degrees and the repetition
    times uniformly from [11, 16] ms.  The start state is the equilibrium
    ``m0 = m_eq``, so the inversion pulse takes it to ``-m_eq``.
    """
    rng = np.random.default_rng(seed)
    flip = np.deg2rad(rng.uniform(10.0, 70.0, size=L))
    flip[0] = np.pi
    tr = rng.uniform(11.0, 16.0, size=L)
    return PulseSequence(tr=tr, flip=flip, m0=m_eq, m_eq=m_eq, seed=seed)


def _decay(t, tr):
    """Return ``exp(-tr/t)`` and its derivative in ``t`` with the t<=0 limits."""
    t = np.asarray(t, dtype=float)
    pos = t > 0
    safe_t = np.where(pos, t, 1.0)
    with np.errstate(over="ignore"):
        x = tr / safe_t
    live = pos & (x < _EXP_CUTOFF)
    x = np.where(live, x, 0.0)
    e = np.where(live, np.exp(-x), 0.0)
    de = np.where(live, e * x / safe_t, 0.0)
    return e, de


def relax_matrix(t1, t2, tr):
    """Diagonal relaxation matrix ``diag(e^{-tr/t2}, e^{-tr/t2}, e^{-tr/t1})``.

    Negative relaxation times are projected to zero, where the limit value
    0 is used.  ``t1 = np.inf`` gives a unit longitudinal entry.
    """
    e1, _ = _decay(t1, tr)
    e2, _ = _decay(t2, tr)
    return np.diag([float(e2), float(e2), float(e1)])


def relax_offset(t1, tr, m_eq=1.0):
    """Longitudinal recovery term ``(0, 0, m_eq (1 - e^{-tr/t1}))``."""
    e1, _ = _decay(t1, tr)
    return np.array([0.0, 0.0, m_eq * (1.0 - float(e1))])


def rotation(alpha, axis=ROTATION_AXIS):
    """RF rotation matrix for flip angle `alpha` (radians).

    About the x-axis a flip of pi/2 takes the equilibrium state (0, 0, 1)
    to (0, 1, 0).
    """
    c, s = np.cos(alpha), np.sin(alpha)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0],
                         [0.0, c, s],
                         [0.0, -s, c]])
    if axis == "y":
        return np.array([[c, 0.0, -s],
                         [0.0, 1.0, 0.0],
                         [s, 0.0, c]])
    raise ValueError(f"unknown rotation axis {axis!r}")


def _rotations(seq):
    return np.stack([rotation(a, seq.axis) for a in seq.flip])


def simulate_magnetization(t1, t2, seq):
    """Run the discrete Bloch recursion.

    Parameters
    ----------
    t1, t2 : array_like
        Relaxation times in ms; broadcast against each other.
    seq : PulseSequence

    Returns
    -------
    m : ndarray, shape ``broadcast(t1, t2).shape + (L, 3)``
        States ``m_1, ..., m_L``.
    """
    t1, t2 = np.broadcast_arrays(np.asarray(t1, float), np.asarray(t2, float))
    shape = t1.shape
    t1, t2 = t1.ravel(), t2.ravel()
    n = t1.size
    rots = _rotations(seq)
    m = np.zeros((n, 3))
    m[:, 2] = seq.m0
    out = np.empty((n, seq.L, 3))
    for k in range(seq.L):
        e1, _ = _decay(t1, seq.tr[k])
        e2, _ = _decay(t2, seq.tr[k])
        v = m @ rots[k].T
        m = np.empty_like(v)
        m[:, 0] = e2 * v[:, 0]
        m[:, 1] = e2 * v[:, 1]
        m[:, 2] = e1 * v[:, 2] + seq.m_eq * (1.0 - e1)
        out[:, k] = m
    return out.reshape(shape + (seq.L, 3))


def simulate_with_derivatives(t1, t2, seq):
    """Bloch recursion carrying the derivatives with respect to T1 and T2.

    Returns
    -------
    m : ndarray, shape ``(..., L, 3)``
    dm : ndarray, shape ``(..., L, 3, 2)``
        ``dm[..., 0]`` is dm/dT1, ``dm[..., 1]`` is dm/dT2.
    """
    t1, t2 = np.broadcast_arrays(np.asarray(t1, float), np.asarray(t2, float))
    shape = t1.shape
    t1, t2 = t1.ravel(), t2.ravel()
    n = t1.size
    rots = _rotations(seq)
    m = np.zeros((n, 3))
    m[:, 2] = seq.m0
    d1 = np.zeros((n, 3))
    d2 = np.zeros((n, 3))
    out = np.empty((n, seq.L, 3))
    dout = np.empty((n, seq.L, 3, 2))
    for k in range(seq.L):
        e1, de1 = _decay(t1, seq.tr[k])
        e2, de2 = _decay(t2, seq.tr[k])
        R = rots[k].T
        v, w1, w2 = m @ R, d1 @ R, d2 @ R
        m = np.empty_like(v)
        m[:, 0] = e2 * v[:, 0]
        m[:, 1] = e2 * v[:, 1]
        m[:, 2] = e1 * v[:, 2] + seq.m_eq * (1.0 - e1)
        # m'_{k+1}[h] = E'_k[h] R m_k + E_k R m'_k[h] + b'_k[h]
        n1 = np.empty_like(v)
        n1[:, 0] = e2 * w1[:, 0]
        n1[:, 1] = e2 * w1[:, 1]
        n1[:, 2] = de1 * v[:, 2] + e1 * w1[:, 2] - seq.m_eq * de1
        n2 = np.empty_like(v)
        n2[:, 0] = de2 * v[:, 0] + e2 * w2[:, 0]
        n2[:, 1] = de2 * v[:, 1] + e2 * w2[:, 1]
        n2[:, 2] = e1 * w2[:, 2]
        d1, d2 = n1, n2
        out[:, k] = m
        dout[:, k, :, 0] = d1
        dout[:, k, :, 1] = d2
    return (out.reshape(shape + (seq.L, 3)),
            dout.reshape(shape + (seq.L, 3, 2)))


def signal(u, seq):
    """Pointwise signal map ``rho * (m_k,1 + i m_k,2)``, k = 1..L.

    Parameters
    ----------
    u : array_like, shape ``(..., 3)``
        Channels (rho, T1, T2).
    seq : PulseSequence

    Returns
    -------
    ndarray of complex, shape ``(..., L)``
    """
    u = np.asarray(u, dtype=float)
    m = simulate_magnetization(u[..., 1], u[..., 2], seq)
    return u[..., 0, None] * (m[..., 0] + 1j * m[..., 1])


def signal_and_jacobian(u, seq):
    """Signal and its Jacobian with respect to (rho, T1, T2).

    Returns
    -------
    s : ndarray, shape ``(..., L)`` complex
    jac : ndarray, shape ``(..., L, 3)`` complex
    """
    u = np.asarray(u, dtype=float)
    m, dm = simulate_with_derivatives(u[..., 1], u[..., 2], seq)
    m12 = m[..., 0] + 1j * m[..., 1]
    dm12 = dm[..., 0, :] + 1j * dm[..., 1, :]
    rho = u[..., 0, None]
    jac = np.empty(m12.shape + (3,), dtype=complex)
    jac[..., 0] = m12
    jac[..., 1:] = rho[..., None] * dm12
    return rho * m12, jac


def signal_jacobian(u, seq):
    """Analytic Jacobian of :func:`signal`, shape ``(..., L, 3)``."""
    return signal_and_jacobian(u, seq)[1]


# -- plain-text persistence ---------------------------------------------------

def _fmt_list(values):
    return ", ".join(repr(float(v)) for v in values)


def write_sequence(seq, path):
    """Write `seq` as ``key = value`` lines (flip angles in degrees)."""
    lines = [
        f"L = {seq.L}",
        f"tr = {_fmt_list(seq.tr)}",
        f"flip_deg = {_fmt_list(np.rad2deg(seq.flip))}",
        f"m0 = {float(seq.m0)!r}",
        f"m_eq = {float(seq.m_eq)!r}",
    ]
    if seq.seed is not None:
        lines.append(f"seed = {int(seq.seed)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def sequence_from_mapping(values):
    """Build a sequence from parsed key/value strings.

    Without explicit ``tr``/``flip_deg`` the default generator is used with
    ``L`` and ``seed``.
    """
    allowed = {"L", "tr", "flip_deg", "m0", "m_eq", "seed"}
    unknown = set(values) - allowed
    if unknown:
        raise KeyError(f"unknown sequence keys: {sorted(unknown)}")
    seed = int(values["seed"]) if "seed" in values else 0
    m_eq = float(values.get("m_eq", 1.0))
    if "tr" in values or "flip_deg" in values:
        if not ("tr" in values and "flip_deg" in values):
            raise KeyError("tr and flip_deg must be given together")
        tr = _parse_floats(values["tr"])
        flip = np.deg2rad(_parse_floats(values["flip_deg"]))
        if "L" in values and int(values["L"]) != tr.size:
            raise ValueError(f"L={values['L']} disagrees with {tr.size} listed TRs")
        return PulseSequence(tr=tr, flip=flip, m0=float(values.get("m0", m_eq)),
                             m_eq=m_eq, seed=seed if "seed" in values else None)
    seq = default_sequence(L=int(values.get("L", 20)), seed=seed, m_eq=m_eq)
    if "m0" in values:
        seq = PulseSequence(tr=seq.tr, flip=seq.flip, m0=float(values["m0"]),
                            m_eq=m_eq, seed=seed)
    return seq


def _parse_floats(text):
    if isinstance(text, (list, tuple, np.ndarray)):
        return np.asarray(text, dtype=float)
    return np.array([float(x) for x in str(text).replace(",", " ").split()])


def read_sequence(path):
    """Read a sequence written by :func:`write_sequence`."""
    from .config import read_keyvalue
    return sequence_from_mapping(read_keyvalue(path))
