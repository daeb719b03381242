"""Discrete forward operator ``F_d = A o Pi_d`` and the linear operators
around it.

Shapes used throughout:

* parameter images ``u``: ``(n1, n2, 3)`` with channels (rho, T1, T2)
* magnetization/k-space stacks: ``(n1, n2, L)`` complex
* masks: ``(n1, n2, L)`` boolean

The 2D DFT is orthonormal, so with full sampling ``A^* A = I``.  Masks
select frequencies in natural (non-shifted) FFT ordering.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.fft

from . import bloch

__all__ = [
    "SamplingMaskSet",
    "KSpaceData",
    "PatchConfig",
    "Linearization",
    "bloch_image",
    "apply_A",
    "apply_A_adjoint",
    "patch_extract",
    "patch_adjoint",
    "grad_h",
    "div_h",
    "laplace_h",
    "forward",
    "linearize",
    "forward_jvp",
    "forward_vjp",
    "approx_normal_apply",
    "save_kspace",
    "load_kspace",
]


def _workers():
    value = os.environ.get("QMRI_THREADS")
    return int(value) if value else 1


@dataclass(frozen=True)
class SamplingMaskSet:
    """Per-time-step binary sampling masks.

    Attributes
    ----------
    masks : ndarray of bool, shape (n1, n2, L)
    r : int
        Undersampling factor.
    seed : int
        Seed that fixed the line offset (0 if not random).
    """

    masks: np.ndarray
    r: int = 1
    seed: int = 0

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 3:
            raise ValueError(f"masks must be (n1, n2, L), got shape {masks.shape}")
        if int(self.r) < 1:
            raise ValueError("undersampling factor must be >= 1")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "r", int(self.r))

    @property
    def shape(self):
        return self.masks.shape

    @classmethod
    def full(cls, n1, n2, L):
        return cls(np.ones((n1, n2, L), dtype=bool), r=1)


@dataclass(frozen=True)
class KSpaceData:
    """Masked k-space stack; entries outside the masks are zero."""

    data: np.ndarray
    masks: SamplingMaskSet

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        if data.shape != self.masks.shape:
            raise ValueError(f"data shape {data.shape} != mask shape {self.masks.shape}")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class PatchConfig:
    """Overlapping p x p patches with periodic wrap-around."""

    p: int
    n1: int
    n2: int

    def __post_init__(self):
        if self.p < 1 or self.p > min(self.n1, self.n2):
            raise ValueError(f"patch size {self.p} invalid for a {self.n1}x{self.n2} image")

    @property
    def K(self):
        return self.p * self.p

    @property
    def M(self):
        return self.n1 * self.n2


# -- Bloch part ---------------------------------------------------------------

def bloch_image(u, seq):
    """Apply the pointwise signal map to every pixel: ``(n1, n2, 3) -> (n1, n2, L)``."""
    return bloch.signal(u, seq)


# -- Fourier sampling -----------------------------------------------------------

def _check_masks(shape, masks):
    if tuple(shape) != tuple(masks.shape):
        raise ValueError(f"array shape {tuple(shape)} does not match masks {masks.shape}")


def apply_A(y, masks):
    """Per-slice orthonormal 2D DFT followed by the sampling masks."""
    y = np.asarray(y)
    _check_masks(y.shape, masks)
    f = scipy.fft.fft2(y, axes=(0, 1), norm="ortho", workers=_workers())
    f *= masks.masks
    return KSpaceData(f, masks)


def apply_A_adjoint(f):
    """Adjoint of :func:`apply_A`: mask, then per-slice inverse DFT."""
    if not isinstance(f, KSpaceData):
        raise TypeError("apply_A_adjoint expects KSpaceData")
    masked = f.data * f.masks.masks
    return scipy.fft.ifft2(masked, axes=(0, 1), norm="ortho", workers=_workers())


# -- patches ------------------------------------------------------------------

def _patch_offsets(p):
    # row index a + b*p of a patch vector <-> pixel offset (a, b)
    for b in range(p):
        for a in range(p):
            yield a, b


def patch_extract(img, cfg):
    """Extract all ``n1*n2`` overlapping patches as columns of a ``K x M`` matrix.

    Column ``k + l*n1`` (0-based) holds the patch with top-left corner
    ``(k, l)``; inside a patch, entry ``a + b*p`` is pixel ``(k+a, l+b)``.
    Indices wrap periodically.
    """
    img = np.asarray(img, dtype=float)
    if img.shape != (cfg.n1, cfg.n2):
        raise ValueError(f"image shape {img.shape} != ({cfg.n1}, {cfg.n2})")
    out = np.empty((cfg.K, cfg.M))
    for row, (a, b) in enumerate(_patch_offsets(cfg.p)):
        out[row] = np.roll(img, (-a, -b), axis=(0, 1)).ravel(order="F")
    return out


def patch_adjoint(Y, cfg):
    """Adjoint of :func:`patch_extract`; ``P^* P = p^2 I``."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (cfg.K, cfg.M):
        raise ValueError(f"patch matrix shape {Y.shape} != ({cfg.K}, {cfg.M})")
    img = np.zeros((cfg.n1, cfg.n2))
    for row, (a, b) in enumerate(_patch_offsets(cfg.p)):
        img += np.roll(Y[row].reshape((cfg.n1, cfg.n2), order="F"), (a, b), axis=(0, 1))
    return img


# -- finite differences ---------------------------------------------------------

def grad_h(img, h=1.0):
    """Forward differences with zero padding: ``(n1, n2) -> (n1, n2, 2)``."""
    img = np.asarray(img, dtype=float)
    g = np.empty(img.shape + (2,))
    g[:-1, :, 0] = img[1:] - img[:-1]
    g[-1, :, 0] = -img[-1]
    g[:, :-1, 1] = img[:, 1:] - img[:, :-1]
    g[:, -1, 1] = -img[:, -1]
    return g / h


def div_h(v, h=1.0):
    """Discrete divergence, the negative adjoint of :func:`grad_h`."""
    v = np.asarray(v, dtype=float)
    gx, gy = v[..., 0], v[..., 1]
    d = np.empty(v.shape[:-1])
    d[0] = gx[0]
    d[1:] = gx[1:] - gx[:-1]
    d[:, 0] += gy[:, 0]
    d[:, 1:] += gy[:, 1:] - gy[:, :-1]
    return d / h


def laplace_h(img, h=1.0):
    """``div_h(grad_h(img))``; acts per channel on trailing-channel stacks."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        return np.stack([laplace_h(img[..., c], h) for c in range(img.shape[-1])], axis=-1)
    return div_h(grad_h(img, h), h)


# -- nonlinear forward map ----------------------------------------------------

def forward(u, seq, masks):
    """``F_d(u) = A(Pi_d(u))``."""
    return apply_A(bloch_image(u, seq), masks)


@dataclass
class Linearization:
    """Forward value and pixelwise Jacobian at a point ``u``.

    ``jac`` has shape ``(n1, n2, L, 3)``; ``gram`` holds the real 3x3
    matrices ``Re(J^H J)`` per pixel.
    """

    u: np.ndarray
    signal: np.ndarray
    jac: np.ndarray
    masks: SamplingMaskSet

    @property
    def value(self):
        return apply_A(self.signal, self.masks)

    @property
    def gram(self):
        g = getattr(self, "_gram", None)
        if g is None:
            g = np.einsum("...lc,...ld->...cd", self.jac.conj(), self.jac).real
            self._gram = g
        return g

    def jvp(self, h):
        h = np.asarray(h, dtype=float)
        if h.shape != self.u.shape:
            raise ValueError(f"direction shape {h.shape} != {self.u.shape}")
        return apply_A(np.einsum("...lc,...c->...l", self.jac, h), self.masks)

    def vjp(self, w):
        y = apply_A_adjoint(w)
        return np.einsum("...lc,...l->...c", self.jac.conj(), y).real


def linearize(u, seq, masks, pointwise=None):
    """Evaluate the signal map and its Jacobian once for repeated products.

    `pointwise` optionally replaces :func:`bloch.signal_and_jacobian`; it
    must map ``(..., 3)`` parameters to ``(signal (..., L), jac (..., L, 3))``.
    """
    u = np.asarray(u, dtype=float)
    fn = pointwise or (lambda v: bloch.signal_and_jacobian(v, seq))
    s, jac = fn(u)
    return Linearization(u=u, signal=s, jac=jac, masks=masks)


def forward_jvp(u, h, seq, masks):
    """Directional derivative ``F_d'(u)[h]``."""
    return linearize(u, seq, masks).jvp(h)


def forward_vjp(u, w, seq):
    """Real adjoint product ``Re(F_d'(u)^* w)``, shape ``(n1, n2, 3)``."""
    return linearize(u, seq, w.masks).vjp(w)


def approx_normal_apply(u, h, seq, r, gram=None):
    """Apply the surrogate ``(1/r) Re(Pi'(u)^* Pi'(u))`` pixel by pixel."""
    if r < 1:
        raise ValueError("undersampling factor r must be >= 1")
    if gram is None:
        jac = bloch.signal_jacobian(u, seq)
        gram = np.einsum("...lc,...ld->...cd", jac.conj(), jac).real
    return np.einsum("...cd,...d->...c", gram, np.asarray(h, dtype=float)) / r


# -- binary persistence --------------------------------------------------------
#
# Layout (little endian):
#   magic     4 bytes  b"QMRK"
#   version   uint32   1
#   n1,n2,L   3x uint32
#   r         uint32
#   seed      int64
#   dtype     uint8    8 -> complex64, 16 -> complex128
#   pad       7 bytes  zero
#   payload   n1*n2*L complex values, C order over (n1, n2, L),
#             each stored as interleaved (real, imag)
#   masks     packbits of the (n1, n2, L) bool array in C order, bit order big

_MAGIC = b"QMRK"
_HEADER = struct.Struct("<4sIIIIIqB7x")


def save_kspace(f, path, dtype=np.complex128):
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.complex64), np.dtype(np.complex128)):
        raise ValueError("dtype must be complex64 or complex128")
    n1, n2, L = f.data.shape
    header = _HEADER.pack(_MAGIC, 1, n1, n2, L, f.masks.r, int(f.masks.seed),
                          dtype.itemsize)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.data, dtype=dtype.newbyteorder("<")).tobytes())
        fh.write(np.packbits(f.masks.masks, axis=None).tobytes())


def load_kspace(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n1, n2, L, r, seed, itemsize = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a k-space file (magic={magic!r}, version={version})")
    dtype = {8: np.dtype("<c8"), 16: np.dtype("<c16")}.get(itemsize)
    if dtype is None:
        raise ValueError(f"{path}: unsupported element size {itemsize}")
    count = n1 * n2 * L
    offset = _HEADER.size
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    offset += count * dtype.itemsize
    bits = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    masks = np.unpackbits(bits, count=count).astype(bool).reshape(n1, n2, L)
    return KSpaceData(data.reshape(n1, n2, L).astype(complex),
                      SamplingMaskSet(masks, r=r, seed=seed))
