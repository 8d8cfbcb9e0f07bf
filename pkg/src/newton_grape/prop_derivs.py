"""Matrix exponentials and their directional derivatives.

The slice propagator P = exp(-i*H*dt) and its first and second derivatives
with respect to control amplitudes are read off block-triangular augmented
exponentials: a 2x2 block matrix for first derivatives,

    exp([[H, Hk], [0, H]] * (-i*dt)) = [[P, dP/dc_k], [0, P]],

and a 3x3 block matrix for second derivatives, whose superdiagonal carries
the first derivatives (recycled, never recomputed) and whose top-right
block pair sums to d2P/dc_i dc_j.

Because every augmented matrix of one slice shares the same diagonal block,
the exponentials are evaluated blockwise: one Pade-13 scaling-and-squaring
pass on the diagonal is shared by all channels and channel pairs of the
slice.  The arithmetic is identical to exponentiating each dense augmented
matrix and reading its blocks, which is what the tests check against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import lu_factor, lu_solve

__all__ = ["expm", "slice_propagator_with_derivs", "SlicePropagators"]

# Diagonal Pade order 13 coefficients and its scaling threshold
# (Higham, SIAM J. Matrix Anal. Appl. 26 (2005) 1179).
_B = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def _check_square_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _squaring_count(norm1: float) -> int:
    if norm1 <= _THETA13 or norm1 == 0.0:
        return 0
    return max(0, int(np.ceil(np.log2(norm1 / _THETA13))))


def expm(a: NDArray) -> NDArray:
    """Matrix exponential by scaling and squaring with diagonal Pade-13.

    The squaring count is taken from the 1-norm of the argument so that the
    scaled matrix falls below the order-13 accuracy threshold.
    """
    a = _check_square_finite(a)
    n = a.shape[0]
    dtype = np.result_type(a.dtype, np.float64)
    a = a.astype(dtype, copy=False)
    ident = np.eye(n, dtype=dtype)
    s = _squaring_count(float(np.linalg.norm(a, 1)))
    if s:
        a = a / (2.0 ** s)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (
        a6 @ (_B[13] * a6 + _B[11] * a4 + _B[9] * a2)
        + _B[7] * a6
        + _B[5] * a4
        + _B[3] * a2
        + _B[1] * ident
    )
    v = (
        a6 @ (_B[12] * a6 + _B[10] * a4 + _B[8] * a2)
        + _B[6] * a6
        + _B[4] * a4
        + _B[2] * a2
        + _B[0] * ident
    )
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    return r


@dataclass(frozen=True)
class SlicePropagators:
    """Propagator of one time slice together with its control derivatives.

    ``d2p`` holds one entry per unordered channel pair (i <= j); the pair is
    symmetric by construction, use :meth:`second_derivative` for either order.
    """

    p: NDArray[np.complex128]
    dp: dict[int, NDArray[np.complex128]]
    d2p: dict[tuple[int, int], NDArray[np.complex128]]
    dt: float

    def second_derivative(self, i: int, j: int) -> NDArray[np.complex128]:
        return self.d2p[(i, j) if i <= j else (j, i)]


class _BlockUT:
    """Upper block-triangular matrix with equal diagonal blocks.

    Represents, for all channels k and requested pairs p = (i, j) at once,
    the family of augmented matrices [[D, Lk, 0], [0, D, Lj], [0, 0, D]].
    ``l`` stacks the first-order blocks, channel-major; ``q`` stacks the
    symmetrized second-order blocks A_ij + A_ji, one per pair.
    """

    __slots__ = ("d", "l", "q", "ii", "jj")

    def __init__(self, d, l, q, ii, jj):
        self.d = d
        self.l = l
        self.q = q
        self.ii = ii
        self.jj = jj

    def __matmul__(self, other: "_BlockUT") -> "_BlockUT":
        d = self.d @ other.d
        l = self.d @ other.l + self.l @ other.d
        q = (
            self.d @ other.q
            + self.q @ other.d
            + self.l[self.ii] @ other.l[self.jj]
            + self.l[self.jj] @ other.l[self.ii]
        )
        return _BlockUT(d, l, q, self.ii, self.jj)

    def __add__(self, other: "_BlockUT") -> "_BlockUT":
        return _BlockUT(
            self.d + other.d, self.l + other.l, self.q + other.q, self.ii, self.jj
        )

    def __rmul__(self, c: float) -> "_BlockUT":
        return _BlockUT(c * self.d, c * self.l, c * self.q, self.ii, self.jj)

    def identity_like(self) -> "_BlockUT":
        n = self.d.shape[0]
        return _BlockUT(
            np.eye(n, dtype=self.d.dtype),
            np.zeros_like(self.l),
            np.zeros_like(self.q),
            self.ii,
            self.jj,
        )


def _block_solve(t: _BlockUT, s: _BlockUT) -> _BlockUT:
    """Solve t @ x = s for block-UT x by block back-substitution."""
    n = t.d.shape[0]
    lu = lu_factor(t.d)

    def apply_inv(stack: np.ndarray) -> np.ndarray:
        if stack.ndim == 2:
            return lu_solve(lu, stack)
        m = stack.shape[0]
        flat = stack.transpose(1, 0, 2).reshape(n, m * n)
        return lu_solve(lu, flat).reshape(n, m, n).transpose(1, 0, 2)

    xd = apply_inv(s.d)
    xl = apply_inv(s.l - t.l @ xd)
    xq = apply_inv(
        s.q - t.l[t.ii] @ xl[t.jj] - t.l[t.jj] @ xl[t.ii] - t.q @ xd
    )
    return _BlockUT(xd, xl, xq, t.ii, t.jj)


def _block_expm(m: _BlockUT, s: int) -> _BlockUT:
    ident = m.identity_like()
    if s:
        m = (1.0 / 2.0 ** s) * m
    m2 = m @ m
    m4 = m2 @ m2
    m6 = m2 @ m4
    u = m @ (
        m6 @ (_B[13] * m6 + _B[11] * m4 + _B[9] * m2)
        + _B[7] * m6
        + _B[5] * m4
        + _B[3] * m2
        + _B[1] * ident
    )
    v = (
        m6 @ (_B[12] * m6 + _B[10] * m4 + _B[8] * m2)
        + _B[6] * m6
        + _B[4] * m4
        + _B[2] * m2
        + _B[0] * ident
    )
    x = _block_solve(v + (-1.0) * u, v + u)
    for _ in range(s):
        x = x @ x
    return x


def slice_propagator_with_derivs(
    h_total: NDArray,
    controls: list[NDArray],
    dt: float,
    order: int = 1,
    pairs: list[tuple[int, int]] | None = None,
) -> SlicePropagators:
    """Slice propagator exp(-i*H*dt) with first/second control derivatives.

    Parameters
    ----------
    h_total : total slice generator, drift plus control contributions plus
        +iR if a relaxation operator is present (rad/s).
    controls : control operators H_k, one per channel (rad/s).
    dt : slice duration in seconds.
    order : 1 for first derivatives only, 2 to add second derivatives.
    pairs : channel pairs (i, j) for which second derivatives are wanted;
        defaults to the full upper triangle i <= j.  Only one of (i, j) and
        (j, i) is computed, the result being symmetric in the pair.
    """
    h_total = _check_square_finite(h_total, "h_total")
    n = h_total.shape[0]
    k = len(controls)
    ctrl = np.empty((k, n, n), dtype=complex)
    for idx, c in enumerate(controls):
        c = _check_square_finite(c, f"controls[{idx}]")
        if c.shape != (n, n):
            raise ValueError("control operators must match h_total dimension")
        ctrl[idx] = c
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    if order == 2:
        if pairs is None:
            pairs = [(i, j) for i in range(k) for j in range(i, k)]
        pairs = [(min(i, j), max(i, j)) for (i, j) in pairs]
        for (i, j) in pairs:
            if not 0 <= i <= j < k:
                raise ValueError(f"pair ({i}, {j}) references unknown channel")
    else:
        pairs = []

    a = (-1j * dt) * h_total.astype(complex)
    e = (-1j * dt) * ctrl
    ii = np.array([p[0] for p in pairs], dtype=int)
    jj = np.array([p[1] for p in pairs], dtype=int)

    # One scaling parameter per slice, bounding the 1-norm of any of the
    # slice's augmented matrices; shared so the first-derivative blocks are
    # identical between the 2x2 and 3x3 readings.
    e_norm = float(max((np.linalg.norm(ek, 1) for ek in e), default=0.0))
    s = _squaring_count(float(np.linalg.norm(a, 1)) + 2.0 * e_norm)

    m = _BlockUT(a, e, np.zeros((len(pairs), n, n), dtype=complex), ii, jj)
    x = _block_expm(m, s)

    dp = {idx: x.l[idx] for idx in range(k)}
    d2p = {pair: x.q[pos] for pos, pair in enumerate(pairs)}
    return SlicePropagators(p=x.d, dp=dp, d2p=d2p, dt=float(dt))
