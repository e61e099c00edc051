"""Dense symmetric linear algebra and the Krylov / trust-region inner solvers.

Everything here works on plain ``numpy`` float64 arrays. Linear operators are
any callable mapping a 1-D array to a 1-D array of the same length.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError

RNG_IDENTITY = "numpy.random.Generator(PCG64)"

_EPS = np.finfo(float).eps


# ---------------------------------------------------------------------------
# Matrix helpers
# ---------------------------------------------------------------------------

def as_matrix(a):
    """Validate ``a`` as a finite 2-D float64 array and return it."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    return a


def _fmt(v):
    return format(float(v), ".17g")


def matrix_to_dict(a):
    a = as_matrix(a)
    return {"rows": a.shape[0], "cols": a.shape[1], "data": [float(v) for v in a.ravel()]}


def matrix_to_json(a):
    """Serialize with 17 significant digits, flat row-major ``data``."""
    a = as_matrix(a)
    data = ", ".join(_fmt(v) for v in a.ravel())
    return f'{{"rows": {a.shape[0]}, "cols": {a.shape[1]}, "data": [{data}]}}'


def matrix_from_dict(doc):
    rows, cols, data = int(doc["rows"]), int(doc["cols"]), doc["data"]
    if rows < 1 or cols < 1 or len(data) != rows * cols:
        raise DimensionError(f"matrix document has {len(data)} entries for {rows}x{cols}")
    return as_matrix(np.array(data, dtype=float).reshape(rows, cols))


def matrix_from_json(text):
    return matrix_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition: parallel-ordered cyclic Jacobi
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0


def _round_robin(m):
    """Yield m-1 rounds of m/2 disjoint index pairs covering every pair once."""
    players = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        yield np.minimum(p, q), np.maximum(p, q)
        players = [players[0], players[-1]] + players[1:-1]


def sym_eig(a, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each round applies ``n/2`` disjoint rotations at once (round-robin
    ordering), so a sweep costs ``n - 1`` dense matrix products. Eigenvalues
    are returned ascending with orthonormal eigenvector columns.
    """
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    if n == 1:
        return SymEigResult(a[0].copy(), np.ones((1, 1)), 0)

    m = n + (n % 2)
    work = np.zeros((m, m))
    work[:n, :n] = a
    vecs = np.eye(m)
    scale = np.linalg.norm(work)
    rounds = list(_round_robin(m))
    sweeps = 0
    while sweeps < max_sweeps and scale > 0:
        off = np.linalg.norm(work - np.diag(np.diag(work)))
        if off <= 1e-15 * scale:
            break
        sweeps += 1
        for p, q in rounds:
            apq = work[p, q]
            app = work[p, p]
            aqq = work[q, q]
            # rotations below roundoff relative to the pivot diagonal are skipped
            active = np.abs(apq) > 1e-300 + _EPS * 1e-3 * np.sqrt(np.abs(app * aqq))
            if not np.any(active):
                continue
            theta = np.where(active, (aqq - app) / np.where(active, 2.0 * apq, 1.0), 0.0)
            big = np.abs(theta) > 1e150
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)),
            )
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(m)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            work = rot.T @ work @ rot
            work[p, q] = 0.0
            work[q, p] = 0.0
            vecs = vecs @ rot

    vals = np.diag(work)[:n].copy()
    # the padding index has a zero row/column, so no rotation ever touches it
    vecs = vecs[:n, :n]
    order = np.argsort(vals, kind="stable")
    return SymEigResult(vals[order], vecs[:, order], sweeps)


# ---------------------------------------------------------------------------
# MINRES
# ---------------------------------------------------------------------------

@dataclass
class MinresOutcome:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    flag: str  # "converged" | "max_iters" | "breakdown"
    residual_history: list = field(default_factory=list)


def minres(apply_a, b, rel_tol=1e-6, max_iters=None, track_residuals=False):
    """Minimum-residual solve of ``A x = b`` for symmetric, possibly singular A.

    Starts from ``x = 0``. Stops when ``||r|| <= rel_tol ||b||`` or, for
    inconsistent systems, ``||A r|| <= rel_tol ||A b||``.

    ``residual_history`` holds the recurrence estimate of ``||r_k||`` for
    ``k = 0..iterations`` (exact arithmetic values are non-increasing); with
    ``track_residuals`` it holds directly recomputed ``||b - A x_k||`` instead.
    """
    b = np.asarray(b, dtype=float).ravel()
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("right-hand side has non-finite entries")
    if not 0.0 < rel_tol < 1.0:
        raise InvalidInputError(f"rel_tol must be in (0, 1), got {rel_tol}")
    n = b.size
    if max_iters is None:
        max_iters = n

    def _apply(v):
        out = np.asarray(apply_a(v), dtype=float).ravel()
        if out.shape != (n,):
            raise DimensionError(f"operator returned shape {out.shape}, expected ({n},)")
        return out

    x = np.zeros(n)
    beta1 = float(np.linalg.norm(b))
    if beta1 == 0.0:
        return MinresOutcome(x, 0.0, 0, "converged", [0.0])

    def _true_res(xk):
        return float(np.linalg.norm(b - _apply(xk)))

    history = [beta1]
    r1 = b.copy()
    r2 = b.copy()
    y = b.copy()
    oldb = 0.0
    beta = beta1
    dbar = 0.0
    epsln = 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    ab_norm = None
    flag = "max_iters"
    itn = 0

    while itn < max_iters:
        itn += 1
        v = y / beta
        y = _apply(v)
        if itn == 1:
            ab_norm = beta1 * float(np.linalg.norm(y))
            # symmetry probe: <Av, Av> against <v, A(Av)>
            s_ = float(y @ y)
            t_ = float(v @ _apply(y))
            if abs(s_ - t_) > (s_ + _EPS) * _EPS ** (1.0 / 3.0):
                return MinresOutcome(x, _true_res(x), 0, "breakdown", history)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        r1 = r2
        r2 = y
        oldb = beta
        beta = float(np.linalg.norm(y))
        if not (np.isfinite(alfa) and np.isfinite(beta)):
            return MinresOutcome(x, _true_res(x), itn - 1, "breakdown", history)

        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        # ||A r|| for the current iterate becomes available one step late
        ar_cur = phibar * float(np.hypot(gbar, dbar))
        if ar_cur <= rel_tol * ab_norm:
            itn -= 1
            flag = "converged"
            break

        gamma = float(np.hypot(gbar, beta))
        if gamma == 0.0:
            itn -= 1
            flag = "breakdown"
            break
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w
        history.append(_true_res(x) if track_residuals else abs(phibar))

        if abs(phibar) <= rel_tol * beta1:
            flag = "converged"
            break
        if beta == 0.0:
            # invariant subspace reached: x solves the least-squares problem there
            flag = "converged"
            break

    rnorm = _true_res(x)
    if flag == "max_iters":
        if rnorm <= rel_tol * beta1:
            flag = "converged"
        elif float(np.linalg.norm(_apply(b - _apply(x)))) <= rel_tol * ab_norm:
            flag = "converged"
    del history[itn + 1:]
    return MinresOutcome(x, rnorm, itn, flag, history)


# ---------------------------------------------------------------------------
# Steihaug-Toint truncated CG for the trust-region subproblem
# ---------------------------------------------------------------------------

@dataclass
class CGOutcome:
    step: np.ndarray
    iterations: int
    on_boundary: bool


def _to_boundary(s, d, radius):
    """Positive tau with ||s + tau d|| = radius."""
    dd = float(d @ d)
    sd = float(s @ d)
    ss = float(s @ s)
    disc = np.sqrt(max(sd * sd + dd * (radius * radius - ss), 0.0))
    if sd > 0:
        tau = (radius * radius - ss) / (sd + disc)
    else:
        tau = (disc - sd) / dd
    return s + tau * d


def _clip(step, radius):
    nrm = float(np.linalg.norm(step))
    if nrm > radius:
        step = step * (radius / nrm)
    return step


def steihaug_cg(apply_b, grad, radius, rel_tol=1e-6, max_iters=None):
    """Approximately minimize ``<grad, s> + 0.5 <s, B s>`` subject to ``||s|| <= radius``."""
    g = np.asarray(grad, dtype=float).ravel()
    if radius <= 0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    n = g.size
    if max_iters is None:
        max_iters = n
    s = np.zeros(n)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return CGOutcome(s, 0, False)
    r = g.copy()
    d = -r
    rr = float(r @ r)
    for k in range(1, max_iters + 1):
        bd = np.asarray(apply_b(d), dtype=float).ravel()
        dbd = float(d @ bd)
        if dbd <= 0.0:
            return CGOutcome(_clip(_to_boundary(s, d, radius), radius), k, True)
        alpha = rr / dbd
        s_next = s + alpha * d
        if np.linalg.norm(s_next) >= radius:
            return CGOutcome(_clip(_to_boundary(s, d, radius), radius), k, True)
        s = s_next
        r = r + alpha * bd
        rr_next = float(r @ r)
        if np.sqrt(rr_next) <= rel_tol * gnorm:
            return CGOutcome(s, k, False)
        d = -r + (rr_next / rr) * d
        rr = rr_next
    return CGOutcome(s, max_iters, False)


def quadratic_model(apply_b, grad, step):
    """m(s) - m(0) = <grad, s> + 0.5 <s, B s>."""
    return float(grad @ step + 0.5 * step @ apply_b(step))


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

def seeded_rng(seed):
    """Deterministic generator; the identity string is ``RNG_IDENTITY``."""
    return np.random.Generator(np.random.PCG64(int(seed)))
