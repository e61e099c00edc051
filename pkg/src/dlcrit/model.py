"""Deep linear autoencoder: data, loss, gradient, exact Hessian-vector products.

The network maps ``x -> W_L ... W_1 x`` and the loss is
``0.5 * tr((W - I) Sigma (W - I)^T)`` with ``W`` the end-to-end product and
``Sigma = X X^T / N`` the (uncentered) second-moment matrix of the data.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError, InvalidSpectrumError, SizeError
from .linalg import RNG_IDENTITY, as_matrix, matrix_from_dict, matrix_to_json, seeded_rng, sym_eig

HESSIAN_CAP = 2048


@dataclass(frozen=True)
class Architecture:
    widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3:
            raise InvalidInputError("need at least two weight matrices (three widths)")
        if min(widths) < 1:
            raise InvalidInputError(f"widths must be positive, got {widths}")
        if widths[0] != widths[-1]:
            raise InvalidInputError(f"first and last width must agree, got {widths}")

    @property
    def d(self):
        return self.widths[0]

    @property
    def depth(self):
        return len(self.widths) - 1

    @property
    def bottleneck(self):
        return min(self.widths)

    @property
    def shapes(self):
        return [(self.widths[i + 1], self.widths[i]) for i in range(self.depth)]

    @property
    def n_params(self):
        return sum(r * c for r, c in self.shapes)


@dataclass(frozen=True)
class NetworkParams:
    """Layer matrices ``(W_1, ..., W_L)``; ``W_i`` has shape ``n_i x n_{i-1}``."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(np.array(w, dtype=float) for w in self.layers)
        for w in layers:
            if w.ndim != 2:
                raise DimensionError("every layer must be a 2-D matrix")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise DimensionError(f"layer shapes {prev.shape} -> {nxt.shape} do not chain")
        object.__setattr__(self, "layers", layers)

    @property
    def widths(self):
        return (self.layers[0].shape[1],) + tuple(w.shape[0] for w in self.layers)

    @property
    def architecture(self):
        return Architecture(self.widths)

    def flatten(self):
        return np.concatenate([w.ravel() for w in self.layers])

    @classmethod
    def unflatten(cls, arch, vec):
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != arch.n_params:
            raise DimensionError(f"expected {arch.n_params} parameters, got {vec.size}")
        layers, pos = [], 0
        for r, c in arch.shapes:
            layers.append(vec[pos:pos + r * c].reshape(r, c))
            pos += r * c
        return cls(tuple(layers))

    @classmethod
    def zeros(cls, arch):
        return cls(tuple(np.zeros(s) for s in arch.shapes))

    @classmethod
    def identity(cls, d, depth):
        return cls(tuple(np.eye(d) for _ in range(depth)))

    def to_json(self):
        mats = ", ".join(matrix_to_json(w) for w in self.layers)
        return f'{{"widths": {list(self.widths)}, "layers": [{mats}]}}'

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        params = cls(tuple(matrix_from_dict(m) for m in doc["layers"]))
        if list(params.widths) != list(doc["widths"]):
            raise DimensionError("layer shapes disagree with the declared widths")
        return params


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    sigma: np.ndarray
    spectrum: np.ndarray  # descending
    eigvecs: np.ndarray  # columns paired with ``spectrum``
    seed: int = 0
    spectrum_rule: str = "explicit"

    @property
    def d(self):
        return self.x.shape[0]

    @property
    def n_samples(self):
        return self.x.shape[1]

    def manifest(self):
        return {
            "d": self.d,
            "n_samples": self.n_samples,
            "spectrum": [float(v) for v in self.spectrum],
            "spectrum_rule": self.spectrum_rule,
            "seed": int(self.seed),
            "generator": RNG_IDENTITY,
        }

    def to_json(self):
        head = json.dumps(self.manifest())[:-1]
        return f'{head}, "x": {matrix_to_json(self.x)}, "eigvecs": {matrix_to_json(self.eigvecs)}}}'

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        x = matrix_from_dict(doc["x"])
        return cls(
            x=x,
            sigma=x @ x.T / x.shape[1],
            spectrum=np.array(doc["spectrum"], dtype=float),
            eigvecs=matrix_from_dict(doc["eigvecs"]),
            seed=int(doc["seed"]),
            spectrum_rule=doc["spectrum_rule"],
        )


def spectrum_for(d, rule):
    """Descending eigenvalues for a named rule or an explicit list."""
    if isinstance(rule, str):
        if rule == "powers-of-two":
            return 2.0 ** np.arange(d - 1, -1, -1)
        if rule == "linear":
            return np.arange(d, 0, -1, dtype=float)
        raise InvalidSpectrumError(f"unknown spectrum rule {rule!r}")
    lam = np.asarray(rule, dtype=float).ravel()
    if lam.size != d:
        raise InvalidSpectrumError(f"need {d} eigenvalues, got {lam.size}")
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise InvalidSpectrumError("eigenvalues must be finite and positive")
    lam = np.sort(lam)[::-1]
    if np.any(np.diff(lam) == 0):
        raise InvalidSpectrumError("eigenvalues must be distinct")
    return lam


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def generate_dataset(d, n_samples, spectrum_rule="powers-of-two", seed=0):
    """Samples whose second-moment matrix has exactly the requested spectrum.

    ``X = U diag(sqrt(lam)) Z`` with ``U`` a random orthogonal matrix and ``Z``
    having orthonormal rows scaled by ``sqrt(N)``, so ``X X^T / N = U lam U^T``.
    """
    if d < 2:
        raise InvalidInputError("data dimension must be at least 2")
    if n_samples < d:
        raise InvalidInputError("need at least d samples")
    lam = spectrum_for(d, spectrum_rule)
    rng = seeded_rng(seed)
    u = random_orthogonal(rng, d)
    z, _ = np.linalg.qr(rng.standard_normal((n_samples, d)))
    z = z.T * np.sqrt(n_samples)
    x = (u * np.sqrt(lam)) @ z
    rule = spectrum_rule if isinstance(spectrum_rule, str) else "explicit"
    return Dataset(x=x, sigma=x @ x.T / n_samples, spectrum=lam, eigvecs=u, seed=seed,
                   spectrum_rule=rule)


def dataset_from_covariance(sigma, seed=0):
    """Dataset built around a given SPD second-moment matrix (test and hook use)."""
    sigma = as_matrix(sigma)
    eig = sym_eig(sigma)
    lam, u = eig.eigenvalues[::-1], eig.eigenvectors[:, ::-1]
    x = u * np.sqrt(np.maximum(lam, 0.0)) * np.sqrt(sigma.shape[0])
    return Dataset(x=x, sigma=x @ x.T / x.shape[1], spectrum=lam, eigvecs=u, seed=seed)


# ---------------------------------------------------------------------------
# Loss and derivatives
# ---------------------------------------------------------------------------

def _check(params, data):
    if params.widths[0] != data.d or params.widths[-1] != data.d:
        raise DimensionError(f"network widths {params.widths} do not match data dimension {data.d}")


def _prefix_products(layers):
    """B_i = W_{i-1} ... W_1 for i = 1..L (B_1 = I), plus the full product W."""
    d = layers[0].shape[1]
    prefix = [np.eye(d)]
    for w in layers:
        prefix.append(w @ prefix[-1])
    return prefix  # prefix[i] = W_i ... W_1; prefix[0] = I


def _suffix_products(layers):
    """A_i = W_L ... W_{i+1}; suffix[i] for i = 0..L, suffix[L] = I."""
    d = layers[-1].shape[0]
    L = len(layers)
    suffix = [None] * (L + 1)
    suffix[L] = np.eye(d)
    for i in range(L - 1, -1, -1):
        suffix[i] = suffix[i + 1] @ layers[i]
    return suffix  # suffix[i] = W_L ... W_{i+1}; suffix[0] = W


def end_to_end(params):
    return _prefix_products(params.layers)[-1]


def _loss(layers, sigma):
    e = _prefix_products(layers)[-1]
    e[np.diag_indices_from(e)] -= 1.0
    return 0.5 * float(np.sum((e @ sigma) * e))


def _grad(layers, sigma):
    prefix = _prefix_products(layers)
    suffix = _suffix_products(layers)
    e = prefix[-1].copy()
    e[np.diag_indices_from(e)] -= 1.0
    err = e @ sigma
    return [suffix[i + 1].T @ err @ prefix[i].T for i in range(len(layers))]


def _hvp(layers, vs, sigma):
    L = len(layers)
    d = sigma.shape[0]
    prefix = _prefix_products(layers)
    suffix = _suffix_products(layers)

    # forward-mode derivatives of the partial products along ``vs``
    dprefix = [np.zeros((d, d))]
    for i in range(L):
        dprefix.append(vs[i] @ prefix[i] + layers[i] @ dprefix[i])
    dsuffix = [None] * (L + 1)
    dsuffix[L] = np.zeros((d, d))
    for i in range(L - 1, -1, -1):
        dsuffix[i] = dsuffix[i + 1] @ layers[i] + suffix[i + 1] @ vs[i]

    e = prefix[-1].copy()
    e[np.diag_indices_from(e)] -= 1.0
    err = e @ sigma
    derr = dprefix[-1] @ sigma
    out = []
    for i in range(L):
        a, b = suffix[i + 1], prefix[i]
        da, db = dsuffix[i + 1], dprefix[i]
        out.append(da.T @ err @ b.T + a.T @ derr @ b.T + a.T @ err @ db.T)
    return out


def loss(params, data):
    _check(params, data)
    return _loss(params.layers, data.sigma)


def gradient(params, data):
    """Blocks ``A_i^T (W - I) Sigma B_i^T`` with ``A_i = W_L..W_{i+1}``, ``B_i = W_{i-1}..W_1``."""
    _check(params, data)
    return NetworkParams(tuple(_grad(params.layers, data.sigma)))


def hvp(params, direction, data):
    """Exact Hessian-vector product: the product rule applied to every gradient block."""
    _check(params, data)
    vs = direction.layers
    if len(vs) != len(params.layers) or any(v.shape != w.shape for v, w in zip(vs, params.layers)):
        raise DimensionError("direction shapes do not match the parameters")
    return NetworkParams(tuple(_hvp(params.layers, vs, data.sigma)))


def sq_grad_norm(params, data):
    """g = 0.5 * ||grad L||^2."""
    _check(params, data)
    return 0.5 * sum(float(np.sum(b * b)) for b in _grad(params.layers, data.sigma))


def _eig(a):
    out = sym_eig(0.5 * (a + a.T))
    return out.eigenvalues, out.eigenvectors


def _spd_power(vals, vecs, power):
    return (vecs * vals ** power) @ vecs.T


def _full_rank(vals, rank_tol):
    return vals[-1] > 0.0 and vals[0] > rank_tol * vals[-1]


def _balancer(a, b, rank_tol):
    """Symmetric ``C`` with ``C P C = C^-1 Q C^-1``, or None when a Gram is near singular."""
    q = b.T @ b
    pv, pu = _eig(a @ a.T)
    if not (_full_rank(pv, rank_tol) and _full_rank(_eig(q)[0], rank_tol)):
        return None
    p_half, p_inv_half = _spd_power(pv, pu, 0.5), _spd_power(pv, pu, -0.5)
    mv, mu = _eig(p_half @ q @ p_half)
    if not _full_rank(mv, rank_tol):
        return None
    cv, cu = _eig(p_inv_half @ _spd_power(mv, mu, 0.5) @ p_inv_half)
    if not _full_rank(cv, rank_tol):
        return None
    return _spd_power(cv, cu, 0.5), _spd_power(cv, cu, -0.5)


def balance(params, max_sweeps=50, tol=1e-12, rank_tol=1e-10):
    """Move along ``W_k -> C W_k, W_{k+1} -> W_{k+1} C^-1`` until adjacent Grams agree.

    For each hidden layer the symmetric ``C`` solves ``C P C = C^-1 Q C^-1``
    with ``P = W_k W_k^T`` and ``Q = W_{k+1}^T W_{k+1}``. The end-to-end map,
    the loss and the Hessian inertia are unchanged. Layers whose Gram matrices
    are near singular (relative to ``rank_tol``) are left alone.
    """
    layers = [w.copy() for w in params.layers]
    if not all(np.all(np.isfinite(w)) for w in layers):
        return NetworkParams(tuple(layers))
    for _ in range(max_sweeps):
        moved = 0.0
        for k in range(len(layers) - 1):
            found = _balancer(layers[k], layers[k + 1], rank_tol)
            if found is None:
                continue
            c, c_inv = found
            layers[k], layers[k + 1] = c @ layers[k], layers[k + 1] @ c_inv
            moved = max(moved, float(np.max(np.abs(c - np.eye(c.shape[0])))))
        if moved <= tol:
            break
    return NetworkParams(tuple(layers))


def assemble_hessian(params, data, cap=HESSIAN_CAP):
    """Hessian columns from HVPs against the standard basis, unsymmetrized."""
    _check(params, data)
    arch = params.architecture
    n = arch.n_params
    if n > cap:
        raise SizeError(f"{n} parameters exceeds the Hessian cap of {cap}; "
                        "reduce the architecture widths or depth")
    obj = Objective(arch, data)
    theta = params.flatten()
    h = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        h[:, j] = obj.hvp(theta, e)
        e[j] = 0.0
    return h


def hessian(params, data, cap=HESSIAN_CAP):
    h = assemble_hessian(params, data, cap)
    return 0.5 * (h + h.T)


# ---------------------------------------------------------------------------
# Flat-vector view used by the finders and the trainer
# ---------------------------------------------------------------------------

@dataclass
class Objective:
    """Loss, gradient and HVP of the autoencoder on flat parameter vectors."""

    arch: Architecture
    data: Dataset

    def __post_init__(self):
        if self.arch.d != self.data.d:
            raise DimensionError("architecture and data dimensions differ")

    @property
    def n_params(self):
        return self.arch.n_params

    def unflatten(self, theta):
        return NetworkParams.unflatten(self.arch, theta)

    def _split(self, vec):
        out, pos = [], 0
        for r, c in self.arch.shapes:
            out.append(vec[pos:pos + r * c].reshape(r, c))
            pos += r * c
        return out

    def loss(self, theta):
        return _loss(self._split(theta), self.data.sigma)

    def grad(self, theta):
        return np.concatenate([b.ravel() for b in _grad(self._split(theta), self.data.sigma)])

    def hvp(self, theta, v):
        blocks = _hvp(self._split(theta), self._split(v), self.data.sigma)
        return np.concatenate([b.ravel() for b in blocks])
