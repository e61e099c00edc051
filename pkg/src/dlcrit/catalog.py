"""Analytic critical points of the deep linear autoencoder.

Every subset ``I`` of covariance eigenvectors with ``|I| <= p`` (the
bottleneck width) gives a critical point whose end-to-end map is the
orthogonal projector onto ``span(U_I)``. Its loss is half the sum of the
eigenvalues left out. The Morse index is measured numerically at one
canonical factorization per subset.
"""

import csv
import io
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import InfeasibleSubsetError, InvalidInputError
from .linalg import sym_eig
from .model import NetworkParams, hessian

DEFAULT_TAU_REL = 1e-6
STABILITY_TAUS = (1e-8, 1e-5)

CATALOG_COLUMNS = ["subset", "r", "analytic_loss", "index", "nullity", "tau"]


@dataclass(frozen=True)
class Classification:
    index: int
    nullity: int
    eigenvalues: np.ndarray
    tau: float

    @property
    def positive(self):
        return len(self.eigenvalues) - self.index - self.nullity


@dataclass(frozen=True)
class CatalogEntry:
    subset: tuple  # 1-based eigenvalue ranks, ascending
    analytic_loss: float
    representative: NetworkParams
    index: int
    nullity: int
    tau: float
    index_stable: bool = True

    @property
    def r(self):
        return len(self.subset)

    @property
    def label(self):
        return format_subset(self.subset)


def format_subset(subset):
    return ";".join(str(i) for i in subset)


def parse_subset(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(";")) if text else ()


def enumerate_subsets(d, p):
    """All rank subsets of sizes 0..p, ordered by size then lexicographically."""
    if p < 0 or p > d:
        raise InvalidInputError(f"need 0 <= p <= d, got p={p}, d={d}")
    return [c for r in range(p + 1) for c in combinations(range(1, d + 1), r)]


def analytic_loss(spectrum, subset):
    keep = np.ones(len(spectrum), dtype=bool)
    keep[[i - 1 for i in subset]] = False
    return 0.5 * float(np.sum(np.asarray(spectrum)[keep]))


def build_representative(arch, data, subset):
    """Canonical factorization of the projector onto the chosen eigenvectors.

    ``W_1 = S_1 U_I^T``, ``W_j = S_j S_{j-1}^T`` in the middle and
    ``W_L = U_I S_{L-1}^T``, where ``S_k`` selects the first ``r`` units of
    hidden layer ``k``.
    """
    subset = tuple(sorted(subset))
    r = len(subset)
    if r > arch.bottleneck:
        raise InfeasibleSubsetError(
            f"subset of size {r} does not fit through a bottleneck of width {arch.bottleneck}")
    if subset and (subset[0] < 1 or subset[-1] > arch.d):
        raise InvalidInputError(f"ranks must lie in 1..{arch.d}, got {subset}")
    u_i = data.eigvecs[:, [i - 1 for i in subset]]
    hidden = arch.widths[1:-1]
    sel = [np.eye(n, r) for n in hidden]
    layers = [sel[0] @ u_i.T]
    for j in range(1, len(hidden)):
        layers.append(sel[j] @ sel[j - 1].T)
    layers.append(u_i @ sel[-1].T)
    return NetworkParams(tuple(layers))


def _counts(eigenvalues, tau_rel):
    scale = float(np.max(np.abs(eigenvalues))) if len(eigenvalues) else 0.0
    tau = tau_rel * scale if scale > tau_rel else tau_rel
    index = int(np.sum(eigenvalues < -tau))
    nullity = int(np.sum(np.abs(eigenvalues) <= tau))
    return index, nullity, tau


def classify_spectrum(eigenvalues, tau_rel=DEFAULT_TAU_REL):
    index, nullity, tau = _counts(np.asarray(eigenvalues), tau_rel)
    return Classification(index, nullity, np.asarray(eigenvalues), tau)


def classify_point(params, data, tau_rel=DEFAULT_TAU_REL):
    """Morse index and nullity from the full Hessian spectrum.

    ``tau = tau_rel * max|eigenvalue|``; eigenvalues below ``-tau`` count
    toward the index, those within ``tau`` of zero toward the nullity.
    """
    eig = sym_eig(hessian(params, data))
    return classify_spectrum(eig.eigenvalues, tau_rel)


def index_is_stable(eigenvalues, taus=STABILITY_TAUS):
    return len({_counts(eigenvalues, t)[0] for t in taus}) == 1


def build_entry(arch, data, subset, tau_rel=DEFAULT_TAU_REL):
    rep = build_representative(arch, data, subset)
    cls = classify_point(rep, data, tau_rel)
    return CatalogEntry(
        subset=tuple(subset),
        analytic_loss=analytic_loss(data.spectrum, subset),
        representative=rep,
        index=cls.index,
        nullity=cls.nullity,
        tau=cls.tau,
        index_stable=index_is_stable(cls.eigenvalues, STABILITY_TAUS + (tau_rel,)),
    )


@dataclass
class Catalog:
    entries: list

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def pairs(self):
        """Deduplicated ``(loss, index)`` set, loss rounded to 12 significant digits."""
        return sorted({(float(f"{e.analytic_loss:.12g}"), e.index) for e in self.entries})

    def unstable(self):
        return [e for e in self.entries if not e.index_stable]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CATALOG_COLUMNS)
        for e in self.entries:
            writer.writerow([e.label, e.r, format(e.analytic_loss, ".17g"), e.index, e.nullity,
                             format(e.tau, ".17g")])
        return buf.getvalue()


@dataclass(frozen=True)
class CatalogRow:
    """Catalog entry as read back from ``catalog.csv`` (no representative)."""

    subset: tuple
    analytic_loss: float
    index: int
    nullity: int
    tau: float

    @property
    def r(self):
        return len(self.subset)

    @property
    def label(self):
        return format_subset(self.subset)


def read_catalog_csv(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(CatalogRow(
            subset=parse_subset(rec["subset"]),
            analytic_loss=float(rec["analytic_loss"]),
            index=int(rec["index"]),
            nullity=int(rec["nullity"]),
            tau=float(rec["tau"]),
        ))
    return rows


def build_catalog(arch, data, tau_rel=DEFAULT_TAU_REL):
    subsets = enumerate_subsets(arch.d, arch.bottleneck)
    return Catalog([build_entry(arch, data, s, tau_rel) for s in subsets])
