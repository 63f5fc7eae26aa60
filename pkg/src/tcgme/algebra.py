"""Finite operator algebra over declared modes.

Supports bosonic ladder operators, spin-1/2 operators, and multilevel
(anharmonic-ladder) operators whose coefficients may depend on the level
index through lookup tables.  Monomials canonicalize to normal order
(raising before lowering per mode, modes in declaration order, at most one
spin factor per spin mode) so that coefficient accumulation has unique term
keys.  Dense matrix realizations use hard truncation: the top row of the
raising operator is zero.

Conventions
-----------
- Spin basis is (|0>, |1>) with sigma_z = diag(-1, +1), sigma_minus = |0><1|.
- A level table ``f`` on a multilevel mode represents the diagonal operator
  f(n_hat) standing to the RIGHT of the ladder factors of that mode; it
  commutes through ladder strings by the shift rule f(n_hat) M = M f(n_hat + d)
  where d is the net excitation change of M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

BOSON = "boson"
SPIN_HALF = "spin_half"
MULTILEVEL = "multilevel"

LOWER = "lower"
RAISE = "raise"
NUMBER = "number"
SIGMA_MINUS = "sigma_minus"
SIGMA_PLUS = "sigma_plus"
SIGMA_Z = "sigma_z"
IDENTITY = "identity"

_LADDER_OPS = (LOWER, RAISE, NUMBER)
_SPIN_OPS = (SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z)

#: products of the spin basis {1, s-, s+, sz}; entries map to {op_or_None: coeff}
_SPIN_TABLE = {
    (SIGMA_MINUS, SIGMA_MINUS): {},
    (SIGMA_PLUS, SIGMA_PLUS): {},
    (SIGMA_MINUS, SIGMA_PLUS): {None: 0.5, SIGMA_Z: -0.5},
    (SIGMA_PLUS, SIGMA_MINUS): {None: 0.5, SIGMA_Z: 0.5},
    (SIGMA_MINUS, SIGMA_Z): {SIGMA_MINUS: 1.0},
    (SIGMA_Z, SIGMA_MINUS): {SIGMA_MINUS: -1.0},
    (SIGMA_PLUS, SIGMA_Z): {SIGMA_PLUS: -1.0},
    (SIGMA_Z, SIGMA_PLUS): {SIGMA_PLUS: 1.0},
    (SIGMA_Z, SIGMA_Z): {None: 1.0},
}

_DAGGER = {
    LOWER: RAISE,
    RAISE: LOWER,
    NUMBER: NUMBER,
    SIGMA_MINUS: SIGMA_PLUS,
    SIGMA_PLUS: SIGMA_MINUS,
    SIGMA_Z: SIGMA_Z,
    IDENTITY: IDENTITY,
}


class DeclarationError(KeyError):
    """An operator references a mode that is not declared in the system."""


class DimensionError(ValueError):
    """Requested dense realization exceeds the configured size limit."""


@dataclass(frozen=True)
class ModeSpec:
    """A single mode: its label, kind, and numerical truncation."""

    label: str
    kind: str
    truncation_dim: int = 2

    def __post_init__(self):
        if self.kind not in (BOSON, SPIN_HALF, MULTILEVEL):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.kind == SPIN_HALF:
            object.__setattr__(self, "truncation_dim", 2)
        if self.truncation_dim < 2:
            raise ValueError("truncation_dim must be >= 2")


class System:
    """Ordered registry of declared modes."""

    def __init__(self, modes: Sequence[ModeSpec]):
        labels = [m.label for m in modes]
        if len(set(labels)) != len(labels):
            raise ValueError("mode labels must be unique")
        self.modes = tuple(modes)
        self._index = {m.label: i for i, m in enumerate(modes)}

    def mode(self, label: str) -> ModeSpec:
        try:
            return self.modes[self._index[label]]
        except KeyError:
            raise DeclarationError(f"mode {label!r} is not declared") from None

    def index(self, label: str) -> int:
        if label not in self._index:
            raise DeclarationError(f"mode {label!r} is not declared")
        return self._index[label]

    def dims(self) -> tuple[int, ...]:
        return tuple(m.truncation_dim for m in self.modes)

    @property
    def total_dim(self) -> int:
        d = 1
        for m in self.modes:
            d *= m.truncation_dim
        return d

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __repr__(self):
        return f"System({list(self.modes)!r})"


def _as_table(value, dim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=complex)
    if arr.ndim != 1:
        raise ValueError("level table must be one-dimensional")
    if arr.size < dim:
        arr = np.concatenate([arr, np.zeros(dim - arr.size, dtype=complex)])
    return arr[:dim]


def shift_table(table: np.ndarray, shift: int) -> np.ndarray:
    """Return t' with t'[n] = table[n + shift], zero outside the range."""
    out = np.zeros_like(table)
    n = table.size
    if shift >= 0:
        out[: n - shift] = table[shift:]
    else:
        out[-shift:] = table[: n + shift]
    return out


class OperatorMonomial:
    """Ordered product of elementary mode operators with a complex coefficient.

    ``factors`` is a sequence of (mode_label, op) pairs in application order
    (leftmost factor acts last on a ket).  ``tables`` optionally attaches a
    level table f(n_hat) per multilevel mode, standing to the right of that
    mode's ladder factors.  Instances are immutable.
    """

    __slots__ = ("coefficient", "factors", "tables", "_hash")

    def __init__(self, coefficient: complex, factors: Iterable[tuple[str, str]] = (),
                 tables: Mapping[str, np.ndarray] | None = None):
        object.__setattr__(self, "coefficient", complex(coefficient))
        object.__setattr__(self, "factors", tuple((str(m), str(o)) for m, o in factors))
        tb = {}
        if tables:
            for k, v in tables.items():
                tb[k] = np.asarray(v, dtype=complex)
        object.__setattr__(self, "tables", tb)
        object.__setattr__(self, "_hash", None)

    def __setattr__(self, *a):
        raise AttributeError("OperatorMonomial is immutable")

    # -- structural key (coefficient excluded) ------------------------------
    def key(self) -> tuple:
        tb = tuple(sorted((m, t.tobytes()) for m, t in self.tables.items()))
        return (self.factors, tb)

    def __eq__(self, other):
        if not isinstance(other, OperatorMonomial):
            return NotImplemented
        return (self.key() == other.key()
                and self.coefficient == other.coefficient)

    def __hash__(self):
        h = object.__getattribute__(self, "_hash")
        if h is None:
            h = hash((self.key(), self.coefficient))
            object.__setattr__(self, "_hash", h)
        return h

    @property
    def is_identity(self) -> bool:
        return not self.factors and not self.tables

    def with_coefficient(self, c: complex) -> "OperatorMonomial":
        return OperatorMonomial(c, self.factors, self.tables)

    def __mul__(self, scalar):
        if isinstance(scalar, (int, float, complex)):
            return self.with_coefficient(self.coefficient * scalar)
        return NotImplemented

    __rmul__ = __mul__

    def __repr__(self):
        return f"OperatorMonomial({self.coefficient!r}, {self.pretty()!r})"

    def pretty(self) -> str:
        sym = {LOWER: "", RAISE: "†", NUMBER: "̂n", SIGMA_MINUS: "σ-",
               SIGMA_PLUS: "σ+", SIGMA_Z: "σz", IDENTITY: "1"}
        parts = []
        i = 0
        facs = self.factors
        while i < len(facs):
            mode, op = facs[i]
            j = i
            while j < len(facs) and facs[j] == (mode, op):
                j += 1
            count = j - i
            if op in (SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z):
                base = {"sigma_minus": "σ-", "sigma_plus": "σ+",
                        "sigma_z": "σz"}[op] + f"[{mode}]"
            elif op == NUMBER:
                base = f"n[{mode}]"
            else:
                base = mode + ("†" if op == RAISE else "")
            parts.append(base + (f"^{count}" if count > 1 else ""))
            i = j
        for mode in sorted(self.tables):
            parts.append(f"tbl[{mode}]")
        return "·".join(parts) if parts else "1"


class OperatorSum:
    """Linear combination of canonical monomials, keyed by factor structure."""

    __slots__ = ("terms",)

    def __init__(self, terms: Iterable[OperatorMonomial] = ()):
        self.terms = list(terms)

    @staticmethod
    def zero() -> "OperatorSum":
        return OperatorSum()

    def __add__(self, other: "OperatorSum") -> "OperatorSum":
        merged: dict = {}
        order: list = []
        for t in list(self.terms) + list(other.terms):
            k = t.factors
            if k in merged:
                merged[k] = _merge_coeff(merged[k], t)
            else:
                merged[k] = t
                order.append(k)
        return OperatorSum([merged[k] for k in order])

    def __sub__(self, other: "OperatorSum") -> "OperatorSum":
        return self + (other * (-1))

    def __mul__(self, scalar):
        if isinstance(scalar, (int, float, complex)):
            return OperatorSum([t * scalar for t in self.terms])
        return NotImplemented

    __rmul__ = __mul__

    def compress(self, eps_rel: float = 1e-14) -> "OperatorSum":
        """Merge identical factor keys and drop negligible terms."""
        merged: dict = {}
        order: list = []
        for t in self.terms:
            k = t.factors
            if k in merged:
                merged[k] = _merge_coeff(merged[k], t)
            else:
                merged[k] = t
                order.append(k)
        mags = [_coeff_mag(merged[k]) for k in order]
        cut = eps_rel * max(mags, default=0.0)
        return OperatorSum([merged[k] for k, m in zip(order, mags) if m > cut])

    def pretty(self) -> str:
        if not self.terms:
            return "0"
        return " + ".join(f"({t.coefficient:.6g})·{t.pretty()}" for t in self.terms)

    def __repr__(self):
        return f"OperatorSum<{self.pretty()}>"


def _coeff_mag(t: OperatorMonomial) -> float:
    m = abs(t.coefficient)
    for tab in t.tables.values():
        m *= float(np.max(np.abs(tab))) if tab.size else 0.0
    return m


def _merge_coeff(a: OperatorMonomial, b: OperatorMonomial) -> OperatorMonomial:
    """Add two terms with identical factor lists (tables may differ)."""
    if not a.tables and not b.tables:
        return a.with_coefficient(a.coefficient + b.coefficient)
    modes = set(a.tables) | set(b.tables)
    tables = {}
    for m in modes:
        ta = a.tables.get(m)
        tb = b.tables.get(m)
        size = max(ta.size if ta is not None else 0, tb.size if tb is not None else 0)
        va = a.coefficient * (_as_table(ta, size) if ta is not None else np.ones(size))
        vb = b.coefficient * (_as_table(tb, size) if tb is not None else np.ones(size))
        if len(modes) > 1:
            raise NotImplementedError("merging tables on several modes at once")
        tables[m] = va + vb
    return OperatorMonomial(1.0, a.factors, tables)


# ---------------------------------------------------------------------------
# canonicalization
# ---------------------------------------------------------------------------

def _boson_product(p1: int, q1: int, p2: int, q2: int) -> list[tuple[float, int, int]]:
    """Normal-order a^+^p1 a^q1 a^+^p2 a^q2 -> [(weight, p, q)] using
    a^q a^+^p = sum_k k! C(p,k) C(q,k) a^+^{p-k} a^{q-k}."""
    out = []
    for k in range(min(p2, q1) + 1):
        w = math.factorial(k) * math.comb(p2, k) * math.comb(q1, k)
        out.append((float(w), p1 + p2 - k, q1 + q2 - k))
    return out


def _spin_product(s1: str | None, s2: str | None) -> dict:
    if s1 is None:
        return {s2: 1.0}
    if s2 is None:
        return {s1: 1.0}
    return dict(_SPIN_TABLE[(s1, s2)])


class _ModeState:
    """Accumulator for one mode while normal-ordering a factor string."""

    __slots__ = ("p", "q", "spin", "table", "weight")

    def __init__(self):
        self.p = 0
        self.q = 0
        self.spin = None
        self.table = None
        self.weight = 1.0


def normal_order(m: OperatorMonomial, system: System) -> OperatorSum:
    """Rewrite a monomial as a combination of canonical monomials.

    Canonical form: modes in declaration order; per boson/multilevel mode all
    raising factors precede lowering ones; per spin mode at most a single
    sigma factor; level tables stand right of their mode's ladder factors.
    """
    for label, op in m.factors:
        mode = system.mode(label)
        if mode.kind == SPIN_HALF and op not in _SPIN_OPS + (IDENTITY,):
            raise DeclarationError(f"op {op!r} invalid on spin mode {label!r}")
        if mode.kind in (BOSON, MULTILEVEL) and op not in _LADDER_OPS + (IDENTITY,):
            raise DeclarationError(f"op {op!r} invalid on mode {label!r}")

    # state: list of per-mode alternatives [(weight, p, q, spin, table)]
    branches = [(m.coefficient, {})]  # (coeff, {label: (p, q, spin, table)})
    for label, op in m.factors:
        mode = system.mode(label)
        if op == IDENTITY:
            continue
        singles = (RAISE, LOWER) if op == NUMBER else (op,)
        for single in singles:
            branches = _apply_factor(branches, label, mode, single)
    # attach explicit tables of the input (rightmost, after all factors)
    for label, table in m.tables.items():
        mode = system.mode(label)
        if mode.kind != MULTILEVEL:
            raise DeclarationError(f"level table on non-multilevel mode {label!r}")
        branches = _apply_table(branches, label, mode, np.asarray(table, complex))

    out_terms = []
    for coeff, state in branches:
        if coeff == 0:
            continue
        factors = []
        tables = {}
        for mode in system.modes:
            st = state.get(mode.label)
            if st is None:
                continue
            p, q, spin, table = st
            factors.extend([(mode.label, RAISE)] * p)
            factors.extend([(mode.label, LOWER)] * q)
            if spin is not None:
                factors.append((mode.label, spin))
            if table is not None:
                tables[mode.label] = table
        out_terms.append(OperatorMonomial(coeff, factors, tables))
    return OperatorSum(out_terms).compress()


def _apply_factor(branches, label, mode, op):
    new = []
    for coeff, state in branches:
        st = state.get(label, (0, 0, None, None))
        p, q, spin, table = st
        if mode.kind == SPIN_HALF:
            prods = _spin_product(spin, op)
            for s_new, w in prods.items():
                ns = dict(state)
                ns[label] = (0, 0, s_new, None)
                new.append((coeff * w, ns))
        else:
            dp, dq = (1, 0) if op == RAISE else (0, 1)
            # shift any table standing right of the current ladder string:
            # table must first commute past the incoming factor
            t2 = shift_table(table, dp - dq) if table is not None else None
            for w, np_, nq_ in _boson_product(p, q, dp, dq):
                ns = dict(state)
                ns[label] = (np_, nq_, None, t2)
                new.append((coeff * w, ns))
    return new


def _apply_table(branches, label, mode, table):
    new = []
    for coeff, state in branches:
        st = state.get(label, (0, 0, None, None))
        p, q, spin, told = st
        t = _as_table(table, mode.truncation_dim)
        tnew = t if told is None else told * t
        ns = dict(state)
        ns[label] = (p, q, spin, tnew)
        new.append((coeff, ns))
    return new


# ---------------------------------------------------------------------------
# algebra facade bound to a system
# ---------------------------------------------------------------------------

class Algebra:
    """Operations on monomials/sums over a fixed mode system."""

    def __init__(self, system: System, max_dim: int = 400_000):
        self.system = system
        self.max_dim = max_dim
        self._mats: dict = {}

    # -- constructors -------------------------------------------------------
    def monomial(self, coefficient, factors=(), tables=None) -> OperatorMonomial:
        return OperatorMonomial(coefficient, factors, tables)

    def identity(self, coefficient=1.0) -> OperatorMonomial:
        return OperatorMonomial(coefficient)

    # -- canonicalization ---------------------------------------------------
    def normal_order(self, m: OperatorMonomial) -> OperatorSum:
        return normal_order(m, self.system)

    def to_sum(self, x) -> OperatorSum:
        if isinstance(x, OperatorMonomial):
            return self.normal_order(x)
        return x

    # -- products -----------------------------------------------------------
    def multiply(self, x, y) -> OperatorSum:
        """Operator product x*y as a canonical OperatorSum."""
        xs = self.to_sum(x)
        ys = self.to_sum(y)
        out = OperatorSum.zero()
        for a in xs.terms:
            for b in ys.terms:
                shift = {}
                for label, op in b.factors:
                    if label in a.tables:
                        shift[label] = shift.get(label, 0) + (1 if op == RAISE else (-1 if op == LOWER else 0))
                tables = dict(b.tables)
                coeff = a.coefficient * b.coefficient
                for label, t in a.tables.items():
                    ts = shift_table(t, shift.get(label, 0))
                    if label in tables:
                        tables[label] = ts * tables[label]
                    else:
                        tables[label] = ts
                raw = OperatorMonomial(coeff, a.factors + b.factors, tables)
                out = out + self.normal_order(raw)
        return out.compress()

    def product(self, monomials: Sequence) -> OperatorSum:
        """Ordered product of a sequence of monomials/sums."""
        out = self.normal_order(self.identity())
        for m in monomials:
            out = self.multiply(out, m)
        return out

    def commutator(self, x, y) -> OperatorSum:
        return (self.multiply(x, y) - self.multiply(y, x)).compress()

    # -- conjugation ---------------------------------------------------------
    def dagger(self, x):
        """Hermitian adjoint; monomial input yields a canonical monomial when
        possible (single-term result), else an OperatorSum."""
        if isinstance(x, OperatorSum):
            out = OperatorSum.zero()
            for t in x.terms:
                out = out + self._dagger_term(t)
            return out.compress()
        s = self._dagger_term(x)
        if len(s.terms) == 1:
            return s.terms[0]
        return s

    def _dagger_term(self, t: OperatorMonomial) -> OperatorSum:
        rev = [(m, _DAGGER[o]) for (m, o) in reversed(t.factors)]
        tables = {}
        for label, table in t.tables.items():
            # (M f(n))^dag = f*(n) M^dag = M^dag f*(n + d(M^dag)); d(M^dag) = -d(M)
            d = 0
            for m, o in t.factors:
                if m == label:
                    d += 1 if o == RAISE else (-1 if o == LOWER else 0)
            tables[label] = shift_table(np.conj(table), -d)
        raw = OperatorMonomial(np.conj(t.coefficient), rev, tables)
        return self.normal_order(raw)

    # -- dense realization ----------------------------------------------------
    def _factor_matrix(self, label: str, op: str) -> np.ndarray:
        key = (label, op)
        if key in self._mats:
            return self._mats[key]
        mode = self.system.mode(label)
        d = mode.truncation_dim
        if mode.kind == SPIN_HALF:
            mats = {
                SIGMA_MINUS: np.array([[0, 1], [0, 0]], dtype=complex),
                SIGMA_PLUS: np.array([[0, 0], [1, 0]], dtype=complex),
                SIGMA_Z: np.diag([-1.0, 1.0]).astype(complex),
                IDENTITY: np.eye(2, dtype=complex),
            }
            m = mats[op]
        else:
            a = np.zeros((d, d), dtype=complex)
            for n in range(1, d):
                a[n - 1, n] = math.sqrt(n)
            mats = {
                LOWER: a,
                RAISE: a.conj().T,
                NUMBER: a.conj().T @ a,
                IDENTITY: np.eye(d, dtype=complex),
            }
            m = mats[op]
        self._mats[key] = m
        return m

    def matrix(self, x) -> np.ndarray:
        """Dense Kronecker realization on the system's truncated space."""
        if self.system.total_dim ** 2 > self.max_dim ** 2:
            raise DimensionError(
                f"total dimension {self.system.total_dim} exceeds limit {self.max_dim}")
        if isinstance(x, OperatorSum):
            out = np.zeros((self.system.total_dim,) * 2, dtype=complex)
            for t in x.terms:
                out += self.matrix(t)
            return out
        per_mode = {m.label: np.eye(m.truncation_dim, dtype=complex)
                    for m in self.system.modes}
        for label, op in x.factors:
            per_mode[label] = per_mode[label] @ self._factor_matrix(label, op)
        for label, table in x.tables.items():
            mode = self.system.mode(label)
            per_mode[label] = per_mode[label] @ np.diag(_as_table(table, mode.truncation_dim))
        out = np.array([[x.coefficient]], dtype=complex)
        for m in self.system.modes:
            out = np.kron(out, per_mode[m.label])
        return out

    # -- helpers --------------------------------------------------------------
    def level_delta(self, t: OperatorMonomial, label: str) -> int:
        """Net excitation change of a monomial on one mode."""
        d = 0
        for m, o in t.factors:
            if m == label:
                d += 1 if o == RAISE else (-1 if o == LOWER else 0)
        return d

    def projector_table(self, label: str, n: int) -> np.ndarray:
        """Level table for the projector onto level n of a multilevel mode."""
        mode = self.system.mode(label)
        t = np.zeros(mode.truncation_dim, dtype=complex)
        if 0 <= n < mode.truncation_dim:
            t[n] = 1.0
        return t
