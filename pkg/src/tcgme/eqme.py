"""Assembly of the time-coarse-grained effective master equation.

Given an interaction Hamiltonian written as a list of Fourier terms
(omega_j, h_j), the order-k generator is accumulated over ordered k-tuples of
term indices: the Hamiltonian piece carries [C(w;k) + C(-w_rev;k)]/2 on the
full left product, and each split k1 contributes a generalized dissipator
D_{h_1..h_k1, h_k1+1..h_k} with coefficient -i[C(w;k1) - C(-w_rev;k-k1)].
Conjugate tuple pairs are computed once; the partner term is generated by the
hermitian-conjugation map (L,R,Omega,c) -> (R^dag, L^dag, -Omega, c*), so the
term list is closed under h.c. by construction.

Tuples whose total frequency is too fast for the window to resolve are
skipped up front: with a gaussian filter every diagram of an m-loop partition
carries at least exp(-Omega^2 tau^2 / 2m), so |Omega| tau > sqrt(2*710*k)
makes every contribution underflow past the filter floor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .algebra import Algebra, OperatorMonomial, OperatorSum, System
from .diagrams import coefficient_lr
from .window import WindowFunction

#: default absolute prune threshold: 2*pi*1 Hz in rad/ns
PRUNE_DEFAULT = 2 * np.pi * 1e-9

#: frequency grouping tolerance for Omega keys (rad/ns)
OMEGA_TOL = 1e-9

#: -ln of the filter floor; used by the total-frequency tuple screen
_FILTER_LOG_FLOOR = 690.0

HAMILTONIAN = "hamiltonian"
DISSIPATOR = "dissipator"


class BudgetError(RuntimeError):
    """The combinatorial budget for the build was exceeded."""


@dataclass(frozen=True)
class FourierTerm:
    """(angular frequency, monomial) component of H_I(t) = sum e^{iwt} h."""

    omega: float
    monomial: OperatorMonomial


class FourierHamiltonian:
    """Fourier-decomposed interaction Hamiltonian over a mode system.

    Terms are canonicalized on construction; each h_j must reduce to a single
    canonical monomial.
    """

    def __init__(self, system: System, terms, omega0: float = 0.0):
        self.system = system
        alg = Algebra(system)
        canon = []
        for t in terms:
            s = alg.normal_order(t.monomial)
            if len(s.terms) > 1:
                raise ValueError(
                    f"Fourier term {t.monomial.pretty()} is not a single monomial")
            if s.terms:
                canon.append(FourierTerm(float(t.omega), s.terms[0]))
            else:
                canon.append(FourierTerm(float(t.omega), alg.identity(0.0)))
        self.terms = canon
        self.omega0 = omega0

    def conjugate_index_map(self, alg: Algebra | None = None) -> list[int]:
        """index j -> index of the term (-w_j, h_j^dag); raises if not closed."""
        alg = alg or Algebra(self.system)
        out = []
        for j, t in enumerate(self.terms):
            if t.monomial.coefficient == 0 and not t.monomial.tables:
                match = next(
                    (i for i, u in enumerate(self.terms)
                     if abs(u.omega + t.omega) <= OMEGA_TOL
                     and u.monomial.coefficient == 0), None)
                if match is None:
                    raise ValueError(f"zero term {j} has no conjugate partner")
                out.append(match)
                continue
            hd = alg.dagger(t.monomial)
            if isinstance(hd, OperatorSum):
                raise ValueError("Fourier terms must be single canonical monomials")
            match = None
            for i, u in enumerate(self.terms):
                if abs(u.omega + t.omega) <= OMEGA_TOL and _same_mono(u.monomial, hd, alg):
                    match = i
                    break
            if match is None:
                raise ValueError(
                    f"term {j} ({t.monomial.pretty()} @ {t.omega}) has no conjugate partner")
            out.append(match)
        return out

    def g_max(self) -> float:
        return max((abs(t.monomial.coefficient) for t in self.terms), default=0.0)

    def scaled(self, lam: float) -> "FourierHamiltonian":
        return FourierHamiltonian(
            self.system,
            [FourierTerm(t.omega, t.monomial * lam) for t in self.terms],
            self.omega0)


def _same_mono(a: OperatorMonomial, b: OperatorMonomial, alg: Algebra) -> bool:
    if a.key() != b.key():
        return False
    return abs(a.coefficient - b.coefficient) <= 1e-12 * max(
        abs(a.coefficient), abs(b.coefficient), 1e-300)


@dataclass
class SuperoperatorTerm:
    """One term of the EQME: a Hamiltonian piece or generalized dissipator.

    Hamiltonian kind: contributes -i coef e^{i Omega t} [left, rho].
    Dissipator kind:  contributes coef e^{i Omega t} D_{left,right} rho with
    D_{L,R} rho = L rho R - (R L rho + rho R L)/2.
    Monomials are unit-coefficient canonical structures (tables allowed);
    scalar weight lives in ``coef``.
    """

    kind: str
    left: OperatorMonomial
    right: OperatorMonomial | None
    omega: float
    coef: complex
    order: int

    def key(self):
        rk = self.right.key() if self.right is not None else None
        return (self.kind, self.left.key(), rk, round(self.omega / OMEGA_TOL),
                self.order)

    def structure_key(self):
        """Key ignoring the perturbative order (for cross-order lookups)."""
        rk = self.right.key() if self.right is not None else None
        return (self.kind, self.left.key(), rk, round(self.omega / OMEGA_TOL))

    def magnitude(self) -> float:
        m = abs(self.coef)
        for mono in (self.left, self.right):
            if mono is None:
                continue
            for tab in mono.tables.values():
                m *= float(np.max(np.abs(tab))) if tab.size else 0.0
        return m

    def hc(self, alg: Algebra) -> "SuperoperatorTerm":
        if self.kind == HAMILTONIAN:
            left = alg.dagger(self.left)
            if isinstance(left, OperatorSum):
                raise ValueError("dagger of canonical monomial must be a monomial")
            coef = np.conj(self.coef) * left.coefficient
            return SuperoperatorTerm(HAMILTONIAN, left.with_coefficient(1.0), None,
                                     -self.omega, coef, self.order)
        l2 = alg.dagger(self.right)
        r2 = alg.dagger(self.left)
        if isinstance(l2, OperatorSum) or isinstance(r2, OperatorSum):
            raise ValueError("dagger of canonical monomial must be a monomial")
        coef = np.conj(self.coef) * l2.coefficient * r2.coefficient
        return SuperoperatorTerm(DISSIPATOR, l2.with_coefficient(1.0),
                                 r2.with_coefficient(1.0), -self.omega, coef,
                                 self.order)

    def pretty(self) -> str:
        osc = "" if abs(self.omega) <= OMEGA_TOL else f" e^(i {self.omega:.6g} t)"
        if self.kind == HAMILTONIAN:
            return f"H[{self.order}] ({self.coef:.6g}){osc} {self.left.pretty()}"
        return (f"D[{self.order}] ({self.coef:.6g}){osc} "
                f"D_{{{self.left.pretty()}, {self.right.pretty()}}}")


class EffectiveMasterEquation:
    """TCG generator: superoperator terms grouped by perturbative order."""

    def __init__(self, system: System, window: WindowFunction, mode: str,
                 terms=None, prune_log=None):
        self.system = system
        self.window = window
        self.mode = mode
        self.terms: list[SuperoperatorTerm] = list(terms or [])
        self.prune_log: list[dict] = list(prune_log or [])

    # -- access ---------------------------------------------------------------
    def by_order(self, order: int) -> list[SuperoperatorTerm]:
        return [t for t in self.terms if t.order == order]

    def max_order(self) -> int:
        return max((t.order for t in self.terms), default=0)

    def term_map(self) -> dict:
        return {t.key(): t for t in self.terms}

    def restricted(self, orders) -> "EffectiveMasterEquation":
        keep = [t for t in self.terms if t.order in orders]
        return EffectiveMasterEquation(self.system, self.window, self.mode, keep,
                                       self.prune_log)

    # -- h.c. closure -----------------------------------------------------------
    def check_hc_closure(self, alg: Algebra | None = None, tol: float = 1e-9) -> bool:
        alg = alg or Algebra(self.system)
        index = {}
        for t in self.terms:
            k = t.key()
            index[k] = index.get(k, 0) + t.coef
        for t in self.terms:
            p = t.hc(alg)
            got = index.get(p.key())
            if got is None or abs(got - p.coef) > tol * max(1e-300, abs(p.coef)):
                return False
        return True

    # -- serialization ----------------------------------------------------------
    def to_json_dict(self) -> dict:
        def mono_dict(m):
            if m is None:
                return None
            return {
                "factors": [list(f) for f in m.factors],
                "tables": {k: [[float(z.real), float(z.imag)] for z in v]
                           for k, v in m.tables.items()},
                "pretty": m.pretty(),
            }

        return {
            "window": {"family": self.window.family, "tau_ns": self.window.tau},
            "mode": self.mode,
            "terms": [
                {
                    "order": t.order,
                    "kind": t.kind,
                    "L": mono_dict(t.left),
                    "R": mono_dict(t.right),
                    "Omega_rad_per_ns": float(t.omega),
                    "coef_re": float(np.real(t.coef)),
                    "coef_im": float(np.imag(t.coef)),
                }
                for t in sorted(self.terms, key=lambda t: (t.order, t.kind,
                                                           t.left.pretty(),
                                                           t.omega))
            ],
            "prune_log": self.prune_log,
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)

    def pretty(self) -> str:
        lines = [f"EQME ({self.mode}, tau={self.window.tau} ns), "
                 f"{len(self.terms)} terms"]
        for t in sorted(self.terms, key=lambda t: (t.order, t.kind, -t.magnitude())):
            lines.append("  " + t.pretty())
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def _product_cache_fn(alg: Algebra, terms):
    cache: dict[tuple, OperatorSum | None] = {}

    def product_of(idx: tuple) -> OperatorSum | None:
        if idx in cache:
            return cache[idx]
        if len(idx) == 1:
            s = alg.normal_order(terms[idx[0]].monomial)
        else:
            head = product_of(idx[:-1])
            if head is None:
                cache[idx] = None
                return None
            s = alg.multiply(head, terms[idx[-1]].monomial)
        s = s.compress()
        out = s if s.terms else None
        cache[idx] = out
        return out

    return product_of


def build(H: FourierHamiltonian, window: WindowFunction, k_max: int,
          mode: str = "finite_tau", coef_floor: float = PRUNE_DEFAULT * 1e-3,
          tuple_budget: int = 20_000_000, cross_check: bool = True,
          validity_warning: bool = True) -> EffectiveMasterEquation:
    """Accumulate the TCG generator up to perturbative order k_max."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    alg = Algebra(H.system)
    if validity_warning:
        gt = H.g_max() * window.tau
        if gt >= 0.3:
            warnings.warn(
                f"g_max*tau = {gt:.3g} >= 0.3: the perturbative expansion may "
                "converge slowly", stacklevel=2)

    n = len(H.terms)
    if n == 0:
        return EffectiveMasterEquation(H.system, window, mode)
    if sum(n ** k for k in range(1, k_max + 1)) > tuple_budget:
        raise BudgetError(
            f"{n} terms at order {k_max} exceeds the tuple budget; "
            "pre-filter the Hamiltonian terms")

    conj = H.conjugate_index_map(alg)
    product_of = _product_cache_fn(alg, H.terms)
    omegas = np.array([t.omega for t in H.terms])
    tau = window.tau

    acc: dict = {}

    def add_term(term: SuperoperatorTerm):
        k = term.key()
        if k in acc:
            acc[k] = _merge_terms(acc[k], term)
        else:
            acc[k] = term

    def emit_pair(term: SuperoperatorTerm, self_conj: bool):
        add_term(term)
        if not self_conj:
            add_term(term.hc(alg))

    for k in range(1, k_max + 1):
        omega_cut = np.sqrt(2.0 * _FILTER_LOG_FLOOR * k) / tau if mode == "finite_tau" \
            else OMEGA_TOL * (k + 1)
        for idx in np.ndindex(*([n] * k)):
            freqs = tuple(float(omegas[j]) for j in idx)
            omega_tot = float(sum(freqs))
            if abs(omega_tot) > omega_cut:
                continue
            cidx = tuple(conj[j] for j in reversed(idx))
            neg_rev = tuple(-f for f in reversed(freqs))

            # scalar magnitude bound of the tuple's operator coefficients
            wmag = 1.0
            for j in idx:
                wmag *= abs(H.terms[j].monomial.coefficient)
            if wmag == 0.0:
                continue

            # -- Hamiltonian piece (full left product) --
            if cidx >= idx:
                ch = 0.5 * (coefficient_lr(k, 0, freqs, window, mode, cross_check)
                            + coefficient_lr(k, 0, neg_rev, window, mode, cross_check))
                if abs(ch) * wmag > coef_floor:
                    prod = product_of(idx)
                    if prod is not None:
                        for mono in prod.terms:
                            t = SuperoperatorTerm(
                                HAMILTONIAN, mono.with_coefficient(1.0), None,
                                omega_tot, ch * mono.coefficient, k)
                            emit_pair(t, cidx == idx)

            # -- dissipator pieces (splits 1..k-1) --
            for k1 in range(1, k):
                if (cidx, k - k1) < (idx, k1):
                    continue
                self_conj = (cidx, k - k1) == (idx, k1)
                cd = -1j * (coefficient_lr(k1, k - k1, freqs, window, mode, cross_check)
                            - coefficient_lr(k - k1, k1, neg_rev, window, mode, cross_check))
                if abs(cd) * wmag <= coef_floor:
                    continue
                lp = product_of(idx[:k1])
                if lp is None:
                    continue
                rp = product_of(idx[k1:])
                if rp is None:
                    continue
                for lm in lp.terms:
                    for rm in rp.terms:
                        t = SuperoperatorTerm(
                            DISSIPATOR, lm.with_coefficient(1.0),
                            rm.with_coefficient(1.0), omega_tot,
                            cd * lm.coefficient * rm.coefficient, k)
                        emit_pair(t, self_conj)

    terms = [t for t in acc.values()
             if t.magnitude() > coef_floor
             and not (t.kind == HAMILTONIAN and t.left.is_identity)]
    return EffectiveMasterEquation(H.system, window, mode, terms)


def _merge_terms(a: SuperoperatorTerm, b: SuperoperatorTerm) -> SuperoperatorTerm:
    return SuperoperatorTerm(a.kind, a.left, a.right, a.omega, a.coef + b.coef,
                             a.order)


# ---------------------------------------------------------------------------
# prune / spectra
# ---------------------------------------------------------------------------

def prune(eqme: EffectiveMasterEquation, threshold_abs: float = PRUNE_DEFAULT,
          band_cutoff: float | None = None) -> EffectiveMasterEquation:
    """Drop weak terms and (optionally) fast-oscillating terms.

    Every drop is recorded in the prune log.  The h.c. closure of the
    surviving set is re-verified.
    """
    kept = []
    log = list(eqme.prune_log)
    tau = eqme.window.tau
    for t in eqme.terms:
        mag = t.magnitude()
        if mag < threshold_abs:
            log.append({"term": t.pretty(), "reason": "below threshold",
                        "magnitude": mag, "threshold": threshold_abs})
            continue
        if band_cutoff is not None and abs(t.omega) * tau > band_cutoff:
            log.append({"term": t.pretty(), "reason": "outside band",
                        "omega_tau": abs(t.omega) * tau, "cutoff": band_cutoff})
            continue
        kept.append(t)
    out = EffectiveMasterEquation(eqme.system, eqme.window, eqme.mode, kept, log)
    if not out.check_hc_closure():
        raise RuntimeError("pruning broke hermitian-conjugate closure")
    return out


def lumped_spectrum(eqme: EffectiveMasterEquation) -> dict[float, float]:
    """Total absolute coefficient per distinct oscillation frequency."""
    bins: dict[int, float] = {}
    reps: dict[int, float] = {}
    for t in eqme.terms:
        key = round(t.omega / OMEGA_TOL)
        bins[key] = bins.get(key, 0.0) + t.magnitude()
        reps.setdefault(key, t.omega)
    return {reps[k]: bins[k] for k in sorted(bins)}


# ---------------------------------------------------------------------------
# dense application
# ---------------------------------------------------------------------------

class SandwichForm:
    """Dense sandwich representation sum_i coef_i e^{i w_i t} P_i rho Q_i."""

    def __init__(self, ps, qs, coefs, omegas):
        self.ps = ps
        self.qs = qs
        self.coefs = np.asarray(coefs, dtype=complex)
        self.omegas = np.asarray(omegas, dtype=float)
        self.static = bool(np.all(np.abs(self.omegas) <= OMEGA_TOL))

    def apply(self, rho: np.ndarray, t: float = 0.0) -> np.ndarray:
        out = np.zeros_like(rho)
        if self.static:
            weights = self.coefs
        else:
            weights = self.coefs * np.exp(1j * self.omegas * t)
        for p, q, w in zip(self.ps, self.qs, weights):
            out += w * (p @ rho if q is None else
                        (rho @ q if p is None else p @ rho @ q))
        return out

    def trace_vector(self) -> np.ndarray:
        """Matrix M with Tr[L(rho)] = Tr[M rho] at t=0 (static part only)."""
        dim = next(p.shape[0] for p in self.ps if p is not None)
        m = np.zeros((dim, dim), dtype=complex)
        for p, q, w in zip(self.ps, self.qs, self.coefs):
            if p is None:
                m += w * q
            elif q is None:
                m += w * p
            else:
                m += w * (q @ p)
        return m


def to_sandwiches(eqme: EffectiveMasterEquation, alg: Algebra | None = None) -> SandwichForm:
    """Compile the EQME into dense sandwich triples for integration."""
    alg = alg or Algebra(eqme.system)
    ps, qs, coefs, omegas = [], [], [], []

    def emit(p, q, c, w):
        ps.append(p)
        qs.append(q)
        coefs.append(c)
        omegas.append(w)

    for t in eqme.terms:
        if t.kind == HAMILTONIAN:
            x = alg.matrix(t.left)
            emit(x, None, -1j * t.coef, t.omega)
            emit(None, x, 1j * t.coef, t.omega)
        else:
            l = alg.matrix(t.left)
            r = alg.matrix(t.right)
            rl = r @ l
            emit(l, r, t.coef, t.omega)
            emit(rl, None, -0.5 * t.coef, t.omega)
            emit(None, rl, -0.5 * t.coef, t.omega)
    return SandwichForm(ps, qs, coefs, omegas)
