"""Loop-diagram enumeration and contraction-coefficient evaluation.

A coefficient C_{l,r}(w_1..w_{l+r}) is a sum over loop diagrams: ordered
partitions of the 2-tuple (l, r) where the loop holding the leftmost
frequency w_1 has at least one left slot.  Each loop contributes a filter
factor at its total frequency divided by the vector factorials of its left
(descending) and right (ascending) frequency chunks, with w_1 excluded from
its loop's left factorial.  Diagrams whose factorials contain vanishing
prefix sums are replaced by their finite part: the zeroth Laurent
coefficient in a common shift d applied to every frequency, computed exactly
by truncated-Taylor products (the gaussian-filter Taylor table c(n,k)
supplies the filter derivatives).  The finite parts summed over all diagrams
equal the d -> 0 limit of the full shifted sum, which is also computed as an
independent cross-check whenever a singularity is flagged.

Modes
-----
finite_tau : gaussian filter at the window's tau.
ir_limit   : tau -> infinity; filters become indicators of zero frequency and
             finite parts become polynomials in tau whose non-constant
             coefficients must cancel across diagrams.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .window import WindowFunction, c_table

#: refuse to enumerate diagrams beyond this many total frequency slots
MAX_TOTAL_SLOTS = 10

#: relative tolerance for flagging a prefix sum as exactly zero
ZERO_TOL_REL = 1e-9

#: closed-form vs delta-shift-limit disagreement above this is a hard error
CROSS_CHECK_REL = 1e-6


class SingularityError(ArithmeticError):
    """Raised when regularization cannot be validated for a diagram."""


@dataclass(frozen=True)
class LoopDiagram:
    """Ordered loops (l_i, r_i); loops[0] contains the leftmost frequency."""

    loops: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.loops or self.loops[0][0] < 1:
            raise ValueError("first loop must contain the leftmost frequency")

    @property
    def n_loops(self) -> int:
        return len(self.loops)

    def left_count(self) -> int:
        return sum(u for u, _ in self.loops)

    def right_count(self) -> int:
        return sum(d for _, d in self.loops)

    def dot(self, name: str = "diagram") -> str:
        """DOT digraph sketch: one node per frequency slot, chained per loop."""
        lines = [f"digraph {name} {{", "  rankdir=LR;"]
        l = self.left_count()
        r = self.right_count()
        lpos = 1
        rpos = l + r
        for i, (u, d) in enumerate(self.loops):
            ups = list(range(lpos, lpos + u))
            lpos += u
            downs = list(range(rpos - d + 1, rpos + 1))
            rpos -= d
            nodes = [f"w{p}" for p in ups + list(reversed(downs))]
            lines.append(f'  subgraph cluster_{i} {{ label="loop {i + 1}";')
            for nd in nodes:
                lines.append(f"    {nd};")
            for a, b in zip(nodes, nodes[1:] + nodes[:1]):
                lines.append(f"    {a} -> {b};")
            lines.append("  }")
        lines.append("}")
        return "\n".join(lines)


@dataclass(frozen=True)
class CoefficientRequest:
    l: int
    r: int
    freqs: tuple[float, ...]
    window: WindowFunction
    mode: str = "finite_tau"

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("a contraction always has at least one left slot")
        if len(self.freqs) != self.l + self.r:
            raise ValueError("frequency count must equal l + r")
        if self.mode not in ("finite_tau", "ir_limit"):
            raise ValueError(f"unknown mode {self.mode!r}")


def _partitions(l: int, r: int):
    """Ordered partitions of (l, r) into nonzero parts, last part upper >= 1.

    Parts are produced innermost-first (the part adjacent to the density
    matrix first); the last part is the one holding w_1.
    """
    if l == 0 and r == 0:
        return
    for u in range(l + 1):
        for d in range(r + 1):
            if u == 0 and d == 0:
                continue
            if l - u == 0 and r - d == 0:
                if u >= 1:
                    yield ((u, d),)
                continue
            for rest in _partitions(l - u, r - d):
                yield ((u, d),) + rest


@lru_cache(maxsize=4096)
def _partitions_cached(l: int, r: int) -> tuple:
    return tuple(_partitions(l, r))


def enumerate_diagrams(l: int, r: int, max_total: int = MAX_TOTAL_SLOTS) -> list[LoopDiagram]:
    """All loop diagrams for (l, r), deterministic order, duplicate-free."""
    if l < 1 or r < 0:
        raise ValueError("need l >= 1 and r >= 0")
    if l + r > max_total:
        raise ValueError(
            f"refusing to enumerate diagrams for l+r={l + r} > {max_total}")
    out = []
    for parts in _partitions_cached(l, r):
        # innermost-first storage -> main-text order reverses the parts
        out.append(LoopDiagram(loops=tuple(reversed(parts))))
    return out


# ---------------------------------------------------------------------------
# frequency binding
# ---------------------------------------------------------------------------

def _bind(parts_inner_first, l, r, freqs):
    """Attach frequency chunks to parts (given innermost-first).

    Returns a list of dicts with keys mu (descending left chunk), nu
    (ascending right chunk), holds_w1 (bool; that part's mu excludes w_1).
    Left slots are consumed from position l downward, right slots from
    position l+1 upward.
    """
    bound = []
    ltop = l  # next unconsumed left position (descending)
    rbot = l + 1  # next unconsumed right position (ascending)
    for j, (u, d) in enumerate(parts_inner_first):
        mu = [freqs[p - 1] for p in range(ltop, ltop - u, -1)]
        ltop -= u
        nu = [freqs[p - 1] for p in range(rbot, rbot + d)]
        rbot += d
        last = j == len(parts_inner_first) - 1
        if last:
            # mu currently ends with w_1; exclude it from the factorial
            assert mu and ltop == 0
            w1 = mu.pop()
        bound.append({"mu": mu, "nu": nu, "holds_w1": last})
    return bound


def _zero_tol(freqs) -> float:
    m = max((abs(f) for f in freqs), default=0.0)
    return ZERO_TOL_REL * max(m, 1.0)


# ---------------------------------------------------------------------------
# scalar evaluation
# ---------------------------------------------------------------------------

def _poly_mul(a: np.ndarray, b: np.ndarray, order: int) -> np.ndarray:
    """Product of two truncated polynomials, keeping terms up to ``order``."""
    out = np.convolve(a, b)
    return out[: order + 1]


def _rational_taylor(p: float, j: int, order: int) -> np.ndarray:
    """Taylor of 1/(p + j*d) in d up to ``order`` (p nonzero)."""
    coeffs = np.empty(order + 1)
    coeffs[0] = 1.0 / p
    for m in range(1, order + 1):
        coeffs[m] = coeffs[m - 1] * (-j / p)
    return coeffs


def _diagram_value_regular(bound, l, window, mode, tol):
    """Value of a diagram free of zero prefix sums (may be 0 in ir mode)."""
    sign = (-1.0) ** (l + len(bound))
    val = sign
    for part in bound:
        tot = sum(part["mu"]) + sum(part["nu"])
        if part["holds_w1"]:
            tot += part["w1"]
        if mode == "ir_limit":
            if abs(tot) > tol:
                return 0.0
            filt = 1.0
        else:
            filt = window.filter(tot)
            if filt == 0.0:
                return 0.0
        val *= filt
        for vec in (part["mu"], part["nu"]):
            run = 0.0
            for w in vec:
                run += w
                val /= run
    return val


def _diagram_finite_part(bound, l, window, mode, tol):
    """Zeroth Laurent coefficient in the common frequency shift.

    finite_tau: returns a complex scalar.
    ir_limit:   returns a polynomial in tau (coefficients of tau^0..tau^q);
                parts whose total frequency is nonzero kill the diagram.
    """
    # q = number of vanishing prefix sums; collect singular prefix lengths
    q = 0
    sing_prod = 1.0
    part_data = []
    for part in bound:
        tot = sum(part["mu"]) + sum(part["nu"])
        n_chain = len(part["mu"]) + len(part["nu"])
        if part["holds_w1"]:
            tot += part["w1"]
            n_chain += 1
        prefixes = []
        for vec in (part["mu"], part["nu"]):
            run = 0.0
            for j, w in enumerate(vec):
                run += w
                if abs(run) < tol:
                    q += 1
                    sing_prod *= (j + 1)
                    prefixes.append((0.0, j + 1, True))
                else:
                    prefixes.append((run, j + 1, False))
        part_data.append((tot, n_chain, prefixes))

    sign = (-1.0) ** (l + len(bound))

    if mode == "ir_limit":
        # every part total must vanish or the diagram dies exponentially
        for tot, _, _ in part_data:
            if abs(tot) > tol:
                return np.zeros(1)
        # series coefficients are polynomials in tau: axes (d-order, tau-order)
        acc = np.zeros((q + 1, q + 1))
        acc[0, 0] = 1.0
        for tot, n_chain, prefixes in part_data:
            filt = np.zeros((q + 1, q + 1))
            fact = 1.0
            for j in range(0, q + 1):
                if j:
                    fact *= j
                if j % 2 == 0:
                    filt[j, j] = (n_chain ** j) * c_table(j, j // 2) / fact
            acc = _poly2_mul(acc, filt, q)
            for p, jlen, is_zero in prefixes:
                if is_zero:
                    continue
                acc = _poly2_mul(acc, _as_poly2(_rational_taylor(p, jlen, q), q), q)
        series = acc[q]  # tau-polynomial multiplying d^q
        return sign / sing_prod * series

    acc = np.zeros(q + 1)
    acc[0] = 1.0
    for tot, n_chain, prefixes in part_data:
        filt = window.filter_taylor(tot, q, chain=n_chain)
        acc = _poly_mul(acc, filt, q)
        for p, jlen, is_zero in prefixes:
            if is_zero:
                continue
            acc = _poly_mul(acc, _rational_taylor(p, jlen, q), q)
    return sign / sing_prod * acc[q]


def _as_poly2(vec: np.ndarray, q: int) -> np.ndarray:
    """Lift a d-polynomial with constant (tau-free) coefficients to 2D."""
    out = np.zeros((q + 1, q + 1))
    out[: vec.size, 0] = vec
    return out


def _poly2_mul(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    """Product of 2D truncated polynomials in (d, tau)."""
    out = np.zeros((q + 1, q + 1))
    for i in range(q + 1):
        if not np.any(a[i]):
            continue
        for j in range(q + 1 - i):
            if not np.any(b[j]):
                continue
            prod = np.convolve(a[i], b[j])[: q + 1]
            out[i + j, : prod.size] += prod
    return out


def _has_singularity(bound, tol) -> bool:
    return _singularity_count(bound, tol) > 0


def _singularity_count(bound, tol) -> int:
    q = 0
    for part in bound:
        for vec in (part["mu"], part["nu"]):
            run = 0.0
            for w in vec:
                run += w
                if abs(run) < tol:
                    q += 1
    return q


def _diagram_magnitude(bound, window, mode, tol) -> float:
    """Coarse magnitude scale of a diagram with singular factors set to one."""
    mag = 1.0
    for part in bound:
        tot = sum(part["mu"]) + sum(part["nu"])
        if part["holds_w1"]:
            tot += part["w1"]
        if mode == "ir_limit":
            mag *= 1.0 if abs(tot) <= tol else 0.0
        else:
            mag *= max(window.filter(tot), 0.0)
        for vec in (part["mu"], part["nu"]):
            run = 0.0
            for j, w in enumerate(vec):
                run += w
                mag /= (j + 1) if abs(run) < tol else abs(run)
    return mag


def _bound_diagrams(l, r, freqs):
    out = []
    for parts in _partitions_cached(l, r):
        bound = _bind(parts, l, r, freqs)
        for part in bound:
            if part["holds_w1"]:
                part["w1"] = freqs[0]
        out.append(bound)
    return out


def shifted_sum(l: int, r: int, freqs, window: WindowFunction, delta: float) -> float:
    """Plain diagram sum with every frequency shifted by ``delta``.

    Raises SingularityError if the shift leaves a vanishing prefix sum.
    """
    shifted = [f + delta for f in freqs]
    tol = _zero_tol(freqs) if delta == 0.0 else min(_zero_tol(freqs), abs(delta) * 1e-3)
    total = 0.0
    for bound in _bound_diagrams(l, r, shifted):
        if _has_singularity(bound, tol):
            raise SingularityError("shift left a vanishing prefix sum")
        total += _diagram_value_regular(bound, l, window, "finite_tau", tol)
    return total


def delta_limit(l: int, r: int, freqs, window: WindowFunction,
                shifts=(1e-3, 1e-4, 1e-5)) -> float:
    """Richardson extrapolation of the shifted diagram sum to zero shift."""
    scale = max(max((abs(f) for f in freqs), default=0.0), 1.0)
    vals = []
    hs = []
    for mag in shifts:
        h = mag * scale
        for _ in range(8):
            try:
                v = shifted_sum(l, r, freqs, window, h)
                break
            except SingularityError:
                h *= 0.370371
        else:
            raise SingularityError("could not find a regular shift")
        hs.append(h)
        vals.append(v)
    # Neville extrapolation of the polynomial through (hs, vals) to h = 0
    p = list(vals)
    x = list(hs)
    for level in range(1, len(p)):
        for i in range(len(p) - level):
            p[i] = ((0.0 - x[i + level]) * p[i] + (x[i] - 0.0) * p[i + 1]) / (x[i] - x[i + level])
    return p[0]


def _coefficient_impl(l, r, freqs, window, mode, cross_check=True):
    tol = _zero_tol(freqs)
    bounds = _bound_diagrams(l, r, freqs)
    any_singular = False
    if mode == "ir_limit":
        q_max = l + r
        total = np.zeros(q_max + 1)
        mag = 0.0
        for bound in bounds:
            if _has_singularity(bound, tol):
                any_singular = True
                part = _diagram_finite_part(bound, l, window, mode, tol)
                total[: part.size] += part
                mag += _diagram_magnitude(bound, window, mode, tol)
            else:
                v = _diagram_value_regular(bound, l, window, mode, tol)
                total[0] += v
                mag += abs(v)
        if np.max(np.abs(total[1:]), initial=0.0) > 1e-9 * max(mag, 1e-300):
            raise SingularityError(
                "tau-divergent parts failed to cancel in the ir limit: "
                f"{total.tolist()}")
        return float(total[0])

    total = 0.0
    mag = 0.0
    q_max = 0
    for bound in bounds:
        q = _singularity_count(bound, tol)
        if q:
            any_singular = True
            q_max = max(q_max, q)
            v = _diagram_finite_part(bound, l, window, mode, tol)
            mag += _diagram_magnitude(bound, window, mode, tol)
        else:
            v = _diagram_value_regular(bound, l, window, mode, tol)
            mag += abs(v)
        total += v
    if any_singular and cross_check:
        ref, noise = cross_check_limit(l, r, freqs, window, q_max, mag)
        err = abs(total - ref)
        if err > max(CROSS_CHECK_REL * max(abs(total), abs(ref)),
                     1e-7 * mag, noise, 1e-30):
            raise SingularityError(
                f"regularized value {total!r} disagrees with shift limit {ref!r} "
                f"for C_{{{l},{r}}}{tuple(freqs)!r}")
    return float(total)


def cross_check_limit(l, r, freqs, window, q_max, mag):
    """Shift-limit value plus an estimate of its own roundoff noise floor.

    The shifted sum cancels poles of order q numerically, costing a factor
    (scale/h)^q in roundoff; larger shifts are used for deeper poles.
    """
    if q_max <= 1:
        shifts = (1e-3, 1e-4, 1e-5, 1e-6)
    elif q_max == 2:
        shifts = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
    else:
        shifts = (3e-2, 1e-2, 3e-3, 1e-3, 3e-4)
    ref = delta_limit(l, r, freqs, window, shifts)
    noise = 50 * 2.3e-16 * mag * min(shifts) ** (-q_max)
    return ref, noise


@lru_cache(maxsize=1_000_000)
def _coefficient_cached(l, r, freqs, tau, mode, cross_check):
    window = WindowFunction(tau=tau)
    return _coefficient_impl(l, r, freqs, window, mode, cross_check)


def coefficient(req: CoefficientRequest, cross_check: bool = True) -> float:
    """Contraction coefficient C_{l,r}(freqs) for the request's window/mode."""
    return _coefficient_cached(req.l, req.r, tuple(float(f) for f in req.freqs),
                               req.window.tau, req.mode, bool(cross_check))


def coefficient_lr(l, r, freqs, window, mode="finite_tau", cross_check=True) -> float:
    return _coefficient_cached(l, r, tuple(float(f) for f in freqs),
                               window.tau, mode, bool(cross_check))


def regularize(l, r, freqs, window, mode="finite_tau"):
    """Finite parts of the singular diagrams of C_{l,r}(freqs).

    Returns (sum_of_finite_parts, n_singular_diagrams).  Provided mainly for
    diagnostics; coefficient() already folds these into the total.
    """
    tol = _zero_tol(freqs)
    n = 0
    total = 0.0
    for bound in _bound_diagrams(l, r, freqs):
        if _has_singularity(bound, tol):
            n += 1
            v = _diagram_finite_part(bound, l, window, mode, tol)
            total += float(v[0]) if isinstance(v, np.ndarray) else v
    return total, n


def magnitude_scale(l, r, freqs, window, mode="finite_tau") -> float:
    """Sum of absolute diagram contributions (singular factors set to one)."""
    tol = _zero_tol(freqs)
    mag = 0.0
    for bound in _bound_diagrams(l, r, list(freqs)):
        if _has_singularity(bound, tol):
            mag += _diagram_magnitude(bound, window, mode, tol)
        else:
            mag += abs(_diagram_value_regular(bound, l, window, mode, tol))
    return mag


def cyclic_identity_check(freqs, k1, window, mode="finite_tau", rel_tol=1e-10):
    """Check C(w_k, w_1..w_{k-1}; k1) == C(-w_k..-w_1; k-k1+1).

    Agreement is relative to the evaluations themselves, with a floor set by
    the pre-cancellation diagram magnitude so exact zeros compare at the
    roundoff level rather than failing on 1e-16 residue.
    """
    freqs = [float(f) for f in freqs]
    k = len(freqs)
    if not 1 <= k1 <= k:
        raise ValueError("need 1 <= k1 <= k")
    lhs_freqs = [freqs[-1]] + freqs[:-1]
    lhs = coefficient_lr(k1, k - k1, lhs_freqs, window, mode)
    rhs_freqs = [-f for f in reversed(freqs)]
    rhs = coefficient_lr(k - k1 + 1, k1 - 1, rhs_freqs, window, mode)
    mag = (magnitude_scale(k1, k - k1, lhs_freqs, window, mode)
           + magnitude_scale(k - k1 + 1, k1 - 1, rhs_freqs, window, mode))
    scale = max(abs(lhs), abs(rhs), 1e-5 * mag, 1e-300)
    return abs(lhs - rhs) <= rel_tol * scale


# ---------------------------------------------------------------------------
# band (array) evaluation: one or more frequencies given as arrays
# ---------------------------------------------------------------------------

def coefficient_band(l, r, freq_fns, omega, window, cross_check_samples=2):
    """Vectorized C_{l,r} where each frequency is an affine map of omega.

    freq_fns : sequence of (const, slope) pairs; frequency i at a grid point
               is const_i + slope_i * omega.
    omega    : 1-D array of band frequencies.
    Returns an array of coefficients, finite_tau mode.  Points where prefix
    sums vanish are regularized individually.
    """
    omega = np.asarray(omega, dtype=float)
    k = l + r
    freqs = np.empty((k, omega.size))
    for i, (c0, s0) in enumerate(freq_fns):
        freqs[i] = c0 + s0 * omega
    tolv = ZERO_TOL_REL * np.maximum(np.max(np.abs(freqs), axis=0), 1.0)

    total = np.zeros(omega.size)
    singular_mask = np.zeros(omega.size, dtype=bool)
    for parts in _partitions_cached(l, r):
        val = np.full(omega.size, (-1.0) ** (l + len(parts)))
        sing = np.zeros(omega.size, dtype=bool)
        ltop, rbot = l, l + 1
        for j, (u, d) in enumerate(parts):
            mu_idx = [p - 1 for p in range(ltop, ltop - u, -1)]
            ltop -= u
            nu_idx = [p - 1 for p in range(rbot, rbot + d)]
            rbot += d
            last = j == len(parts) - 1
            tot = np.zeros(omega.size)
            for idx in mu_idx + nu_idx:
                tot += freqs[idx]
            fac_mu = mu_idx[:-1] if last else mu_idx  # drop w_1 from factorial
            val *= window.filter(tot)
            for vec in (fac_mu, nu_idx):
                run = np.zeros(omega.size)
                for idx in vec:
                    run += freqs[idx]
                    bad = np.abs(run) < tolv
                    sing |= bad
                    safe = np.where(bad, 1.0, run)
                    val /= safe
        total += np.where(sing, 0.0, val)
        singular_mask |= sing

    if np.any(singular_mask):
        idxs = np.nonzero(singular_mask)[0]
        for i in idxs:
            pt = tuple(float(freqs[j, i]) for j in range(k))
            total[i] = coefficient_lr(l, r, pt, window, "finite_tau",
                                      cross_check=False)
        # spot cross-checks on a few regularized points
        for i in idxs[:cross_check_samples]:
            pt = tuple(float(freqs[j, i]) for j in range(k))
            coefficient_lr(l, r, pt, window, "finite_tau", cross_check=True)
    return total
