"""Coarse-graining window functions, frequency-domain filters, vector factorials.

All frequencies are angular (rad/ns), all times are ns.  The gaussian window
f(t) = exp(-t^2/2 tau^2)/(sqrt(2 pi) tau) is normalized to unit time integral,
so its filter obeys filter(0) = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: filter values below this are flushed to exact zero (avoids subnormals)
FILTER_FLOOR = 1e-300

#: |prefix sum| below tol_rel * max(|freq|, 1 rad/ns) counts as an exact zero
ZERO_TOL_REL = 1e-9


@dataclass(frozen=True)
class WindowFunction:
    """Temporal averaging window; only the gaussian family is implemented."""

    family: str = "gaussian"
    tau: float = 3.0  # ns

    def __post_init__(self):
        if self.family != "gaussian":
            raise NotImplementedError(f"window family {self.family!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def filter(self, omega):
        """Low-pass filter value exp(-omega^2 tau^2 / 2); even in omega.

        Values that underflow past 1e-300 are returned as exact 0.0.
        """
        x = np.asarray(omega, dtype=float)
        with np.errstate(under="ignore"):
            v = np.exp(-0.5 * (x * self.tau) ** 2)
        v = np.where(v < FILTER_FLOOR, 0.0, v)
        if np.isscalar(omega) or np.ndim(omega) == 0:
            return float(v)
        return v

    def time_profile(self, t):
        """Normalized window in the time domain."""
        t = np.asarray(t, dtype=float)
        return np.exp(-0.5 * (t / self.tau) ** 2) / (np.sqrt(2 * np.pi) * self.tau)

    def filter_taylor(self, center: float, order: int, chain: float = 1.0) -> np.ndarray:
        """Taylor coefficients of filter(center + chain*d) in d, up to ``order``.

        Returns coeffs[j] = (chain^j / j!) * filter^{(j)}(center), built from
        the gaussian-derivative table c(n, k):
        filter^{(n)}(x) = filter(x) * sum_k c(n,k) tau^{2(n-k)} x^{n-2k}.
        """
        f0 = self.filter(center)
        coeffs = np.zeros(order + 1)
        if f0 == 0.0:
            return coeffs
        tau2 = self.tau ** 2
        fact = 1.0
        for n in range(order + 1):
            if n > 0:
                fact *= n
            deriv = 0.0
            for k in range(n // 2 + 1):
                deriv += c_table(n, k) * tau2 ** (n - k) * center ** (n - 2 * k)
            coeffs[n] = f0 * deriv * chain ** n / fact
        return coeffs

    def __repr__(self):
        return f"WindowFunction(gaussian, tau={self.tau} ns)"


_C_CACHE: dict[tuple[int, int], float] = {(0, 0): 1.0}


def c_table(n: int, k: int) -> float:
    """Coefficients of the gaussian filter derivatives.

    Defined by c(0,0)=1, c(n,-1)=0, c(n,k)=0 for n<2k, and the recursion
    c(n+1,k) = -c(n,k) + (n-2k+2) c(n,k-1).
    """
    if k < 0 or n < 2 * k:
        return 0.0
    if (n, k) in _C_CACHE:
        return _C_CACHE[(n, k)]
    v = -c_table(n - 1, k) + (n - 2 * k + 1) * c_table(n - 1, k - 1)
    _C_CACHE[(n, k)] = v
    return v


def vector_factorial(freqs, zero_tol_rel: float = ZERO_TOL_REL):
    """Product of prefix sums of an ordered frequency list.

    Returns (product_over_nonzero_prefixes, zero_positions) where
    zero_positions lists the 1-based prefix lengths whose sums vanish within
    tolerance.  The empty list has factorial 1.  The plain factorial is the
    returned product when zero_positions is empty (and exactly 0 otherwise).
    """
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size == 0:
        return 1.0, ()
    tol = zero_tol_rel * max(float(np.max(np.abs(freqs))), 1.0)
    prefix = np.cumsum(freqs)
    zeros = tuple(int(j + 1) for j in range(freqs.size) if abs(prefix[j]) < tol)
    prod = 1.0
    for j in range(freqs.size):
        if (j + 1) not in zeros:
            prod *= prefix[j]
    return float(prod), zeros
