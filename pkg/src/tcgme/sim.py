"""Numerical backends: exact integration, coarse-graining, EQME integration,
the lambda-scaling generator-extraction oracle, phase-space diagnostics.

All integrators run adaptive embedded Runge-Kutta (scipy's RK45) on the
flattened density matrix at relative tolerance 1e-8 by default, and record
the accepted step sizes for stiffness reporting.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .algebra import Algebra, System
from .eqme import EffectiveMasterEquation, FourierHamiltonian, SandwichForm, to_sandwiches
from .window import WindowFunction

RTOL_DEFAULT = 1e-8
LEAK_BOUND = 1e-8
POP_FLAG = 1e-6
POP_ABORT = 1e-3


class TruncationLeakError(RuntimeError):
    pass


class PaddingError(ValueError):
    pass


@dataclass
class DensityMatrixState:
    t: float
    rho: np.ndarray

    def check(self, herm_tol=1e-10, trace_tol=1e-9):
        h = np.linalg.norm(self.rho - self.rho.conj().T)
        tr = abs(np.trace(self.rho) - 1.0)
        if h > herm_tol:
            raise ValueError(f"state not hermitian: {h:.3e}")
        if tr > trace_tol:
            raise ValueError(f"trace deviates from one: {tr:.3e}")
        return self


@dataclass
class Trajectory:
    """Uniformly sampled density-matrix history plus step statistics."""

    times: np.ndarray
    rhos: np.ndarray  # (nt, d, d)
    accepted_steps: np.ndarray = field(default_factory=lambda: np.empty(0))
    wall_time: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def state(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.rhos[i]

    def expectations(self, op: np.ndarray) -> np.ndarray:
        return np.einsum("tij,ji->t", self.rhos, op)

    def conditional_expectations(self, op: np.ndarray, proj: np.ndarray):
        num = np.einsum("tij,ji->t", self.rhos, op @ proj)
        den = np.real(np.einsum("tij,ji->t", self.rhos, proj))
        return num / np.maximum(den, 1e-300)

    def max_step(self) -> float:
        return float(np.max(self.accepted_steps)) if self.accepted_steps.size else 0.0

    def mean_step(self) -> float:
        return float(np.mean(self.accepted_steps)) if self.accepted_steps.size else 0.0


class MicroscopicModel:
    """Dense realization of H_I(t) = sum e^{iwt} h plus Lindblad sandwiches."""

    def __init__(self, H: FourierHamiltonian, lindblad=(), alg: Algebra | None = None):
        self.alg = alg or Algebra(H.system)
        self.system = H.system
        mats, omegas = [], []
        for t in H.terms:
            if t.monomial.coefficient == 0 and not t.monomial.tables:
                continue
            mats.append(self.alg.matrix(t.monomial))
            omegas.append(t.omega)
        self.h_mats = mats
        self.h_omegas = np.array(omegas)
        # lindblad: iterable of (rate, L_monomial, R_monomial); D_{L,R} with rate
        self.diss = []
        for rate, lm, rm in lindblad:
            L = self.alg.matrix(lm) if not isinstance(lm, np.ndarray) else lm
            R = self.alg.matrix(rm) if not isinstance(rm, np.ndarray) else rm
            self.diss.append((rate, L, R, R @ L))

    def hamiltonian(self, t: float) -> np.ndarray:
        dim = self.system.total_dim
        out = np.zeros((dim, dim), dtype=complex)
        for m, w in zip(self.h_mats, self.h_omegas):
            out += np.exp(1j * w * t) * m
        return out

    def rhs(self, t: float, rho: np.ndarray) -> np.ndarray:
        h = self.hamiltonian(t)
        out = -1j * (h @ rho - rho @ h)
        for rate, L, R, RL in self.diss:
            out += rate * (L @ rho @ R - 0.5 * (RL @ rho + rho @ RL))
        return out


def _run_ivp(rhs, rho0, t_span, t_eval, rtol, atol):
    dim = rho0.shape[0]

    def f(t, y):
        return rhs(t, y.reshape(dim, dim)).reshape(-1)

    t0 = _time.perf_counter()
    sol = solve_ivp(f, t_span, np.asarray(rho0, dtype=complex).reshape(-1),
                    method="RK45", rtol=rtol, atol=atol, t_eval=t_eval,
                    dense_output=False)
    wall = _time.perf_counter() - t0
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    rhos = sol.y.T.reshape(len(sol.t), dim, dim)
    return sol.t, rhos, wall


def _accepted_steps(rhs, rho0, t_span, rtol, atol):
    """Separate pass without t_eval so sol.t reflects accepted steps."""
    dim = rho0.shape[0]

    def f(t, y):
        return rhs(t, y.reshape(dim, dim)).reshape(-1)

    t0 = _time.perf_counter()
    sol = solve_ivp(f, t_span, np.asarray(rho0, dtype=complex).reshape(-1),
                    method="RK45", rtol=rtol, atol=atol)
    wall = _time.perf_counter() - t0
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return np.diff(sol.t), wall


def integrate_exact(H: FourierHamiltonian, lindblad, rho0, t_span, dt,
                    rtol=RTOL_DEFAULT, atol=None, leak_bound=LEAK_BOUND,
                    leak_mode=None, alg=None, record_steps=True) -> Trajectory:
    """Integrate d rho/dt = -i[H_I(t), rho] + sum rate D_{L,R} rho.

    Samples the solution on a uniform grid of spacing dt; the accepted-step
    statistics come from an unconstrained pass at the same tolerance.
    """
    model = MicroscopicModel(H, lindblad, alg)
    atol = atol if atol is not None else rtol * 1e-2
    t_eval = np.arange(t_span[0], t_span[1] + dt * 0.5, dt)
    times, rhos, wall = _run_ivp(model.rhs, rho0, t_span, t_eval, rtol, atol)
    steps = np.empty(0)
    if record_steps:
        steps, _ = _accepted_steps(model.rhs, rho0, t_span, rtol, atol)
    traj = Trajectory(times, rhos, steps, wall)
    if leak_mode is not None:
        _check_leak(traj, model.system, leak_mode, leak_bound)
    return traj


def _check_leak(traj, system: System, mode_label: str, bound: float):
    """Verify the top truncation level of one mode stays unpopulated."""
    dims = system.dims()
    idx = system.index(mode_label)
    pops = np.zeros(len(traj.times))
    for t_i in range(len(traj.times)):
        r = traj.rhos[t_i].reshape(*dims, *dims)
        diag = np.einsum("".join(chr(97 + i) for i in range(len(dims))) * 2 + "->"
                         + "".join(chr(97 + i) for i in range(len(dims))),
                         r.reshape(*dims, *dims))
        axes = tuple(i for i in range(len(dims)) if i != idx)
        per_level = np.real(diag.sum(axis=axes) if axes else diag)
        pops[t_i] = per_level[-1]
    worst = float(np.max(pops))
    if worst > bound:
        raise TruncationLeakError(
            f"top level of mode {mode_label!r} reached population {worst:.3e} "
            f"> {bound:.1e}; increase its truncation_dim")


def coarse_grain(traj: Trajectory, window: WindowFunction,
                 out_span=None, half_width_taus: float = 5.0) -> Trajectory:
    """Convolve a trajectory with the temporal window (discrete, renormalized).

    The input must extend half_width_taus*tau beyond both ends of the output
    window; raises PaddingError stating the required pre-roll otherwise.
    """
    dt = traj.dt
    if dt <= 0:
        raise ValueError("need a uniformly sampled trajectory")
    if dt > window.tau / 20 + 1e-12:
        raise ValueError(f"grid dt={dt} too coarse for tau={window.tau}; "
                         "need dt <= tau/20")
    pad = half_width_taus * window.tau
    if out_span is None:
        out_span = (traj.times[0] + pad, traj.times[-1] - pad)
    lo, hi = out_span
    if traj.times[0] > lo - pad + 1e-9 or traj.times[-1] < hi + pad - 1e-9:
        raise PaddingError(
            f"trajectory [{traj.times[0]:g}, {traj.times[-1]:g}] ns cannot "
            f"cover output [{lo:g}, {hi:g}] ns: needs {pad:g} ns on both ends")
    m = int(np.round(pad / dt))
    offs = np.arange(-m, m + 1)
    w = window.time_profile(offs * dt)
    w = w / w.sum()
    i_lo = int(np.round((lo - traj.times[0]) / dt))
    i_hi = int(np.round((hi - traj.times[0]) / dt))
    out_times = traj.times[i_lo:i_hi + 1]
    out = np.zeros((len(out_times),) + traj.rhos.shape[1:], dtype=complex)
    for j, i in enumerate(range(i_lo, i_hi + 1)):
        sel = traj.rhos[i - m:i + m + 1]
        out[j] = np.tensordot(w, sel, axes=(0, 0))
    return Trajectory(out_times, out, traj.accepted_steps, traj.wall_time,
                      list(traj.flags))


def integrate_eqme(eqme: EffectiveMasterEquation, rho0, t_span, dt,
                   rtol=RTOL_DEFAULT, atol=None, alg=None, record_steps=True,
                   envelope=None) -> Trajectory:
    """Integrate the EQME generator from an admissible coarse-grained state.

    ``envelope``: optional callable(term, t) -> complex multiplier applied to
    each term's coefficient (slowly varying drive modulation).  Population
    excursions beyond [-1e-6, 1+1e-6] are flagged; below -1e-3 integration
    aborts.
    """
    alg = alg or Algebra(eqme.system)
    atol = atol if atol is not None else rtol * 1e-2
    flags: list = []

    if envelope is None:
        sw = to_sandwiches(eqme, alg)
        rhs = sw.apply
    else:
        groups = []
        for term in eqme.terms:
            one = EffectiveMasterEquation(eqme.system, eqme.window, eqme.mode, [term])
            groups.append((term, to_sandwiches(one, alg)))

        def rhs(t, rho):
            out = np.zeros_like(rho)
            for term, swt in groups:
                out += envelope(term, t) * swt.apply(rho, t)
            return out

    t_eval = np.arange(t_span[0], t_span[1] + dt * 0.5, dt)
    times, rhos, wall = _run_ivp(rhs, rho0, t_span, t_eval, rtol, atol)
    pops = np.real(np.einsum("tii->ti", rhos))
    if np.min(pops) < -POP_ABORT:
        raise RuntimeError(f"population fell below -{POP_ABORT}: "
                           f"{np.min(pops):.3e}")
    if np.min(pops) < -POP_FLAG or np.max(pops) > 1 + POP_FLAG:
        flags.append({"flag": "population excursion",
                      "min": float(np.min(pops)), "max": float(np.max(pops))})
    steps = np.empty(0)
    if record_steps:
        steps, _ = _accepted_steps(rhs, rho0, t_span, rtol, atol)
    return Trajectory(times, rhos, steps, wall, flags)


# ---------------------------------------------------------------------------
# lambda-scaling extraction of the order-k generators (engine-independent)
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    orders: dict            # k -> (d^2, d^2) superoperator matrix
    condition_number: float
    residual: float


def liouvillian_oracle(H: FourierHamiltonian, window: WindowFunction,
                       k_max: int, t_probe: float, lindblad=(),
                       lam_grid=(0.25, 0.5, 0.75, 1.0), rtol=1e-10,
                       dt_factor=40.0, half_width_taus=5.0,
                       fit_degree=None, residual_tol=1e-4) -> OracleResult:
    """Extract the order-k generators of the coarse-grained dynamics by
    brute force, independent of the diagram engine.

    Scales every Hamiltonian coefficient by lambda, propagates a complete
    operator basis exactly, coarse-grains, and reads off the exact generator
    L(lambda) at t_probe from d/dt rho_bar = L rho_bar.  A polynomial fit in
    lambda (degree k_max+1 by default, no constant term) separates the
    orders.  The time derivative is computed by convolving the window with
    the microscopic right-hand side, not by finite differences.
    """
    system = H.system
    dim = system.total_dim
    if dim > 12:
        raise ValueError("oracle is intended for tiny spaces (total dim <= 12)")
    alg = Algebra(system)
    fit_degree = fit_degree or (k_max + 1)
    if fit_degree > len(lam_grid):
        raise ValueError("need at least fit_degree lambda points")
    dt = window.tau / dt_factor
    pad = half_width_taus * window.tau
    span = (t_probe - pad - 2 * dt, t_probe + pad + 2 * dt)

    basis = []
    for i in range(dim):
        for j in range(dim):
            e = np.zeros((dim, dim), dtype=complex)
            e[i, j] = 1.0
            basis.append(e)

    l_of_lam = []
    for lam in lam_grid:
        model = MicroscopicModel(H.scaled(lam), lindblad, alg)
        xs = np.zeros((dim * dim, len(basis)), dtype=complex)
        ys = np.zeros((dim * dim, len(basis)), dtype=complex)
        m = int(np.round(pad / dt))
        offs = np.arange(-m, m + 1)
        w = window.time_profile(offs * dt)
        w = w / w.sum()
        grid = t_probe + offs * dt
        for b, e in enumerate(basis):
            times, rhos, _ = _run_ivp(model.rhs, e, span,
                                      np.concatenate([[span[0]], grid, [span[1]]]),
                                      rtol, rtol * 1e-2)
            hist = rhos[1:-1]
            rho_bar = np.tensordot(w, hist, axes=(0, 0))
            rdot = np.stack([model.rhs(tt, rr) for tt, rr in zip(grid, hist)])
            rho_bar_dot = np.tensordot(w, rdot, axes=(0, 0))
            xs[:, b] = rho_bar.reshape(-1)
            ys[:, b] = rho_bar_dot.reshape(-1)
        l_of_lam.append(ys @ np.linalg.inv(xs))

    lam = np.asarray(lam_grid, dtype=float)
    V = np.vander(lam, N=fit_degree + 1, increasing=True)[:, 1:]  # no constant
    cond = float(np.linalg.cond(V))
    stack = np.stack([m.reshape(-1) for m in l_of_lam])
    coeffs, res, *_ = np.linalg.lstsq(V, stack, rcond=None)
    fitted = V @ coeffs
    resid = float(np.max(np.abs(fitted - stack)))
    scale = float(np.max(np.abs(stack)))
    if resid > residual_tol * max(scale, 1e-300):
        raise RuntimeError(
            f"lambda fit residual {resid:.3e} above tolerance; refine the "
            "lambda grid or lower the coupling")
    orders = {k: coeffs[k - 1].reshape(dim * dim, dim * dim)
              for k in range(1, k_max + 1)}
    return OracleResult(orders, cond, resid)


def eqme_order_matrix(eqme: EffectiveMasterEquation, order: int, t: float,
                      alg: Algebra | None = None) -> np.ndarray:
    """Dense superoperator matrix of one perturbative order of the EQME."""
    alg = alg or Algebra(eqme.system)
    dim = eqme.system.total_dim
    sw = to_sandwiches(eqme.restricted([order]), alg)
    out = np.zeros((dim * dim, dim * dim), dtype=complex)
    for b in range(dim * dim):
        e = np.zeros(dim * dim, dtype=complex)
        e[b] = 1.0
        out[:, b] = sw.apply(e.reshape(dim, dim), t).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# phase-space diagnostics
# ---------------------------------------------------------------------------

@dataclass
class QGrid:
    """Conditional Husimi functions on a rectangular (phi, n) grid."""

    phi: np.ndarray
    n: np.ndarray
    mu: str
    values: dict  # (a, b) -> complex array (nphi, nn); diagonal entries real

    def cell_area(self) -> float:
        return float((self.phi[1] - self.phi[0]) * (self.n[1] - self.n[0]))

    def total_probability(self) -> float:
        area = self.cell_area()
        return float(np.real(self.values[(0, 0)].sum() + self.values[(1, 1)].sum()) * area)

    def to_rows(self):
        rows = []
        for i, ph in enumerate(self.phi):
            for j, nn in enumerate(self.n):
                rows.append((ph, nn,
                             float(np.real(self.values[(0, 0)][i, j])),
                             float(np.real(self.values[(1, 1)][i, j]))))
        return rows


def _coherent_vectors(alpha: np.ndarray, nfock: int) -> np.ndarray:
    """Columns of normalized coherent states for an array of amplitudes."""
    out = np.zeros((nfock, alpha.size), dtype=complex)
    out[0] = 1.0
    for n in range(1, nfock):
        out[n] = out[n - 1] * alpha / np.sqrt(n)
    out *= np.exp(-0.5 * np.abs(alpha) ** 2)
    return out


def husimi(rho: np.ndarray, system: System, phi: np.ndarray, n: np.ndarray,
           mu: str = "z", spin_label: str | None = None,
           coverage_tol: float = 1e-4) -> QGrid:
    """Conditional Husimi functions Q^{ab}_mu(phi, n) of a spin (x) cavity state.

    Q^{ab}(phi,n) = <a; alpha| rho |alpha; b> / (2 pi) with
    alpha = (phi + i n)/sqrt(2); x/y bases derive from the z-basis blocks.
    """
    if len(system.modes) != 2 or system.modes[0].kind != "spin_half":
        raise ValueError("husimi expects a spin (x) cavity system")
    nfock = system.modes[1].truncation_dim
    blocks = rho.reshape(2, nfock, 2, nfock)
    pp, nn = np.meshgrid(phi, n, indexing="ij")
    alpha = ((pp + 1j * nn) / np.sqrt(2)).reshape(-1)
    v = _coherent_vectors(alpha, nfock)
    qz = {}
    for a in (0, 1):
        for b in (0, 1):
            m = blocks[a, :, b, :]
            qz[(a, b)] = (np.einsum("np,nm,mp->p", v.conj(), m, v)
                          / (2 * np.pi)).reshape(len(phi), len(n))
    if mu == "z":
        vals = qz
    elif mu in ("x", "y"):
        part = np.real if mu == "x" else np.imag
        s = 0.5 * (qz[(0, 0)] + qz[(1, 1)])
        vals = {(0, 0): s - part(qz[(0, 1)]), (1, 1): s + part(qz[(0, 1)]),
                (0, 1): np.zeros_like(s), (1, 0): np.zeros_like(s)}
    else:
        raise ValueError("mu must be one of x, y, z")
    grid = QGrid(np.asarray(phi, float), np.asarray(n, float), mu, vals)
    cover = grid.total_probability()
    if cover < 1.0 - coverage_tol:
        raise ValueError(
            f"grid captures only {cover:.6f} of the probability; enlarge it")
    return grid


def mutual_information(q: QGrid) -> float:
    """Mutual information (bits) between the spin component and (phi, n).

    Uses the grid marginals for normalization and the 0 log 0 = 0 convention;
    the result lies in [0, 1].
    """
    area = q.cell_area()
    q00 = np.maximum(np.real(q.values[(0, 0)]), 0.0)
    q11 = np.maximum(np.real(q.values[(1, 1)]), 0.0)
    norm = (q00.sum() + q11.sum()) * area
    q00 = q00 / norm
    q11 = q11 / norm
    qtot = q00 + q11
    n0 = q00.sum() * area
    n1 = q11.sum() * area
    out = 0.0
    for qa, na in ((q00, n0), (q11, n1)):
        mask = (qa > 0) & (qtot > 0) & (na > 0)
        out += np.sum(qa[mask] * np.log2(qa[mask] / (qtot[mask] * na))) * area
    return float(max(out, 0.0))


# ---------------------------------------------------------------------------
# stiffness
# ---------------------------------------------------------------------------

def stiffness_report(exact: Trajectory, eqme: Trajectory) -> dict:
    """Step-size and wall-time comparison of two runs at equal tolerance."""
    report = {
        "exact": {"max_step_ns": exact.max_step(), "mean_step_ns": exact.mean_step(),
                  "n_steps": int(exact.accepted_steps.size)},
        "eqme": {"max_step_ns": eqme.max_step(), "mean_step_ns": eqme.mean_step(),
                 "n_steps": int(eqme.accepted_steps.size)},
        "timing": {"exact_wall_s": exact.wall_time, "eqme_wall_s": eqme.wall_time},
    }
    if exact.mean_step() > 0:
        report["mean_step_ratio"] = eqme.mean_step() / exact.mean_step()
    return report
