import warnings

import numpy as np
import pytest

from tcgme.algebra import (
    BOSON, LOWER, RAISE, SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z, SPIN_HALF,
    Algebra, ModeSpec, OperatorMonomial, System,
)
from tcgme.eqme import (
    DISSIPATOR, HAMILTONIAN, BudgetError, EffectiveMasterEquation,
    FourierHamiltonian, FourierTerm, build, lumped_spectrum, prune,
    to_sandwiches,
)
from tcgme.window import WindowFunction

WA = 2 * np.pi * 5.0
WD = 2 * np.pi * 7.0
G = 2 * np.pi * 0.048
ED = 0.0121
DLT = WD - WA
SM = WD + WA

SP = ("s", SIGMA_PLUS)
SMI = ("s", SIGMA_MINUS)
SZ = ("s", SIGMA_Z)
CR = ("c", RAISE)
CL = ("c", LOWER)


def spin_cavity_H(wc=WD, fock=12):
    system = System([ModeSpec("s", SPIN_HALF), ModeSpec("c", BOSON, truncation_dim=fock)])
    terms = [
        FourierTerm(0.0, OperatorMonomial(ED, [CL])),
        FourierTerm(-2 * WD, OperatorMonomial(ED, [CL])),
        FourierTerm(0.0, OperatorMonomial(ED, [CR])),
        FourierTerm(2 * WD, OperatorMonomial(ED, [CR])),
        FourierTerm(0.0, OperatorMonomial(wc - WD, [CR, CL])),
        FourierTerm(DLT, OperatorMonomial(G, [CR, SMI])),
        FourierTerm(-DLT, OperatorMonomial(G, [CL, SP])),
        FourierTerm(SM, OperatorMonomial(G, [CR, SP])),
        FourierTerm(-SM, OperatorMonomial(G, [CL, SMI])),
    ]
    return FourierHamiltonian(system, terms)


@pytest.fixture(scope="module")
def eqme4():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build(spin_cavity_H(), WindowFunction(tau=3.0), 4, mode="ir_limit")


def coef_of(eq, kind, left, right, order, omega=0.0):
    total = 0.0
    for t in eq.terms:
        if (t.kind == kind and t.order == order and t.left.factors == tuple(left)
                and (t.right.factors == tuple(right) if right is not None
                     else t.right is None)
                and abs(t.omega - omega) < 1e-6):
            total += t.coef
    return total


def test_empty_hamiltonian():
    system = System([ModeSpec("c", BOSON, truncation_dim=4)])
    eq = build(FourierHamiltonian(system, []), WindowFunction(tau=1.0), 3)
    assert eq.terms == []


def test_first_order_is_time_averaged_hamiltonian(eqme4):
    # drive terms at zero frequency survive with filter(0) = 1; the
    # transverse coupling and 2wd drive are filtered out
    assert np.isclose(coef_of(eqme4, HAMILTONIAN, [CL], None, 1), ED)
    assert np.isclose(coef_of(eqme4, HAMILTONIAN, [CR], None, 1), ED)
    others = [t for t in eqme4.terms if t.order == 1 and abs(t.omega) > 1e-6]
    assert not others


def test_second_order_dispersive_shift(eqme4):
    chi2 = -G * G * (1 / DLT - 1 / SM)
    got = coef_of(eqme4, HAMILTONIAN, [SZ, CR, CL], None, 2)
    assert np.isclose(got, chi2, rtol=1e-12)
    # sigma_z alone carries chi2/2
    got_z = coef_of(eqme4, HAMILTONIAN, [SZ], None, 2)
    assert np.isclose(got_z, chi2 / 2, rtol=1e-12)


def test_third_order_drive_induced_dissipators(eqme4):
    kdm = 1j * ED * G * G / DLT ** 2
    kdp = 1j * ED * G * G / SM ** 2
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SMI], [SP, CL], 3), kdm, rtol=1e-10)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SP, CL], [SMI], 3), kdm, rtol=1e-10)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SMI, CL], [SP], 3), kdp, rtol=1e-10)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SP], [SMI, CL], 3), kdp, rtol=1e-10)
    # h.c. partners: (L, R) -> (R^dag, L^dag) with conjugated coefficient
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SMI, CR], [SP], 3),
                      np.conj(kdm), rtol=1e-10)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SP, CR], [SMI], 3),
                      np.conj(kdp), rtol=1e-10)


def test_third_order_drive_shift(eqme4):
    lam2 = G * G * (1 / DLT ** 2 + 2 * WA / (WD * (WD ** 2 - WA ** 2)) - 1 / SM ** 2)
    got = coef_of(eqme4, HAMILTONIAN, [SZ, CL], None, 3)
    assert np.isclose(got, ED * lam2 / 2, rtol=1e-10)
    got2 = coef_of(eqme4, HAMILTONIAN, [SZ, CR], None, 3)
    assert np.isclose(got2, ED * lam2 / 2, rtol=1e-10)


def test_fourth_order_hamiltonian(eqme4):
    zeta = G ** 4 * (1 / DLT ** 3 - 2 * (3 * WA ** 2 + WD ** 2) / (SM ** 3 * DLT ** 2)
                     + 1 / SM ** 3)
    zetap = G ** 4 * (1 / DLT ** 3 - 2 * (WA ** 2 + WD ** 2) / (WD * SM ** 2 * DLT ** 2)
                      + 1 / SM ** 3)
    xi = G ** 2 * ED ** 2 / (WD * (WD ** 2 - WA ** 2))
    mu = -G ** 2 * ED ** 2 * WA * (3 * WD ** 2 - WA ** 2) / (WD ** 2 * (WD ** 2 - WA ** 2) ** 2)
    assert np.isclose(coef_of(eqme4, HAMILTONIAN, [SZ, CR, CR, CL, CL], None, 4),
                      zeta, rtol=1e-9)
    # zeta(n_c + 1/2) sigma_z and the normal-ordered zeta n_c^2 sigma_z both
    # land one zeta on sigma_z c^dag c
    assert np.isclose(coef_of(eqme4, HAMILTONIAN, [SZ, CR, CL], None, 4),
                      2 * zeta, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, HAMILTONIAN, [CR, CL], None, 4),
                      zetap - xi, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, HAMILTONIAN, [SZ], None, 4),
                      mu + zeta / 2, rtol=1e-9)


def test_fourth_order_dissipators(eqme4):
    ktp = 4j * G ** 4 * WA / (DLT * SM ** 3)
    ktm = 4j * G ** 4 * WA / (SM * DLT ** 3)
    gt = -1j * ED ** 2 * G ** 2 / (WD * (WD ** 2 - WA ** 2))
    gtz = 1j * ED ** 2 * G ** 2 * WA / (WD ** 2 * (WD ** 2 - WA ** 2))
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SMI, CR, CL, CL], [SP, CR], 4),
                      ktp, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SP, CR, CR, CL], [SMI, CL], 4),
                      -ktp, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SMI, CR, CR, CL], [SP, CL], 4),
                      ktm, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SP, CR, CL, CL], [SMI, CR], 4),
                      -ktm, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SMI, CR, CL], [SP], 4),
                      gt, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SP, CR, CL], [SMI], 4),
                      gt, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SZ, CL], [CR], 4),
                      gtz, rtol=1e-9)
    assert np.isclose(coef_of(eqme4, DISSIPATOR, [SZ, CR], [CL], 4),
                      -gtz, rtol=1e-9)


def test_near_resonant_second_order_dissipator():
    # D_{sigma+ c, sigma+ c} at finite tau: -2i g^2 e^{-D^2 t^2}(1-e^{-D^2 t^2})/D
    tau = 0.05
    w = WindowFunction(tau=tau)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eq = build(spin_cavity_H(), w, 2, mode="finite_tau")
    f = np.exp(-(DLT * tau) ** 2)
    expect = -2j * G * G * f * (1 - f) / DLT
    got = coef_of(eq, DISSIPATOR, [SP, CL], [SP, CL], 2, omega=-2 * DLT)
    assert np.isclose(got, expect, rtol=1e-10)


def test_hc_closure_and_hermiticity(eqme4):
    assert eqme4.check_hc_closure()
    alg = Algebra(eqme4.system)
    sw = to_sandwiches(eqme4, alg)
    rng = np.random.default_rng(0)
    dim = eqme4.system.total_dim
    # random Hermitian rho supported away from the Fock edge
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    keep = np.zeros(dim)
    fock = eqme4.system.mode("c").truncation_dim
    for i in range(dim):
        if (i % fock) < fock - 6:
            keep[i] = 1.0
    m = m * np.outer(keep, keep)
    rho = m @ m.conj().T
    rho /= np.trace(rho)
    out = sw.apply(rho, 0.0)
    assert np.linalg.norm(out - out.conj().T) < 1e-11 * max(np.linalg.norm(out), 1)
    assert abs(np.trace(out)) < 1e-11


def test_trace_annihilation_matrix(eqme4):
    sw = to_sandwiches(eqme4)
    m = sw.trace_vector()
    fock = eqme4.system.mode("c").truncation_dim
    dim = eqme4.system.total_dim
    # rows/cols that cannot reach the truncation edge under <= 4 ladder ops
    keep = [i for i in range(dim) if (i % fock) < fock - 5]
    sub = m[np.ix_(keep, keep)]
    assert np.max(np.abs(sub)) < 1e-12


def test_order_scaling(eqme4):
    lam = 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eq2 = build(spin_cavity_H().scaled(lam), WindowFunction(tau=3.0), 4,
                    mode="ir_limit")
    ref = {t.key(): t.coef for t in eqme4.terms}
    got = {t.key(): t.coef for t in eq2.terms}
    checked = 0
    for k, v in ref.items():
        order = k[-1]
        expect = v * lam ** order
        if abs(expect) < 1e-14:
            continue
        if k in got:
            assert np.isclose(got[k], expect, rtol=1e-9), k
            checked += 1
    assert checked > 10


def test_prune_identity_and_threshold(eqme4):
    same = prune(eqme4, threshold_abs=0.0)
    assert len(same.terms) == len(eqme4.terms)
    hard = prune(eqme4, threshold_abs=1e-5)
    assert len(hard.terms) < len(eqme4.terms)
    assert all(t.magnitude() >= 1e-5 for t in hard.terms)
    assert hard.prune_log
    assert hard.check_hc_closure()
    # trace annihilation survives pruning
    sw = to_sandwiches(hard)
    m = sw.trace_vector()
    fock = eqme4.system.mode("c").truncation_dim
    keep = [i for i in range(eqme4.system.total_dim) if (i % fock) < fock - 5]
    assert np.max(np.abs(m[np.ix_(keep, keep)])) < 1e-12


def test_lumped_spectrum_static_only(eqme4):
    spec = lumped_spectrum(eqme4)
    assert set(np.round(list(spec.keys()), 6)) == {0.0}


def test_lumped_spectrum_small_tau_bins():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eq = build(spin_cavity_H(), WindowFunction(tau=0.3), 3, mode="finite_tau",
                   coef_floor=1e-12)
        eq = prune(eq)
    spec = lumped_spectrum(eq)
    oms = np.array(sorted(spec))
    for target in (DLT, -DLT, 2 * DLT, -2 * DLT):
        assert np.any(np.abs(oms - target) < 1e-6), target
    # counter-rotating bins absent at tau = 0.3 ns
    for target in (SM, -SM):
        assert not np.any(np.abs(oms - target) < 1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eq2 = prune(build(spin_cavity_H(), WindowFunction(tau=0.012), 1,
                          mode="finite_tau"))
    spec2 = lumped_spectrum(eq2)
    oms2 = np.array(sorted(spec2))
    assert np.any(np.abs(oms2 - SM) < 1e-6)


def test_budget_guard():
    H = spin_cavity_H()
    with pytest.raises(BudgetError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            build(H, WindowFunction(tau=3.0), 4, tuple_budget=10)


def test_json_roundtrip(eqme4):
    import json
    doc = json.loads(eqme4.to_json())
    assert doc["terms"]
    t0 = doc["terms"][0]
    for key in ("order", "kind", "L", "Omega_rad_per_ns", "coef_re", "coef_im"):
        assert key in t0
    assert "D_{" in eqme4.pretty() or "H[" in eqme4.pretty()
