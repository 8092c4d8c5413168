"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary.

Every test measures its own wall time against the budget of its criterion.
"""
import math
import time
import warnings

import numpy as np
import pytest

from helpers import low_frequency_problem, taylor_slope
from pdeinv import spectral
from pdeinv.fixtures import make_fixture, smooth_synthetic, sphere_bowl
from pdeinv.grid import Grid
from pdeinv.io import read_field, write_field, write_table
from pdeinv.optimizer import (CONVERGED, ObjectiveValue, OptimizationProblem, SolverOptions,
                              gauss_newton_solve)
from pdeinv.reaction_diffusion import (BrainMask, CrankNicolsonDiffusion, assemble_diffusion,
                                       cn_diffusion_halfstep, growth_field, simulate)
from pdeinv.registration import (RegistrationObjective, RegistrationOptions, RegistrationProblem,
                                 detgrad_report, linearize, reg_hessian_matvec_gn, run_registration)
from pdeinv.spectral import RegularizationConfig
from pdeinv.transport import detgrad_transport, solve_state
from pdeinv.tumor import (STUDY_COLUMNS, TumorInversionOptions, TumorOptimization, fixture_problem,
                          multifocal_tumor, noise_threshold_study, run_tumor_inversion)

STUDY_REALIZATIONS = 3


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.seconds, f"took {elapsed:.1f} s, budget {self.seconds} s"
        return elapsed


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.criterion(1, "spectral operators exact and adjoint at 1e-12 on 8^3-16^3")
def test_spectral_suite(record_property):
    budget = Budget(10)
    worst = 0.0
    for dims in [(8, 8, 8), (12, 16, 10), (16, 16, 16)]:
        grid = Grid(dims)
        x = grid.coords
        rng = np.random.default_rng(sum(dims))
        f = np.sin(x[0] + 2 * x[1]) * np.cos(3 * x[2])
        dfx = [np.cos(x[0] + 2 * x[1]) * np.cos(3 * x[2]),
               2 * np.cos(x[0] + 2 * x[1]) * np.cos(3 * x[2]),
               -3 * np.sin(x[0] + 2 * x[1]) * np.sin(3 * x[2])]
        errs = [rel(spectral.grad(f)[a], dfx[a]) for a in range(3)]
        v = np.stack([np.sin(x[1]) * np.cos(x[0]), np.cos(2 * x[2]), np.sin(x[0] - x[2])])
        divv = -np.sin(x[1]) * np.sin(x[0]) - np.cos(x[0] - x[2])
        errs.append(rel(spectral.div(v), divv))
        u = rng.standard_normal(grid.vector_shape)
        w = rng.standard_normal(grid.vector_shape)
        g = rng.standard_normal(dims)
        errs.append(abs(grid.inner(spectral.grad(g), u) + grid.inner(g, spectral.div(u)))
                    / (grid.norm(spectral.grad(g)) * grid.norm(u)))
        ku = spectral.leray_project(u)
        errs.append(grid.norm(spectral.div(ku)) / grid.norm(spectral.div(u)))
        errs.append(rel(spectral.leray_project(ku), ku))
        errs.append(abs(grid.inner(ku, w) - grid.inner(u, spectral.leray_project(w)))
                    / (grid.norm(u) * grid.norm(w)))
        for cfg in (RegularizationConfig("H1", beta=0.1), RegularizationConfig("H2", beta=1e-3),
                    RegularizationConfig("H1-div", beta=1e-2, div_penalty=1.0)):
            au = spectral.apply_full_regop(u, cfg)
            errs.append(rel(spectral.inv_full_regop(au, cfg), u))
            errs.append(abs(grid.inner(au, w) - grid.inner(u, spectral.apply_full_regop(w, cfg)))
                        / (grid.norm(au) * grid.norm(w)))
        mode = np.cos(x[0] - 2 * x[1] + x[2])
        cfg = RegularizationConfig("H2", gamma=1.0)
        errs.append(rel(spectral.apply_regop(mode, cfg), 49.0 * mode))
        worst = max(worst, max(errs))
    record_property("measured", f"worst relative defect {worst:.1e}")
    assert worst <= 1e-12
    budget.check()


@pytest.mark.criterion(2, "transport: zero velocity, constant advection, self-convergence, det grad")
def test_transport_suite(record_property):
    budget = Budget(120)
    grid = Grid((16, 16, 16))
    m = np.random.default_rng(0).standard_normal(grid.dims)
    zero_err = np.abs(solve_state(m, grid.zeros_vector(), 4)[-1] - m).max()

    grid = Grid((64, 64, 64))
    x = grid.coords
    c = np.array([0.7, -0.4, 0.25])
    v = np.stack([np.full(grid.dims, ci) for ci in c])
    m0 = np.sin(x[0]) * np.cos(2 * x[1]) + np.sin(x[2])
    exact = np.sin(x[0] - c[0]) * np.cos(2 * (x[1] - c[1])) + np.sin(x[2] - c[2])
    adv_err = np.abs(solve_state(m0, v, 4)[-1] - exact).max()

    g2 = Grid((128, 128))
    y = g2.coords
    w = np.stack([0.6 * np.sin(y[1]) + 0.3, 0.5 * np.cos(y[0])])
    f = np.sin(y[0]) * np.cos(y[1]) + 0.5 * np.sin(2 * y[1])
    sols = {n: solve_state(f, w, n)[-1] for n in (4, 8, 16)}
    ratio = np.abs(sols[4] - sols[8]).max() / np.abs(sols[8] - sols[16]).max()

    g3 = Grid((32, 32, 32))
    rng = np.random.default_rng(7)
    u = spectral.leray_project(spectral.gaussian_smooth(rng.standard_normal(g3.vector_shape), 3.0))
    u *= 0.5 / np.abs(u).max()
    psi_err = np.abs(detgrad_transport(u, 4) - 1.0).max()

    record_property("measured", f"zero {zero_err:.1e}, advection {adv_err:.1e}, ratio {ratio:.2f}, "
                                f"|psi-1| {psi_err:.1e}")
    assert zero_err <= 1e-14
    assert adv_err <= 1e-3
    assert 3.2 <= ratio <= 4.8
    assert psi_err <= 1e-3
    budget.check()


@pytest.mark.criterion(3, "registration Taylor order 2 +- 0.15 on 16^3; dense GN Hessian on 8^3 PSD, asymmetry <= 1e-3")
def test_registration_derivatives(record_property):
    budget = Budget(300)
    m_T, m_R, _, v, d = low_frequency_problem(16, seed=1)
    prob = RegistrationProblem(m_R, m_T, RegularizationConfig("H2", beta=1e-3))
    slope, _ = taylor_slope(prob, v, d)

    m_T, m_R, v_star, _, _ = low_frequency_problem(8, seed=1)
    prob = RegistrationProblem(m_R, m_T, RegularizationConfig("H2", beta=1e-3))
    _, lin = linearize(prob, v_star)
    n = v_star.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        H[:, i] = reg_hessian_matvec_gn(prob, lin, e.reshape(v_star.shape)).ravel()
    asym = np.linalg.norm(H - H.T) / np.linalg.norm(H)
    min_eig = np.linalg.eigvalsh(0.5 * (H + H.T)).min()
    record_property("measured", f"slope {slope:.3f}, asymmetry {asym:.1e}, min eigenvalue {min_eig:.2e}")
    assert abs(slope - 2.0) <= 0.15
    assert asym <= 1e-3
    assert min_eig >= 0
    budget.check()


@pytest.mark.criterion(4, "64^3 smooth synthetic registration: <= 15 GN iterations, mismatch down 2 orders, PCG counts nondecreasing")
def test_smooth_synthetic_registration(record_property):
    budget = Budget(1800)
    fx = smooth_synthetic(Grid((64, 64, 64)))
    prob = RegistrationProblem(fx["m_R"], fx["m_T"], RegularizationConfig("H2", beta=1e-4))
    res = run_registration(prob, RegistrationOptions(SolverOptions(rel_grad_tol=1e-5, max_krylov=500)))
    counts = res.log.pcg_counts
    record_property("measured", f"{res.log.iterations} iterations, {res.matvecs} matvecs, "
                                f"{res.pde_solves} PDE solves, PCG {counts}, "
                                f"relative mismatch {res.state.relative_mismatch:.2e}")
    assert res.converged
    assert res.log.iterations <= 15
    assert res.state.relative_mismatch <= 1e-2
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    budget.check()


@pytest.mark.criterion(5, "64^3 sphere to bowl: min det grad > 0, relative mismatch <= 0.15")
def test_sphere_to_bowl(record_property):
    budget = Budget(1800)
    fx = sphere_bowl(Grid((64, 64, 64)))
    prob = RegistrationProblem(fx["m_R"], fx["m_T"], RegularizationConfig("H2", beta=1e-3))
    res = run_registration(prob, RegistrationOptions(SolverOptions(rel_grad_tol=5e-2), continuation=True))
    report = detgrad_report(res.state.v)
    record_property("measured", f"relative mismatch {res.state.relative_mismatch:.3e}, "
                                f"det grad in [{report.min:.3f}, {report.max:.3f}]")
    assert report.min > 0
    assert res.state.relative_mismatch <= 0.15
    budget.check()


@pytest.mark.criterion(6, "tumor forward: Strang order in [1.7, 2.1], CN amplification within 1e-6, PCG tolerance 1e-6")
def test_tumor_forward(record_property):
    budget = Budget(120)
    grid = Grid((32, 32))
    y = grid.coords
    h = 0.1
    mode = np.cos(3 * y[0] - 2 * y[1])
    a = 0.25 * h * 0.3 * 13
    amp_err = np.abs(cn_diffusion_halfstep(mode, np.full(grid.dims, 0.3), h) - (1 - a) / (1 + a) * mode).max()

    grid = Grid((64, 64))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fx = multifocal_tumor(grid, 0)
    mask = BrainMask(fx["inside"] > 0.5)
    kappa = assemble_diffusion(fx["pi_W"], fx["pi_G"], 0.05, 0.01, mask)
    rho = growth_field(3.0, mask, grid.dims)
    x = grid.coords
    m0 = 0.5 * np.exp(-((x[0] - 2.8) ** 2 + (x[1] - 3.3) ** 2) / (2 * 0.3 ** 2))
    ref = simulate(m0, kappa, rho, 256)[-1]
    errs = [np.linalg.norm(simulate(m0, kappa, rho, n)[-1] - ref) for n in (8, 16, 32)]
    order = -np.polyfit(np.log([8, 16, 32]), np.log(errs), 1)[0]

    solver = CrankNicolsonDiffusion(kappa, 1.0 / 16)
    out = solver(m0)
    rhs = 2 * solver.a * solver.apply_L(m0)
    resid = np.linalg.norm((out - m0) - solver.a * solver.apply_L(out - m0) - rhs) / np.linalg.norm(rhs)
    record_property("measured", f"order {order:.3f}, amplification error {amp_err:.1e}, "
                                f"PCG relative residual {resid:.1e} (rtol {solver.rtol:g})")
    assert 1.7 <= order <= 2.1
    assert amp_err <= 1e-6
    assert solver.rtol == 1e-6 and resid <= 1e-6
    budget.check()


@pytest.mark.criterion(7, "tumor self-consistency on 64^2: relative coefficient error <= 1e-2")
def test_tumor_self_consistency(record_property):
    budget = Budget(300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fx = multifocal_tumor(Grid((64, 64)), 0)
    prob = fixture_problem(fx, fx["m_t1"], beta=1e-6, threshold=0.0)
    res = run_tumor_inversion(prob, TumorInversionOptions(SolverOptions(rel_grad_tol=1e-6)))
    err = np.linalg.norm(res.p - fx["p_true"]) / np.linalg.norm(fx["p_true"])
    record_property("measured", f"n_p {prob.basis.n_p}, error {err:.2e}, {res.log.iterations} iterations")
    assert prob.basis.n_p <= 8
    assert res.converged
    assert err <= 1e-2
    budget.check()


def nondecreasing(values):
    return all(b >= a for a, b in zip(values, values[1:]))


@pytest.mark.criterion(8, "noise/threshold study on 64^2: errors nondecreasing in noise and threshold, smallest at 1%/0.1")
def test_noise_threshold_study(record_property):
    budget = Budget(1200)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fx = multifocal_tumor(Grid((64, 64)), 0)
        rows = noise_threshold_study(fx, seed=0, realizations=STUDY_REALIZATIONS)
    thresholds = sorted({r.threshold for r in rows})
    noises = sorted({r.noise for r in rows})
    table = {(r.threshold, r.noise): r for r in rows}
    violations = []
    for col in ("err_t0", "err_t1", "err_t2"):
        for thr in thresholds:
            if not nondecreasing([getattr(table[thr, nz], col) for nz in noises]):
                violations.append(f"{col} vs noise at threshold {thr}")
        for nz in noises:
            if not nondecreasing([getattr(table[thr, nz], col) for thr in thresholds]):
                violations.append(f"{col} vs threshold at noise {nz}")
        smallest = min(rows, key=lambda r: getattr(r, col))
        if (smallest.threshold, smallest.noise) != (thresholds[0], noises[0]):
            violations.append(f"{col} smallest at {smallest.threshold}/{smallest.noise}")
    corner = table[thresholds[0], noises[0]]
    record_property("measured", f"1%/0.1 errors t0 {corner.err_t0:.2e} t1 {corner.err_t1:.2e} "
                                f"t2 {corner.err_t2:.2e}; violations: {violations or 'none'}")
    assert len(rows) == 12
    assert not violations
    budget.check()


class Quadratic(OptimizationProblem):
    def __init__(self, H, b):
        self.H, self.b, self.Hinv = H, b, np.linalg.inv(H)

    def evaluate_objective(self, w):
        val = 0.5 * w @ self.H @ w - self.b @ w
        return ObjectiveValue(val, val)

    def evaluate_gradient(self, w):
        return self.H @ w - self.b, None

    def hessian_matvec(self, lin, wt):
        return self.H @ wt

    def apply_preconditioner(self, r):
        return self.Hinv @ r


@pytest.mark.criterion(9, "optimizer: monotone objectives on every fixture, exact forcing sequence, quadratic in one step")
def test_optimizer_contracts(record_property):
    budget = Budget(60)
    logs = {}
    opts = SolverOptions(rel_grad_tol=1e-3, max_newton=10)
    reg = RegularizationConfig("H2", beta=1e-3)
    for name, dims in [("sphere_bowl", (16, 16, 16)), ("smooth_synthetic", (16, 16, 16)),
                       ("checker", (32, 32))]:
        fx = make_fixture(name, dims)
        prob = RegistrationProblem(fx["m_R"], fx["m_T"], reg)
        _, logs[name] = gauss_newton_solve(RegistrationObjective(prob), prob.grid.zeros_vector(), opts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fx = multifocal_tumor(Grid((32, 32)), 0)
    tprob = fixture_problem(fx, fx["m_t1"], fx["m_t0"], threshold=0.2, beta=1e-4)
    _, logs["multifocal_tumor"] = gauss_newton_solve(TumorOptimization(tprob), np.zeros(tprob.basis.n_p),
                                                     SolverOptions(rel_grad_tol=1e-6))
    for name, history in logs.items():
        obj = history.objectives
        assert history.iterations > 0, name
        assert all(b <= a for a, b in zip(obj, obj[1:])), name
        assert not any(r.negative_curvature for r in history.records), name
        g = history.grad_norms
        assert history.etas == [min(0.5, math.sqrt(gk / g[0])) for gk in g[:-1]], name

    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    H = q @ np.diag(np.geomspace(1, 100, 8)) @ q.T
    w, history = gauss_newton_solve(Quadratic(H, np.ones(8)), np.zeros(8), SolverOptions(rel_grad_tol=1e-10))
    record_property("measured", ", ".join(f"{k} {v.iterations} it" for k, v in logs.items())
                    + f"; quadratic {history.iterations} it, alpha {history.records[-1].alpha}")
    assert history.iterations == 1 and history.records[1].alpha == 1.0 and history.status in CONVERGED
    budget.check()


@pytest.mark.criterion(10, "I/O: bitwise round trip, hand-built 2x2x2 file, reproducible study CSV")
def test_io(tmp_path, record_property):
    budget = Budget(10)
    rng = np.random.default_rng(0)
    for shape in [(8, 6), (3, 4, 6, 8), (2, 16, 16)]:
        f = rng.standard_normal(shape)
        write_field(tmp_path / "f", f)
        assert read_field(tmp_path / "f").tobytes() == f.tobytes()

    (tmp_path / "h.hdr").write_text("PDEINV-FIELD 1\ndims 2 2 2\n"
                                    "spacing 3.141592653589793 3.141592653589793 3.141592653589793\n"
                                    "components 1\ndtype float64-le\n")
    values = [0.5, -1.0, 2.0, 3.25, 1e-3, 7.0, -8.5, 100.0]
    payload = bytes.fromhex("".join([
        "000000000000e03f", "000000000000f0bf", "0000000000000040", "0000000000000a40",
        "fca9f1d24d62503f", "0000000000001c40", "00000000000021c0", "0000000000005940"]))
    (tmp_path / "h.raw").write_bytes(payload)
    h = read_field(tmp_path / "h")
    # first index fastest: value number i + 2 j + 4 k sits at [i, j, k]
    assert all(h[i, j, k] == values[i + 2 * j + 4 * k] for i in range(2) for j in range(2) for k in range(2))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fx = multifocal_tumor(Grid((32, 32)), 0)
    opts = TumorInversionOptions(SolverOptions(rel_grad_tol=1e-2))
    csvs = []
    for run in range(2):
        rows = noise_threshold_study(fx, (0.05,), (0.2,), seed=11, opts=opts)
        write_table(tmp_path / f"study{run}.csv", STUDY_COLUMNS, rows)
        csvs.append((tmp_path / f"study{run}.csv").read_bytes())
    record_property("measured", f"study CSV {len(csvs[0])} bytes, identical {csvs[0] == csvs[1]}")
    assert csvs[0] == csvs[1]
    budget.check()
