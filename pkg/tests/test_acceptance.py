"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a one-line verdict; the lines are printed together at the
end of the pytest session (see ``conftest.py``).  Run alone with
``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from tsengep.cli import compute_reference, main
from tsengep.fbf_solver import (
    ErrorSchedule,
    IterateState,
    SolverConfig,
    StopRule,
    run,
    step_ogda_direct,
    step_tseng_ep,
    validate_stepsize,
)
from tsengep.imaging import (
    DeblurConfig,
    assemble_deblur,
    cross_norm,
    discrete_gradient,
    gaussian_blur,
    gradient_adjoint,
    gradient_operator,
    synthetic_phantom,
    tv_iso,
)
from tsengep.metric_algebra import MetricOperator, MetricSchedule, scalar_rule
from tsengep.operators import (
    LinearMap,
    LipschitzMap,
    abs_value,
    box01,
    l1_translated,
    power_iteration_norm,
    project_tv_dual_ball,
    prox_box01,
    prox_l1_conj,
    prox_l1_translated,
    resolvent_of_inverse,
    tv_dual_ball,
)
from tsengep.primal_dual import (
    Block,
    PrimalDualProblem,
    build_product_inclusion,
    initial_state,
    lipschitz_aggregate,
    run_blocks,
    step_blocks,
)
from tsengep.toys import bilinear, l1quad

RESULTS: dict[int, str] = {}


def record(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[k] = line
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------


def test_c01_analytic_constants():
    setup = assemble_deblur(synthetic_phantom(16), DeblurConfig())
    beta = setup.beta
    g_free = setup.gamma
    g_err = assemble_deblur(synthetic_phantom(16), DeblurConfig(gamma_rule="with_error")).gamma
    # 0.006 + 3.0 rounds to the double just above the literal 3.006
    ok = (abs(beta - 3.006) <= math.ulp(3.006)
          and abs(g_free - 1 / 6.112) <= 1e-12
          and abs(g_err - 1 / (math.sqrt(10) * (3.006 + 1))) <= 1e-12)
    record(1, ok, f"beta={beta!r} gamma_free={g_free:.15f} gamma_err={g_err:.15f}")


# 2 -------------------------------------------------------------------------


def test_c02_stepsize_gate():
    setup = assemble_deblur(synthetic_phantom(16), DeblurConfig())
    cfg = SolverConfig(gamma=1 / (2 * setup.beta + 0.1))
    free = validate_stepsize(cfg, setup.beta, setup.mu, error_free=True)
    err = validate_stepsize(cfg, setup.beta, setup.mu, error_free=False)
    record(2, free.ok and not err.ok, f"error-free: {free.message}; with-error: {err.message}")


# 3 -------------------------------------------------------------------------


def ogda_mismatches(toy, steps=100, gamma=0.3):
    cfg = SolverConfig(gamma=gamma)
    state = step_tseng_ep(toy.problem, IterateState(toy.x0, toy.x0.copy()), cfg)
    p_prev, p = toy.x0.copy(), state.p_prev
    bad = int(not np.array_equal(p, step_ogda_direct(toy.problem, toy.x0, toy.x0, gamma)))
    for _ in range(steps - 1):
        state = step_tseng_ep(toy.problem, state, cfg)
        p_prev, p = p, step_ogda_direct(toy.problem, p, p_prev, gamma)
        bad += int(not np.array_equal(state.p_prev, p))
    return bad


def test_c03_ogda_equivalence():
    bad = {t.name: ogda_mismatches(t) for t in (l1quad(), bilinear())}
    record(3, sum(bad.values()) == 0, f"non-identical iterates out of 100: {bad}")


# 4 -------------------------------------------------------------------------


def two_block_problem(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 17))
    k1, k2 = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    L1 = LinearMap.from_matrix(rng.standard_normal((k1, n)))
    L2 = LinearMap.from_matrix(rng.standard_normal((k2, n)))
    Q = rng.standard_normal((n, n))
    blocks = [
        Block.from_function(L1, l1_translated(rng.standard_normal(k1)), r=rng.standard_normal(k1),
                            metric_schedule=scalar_rule("one-minus-inv-k2")),
        Block.from_conjugate(L2, box01(), metric_schedule=MetricSchedule.constant(
            MetricOperator.diagonal(rng.uniform(0.5, 1.0, k2)))),
    ]
    return PrimalDualProblem.minimization(abs_value(), LipschitzMap.from_matrix(Q @ Q.T / n + Q - Q.T), blocks,
                                          (n,), z=rng.standard_normal(n), metric_schedule=scalar_rule("k-over-k1"))


def test_c04_product_reduction():
    t0 = time.perf_counter()
    worst, dims = 0.0, []
    for seed in range(5):
        prob = two_block_problem(seed)
        product = build_product_inclusion(prob)
        dims.append(product.dim)
        rng = np.random.default_rng(seed)
        cfg = SolverConfig(gamma=0.25 / lipschitz_aggregate(prob), metric_schedule=product.metric_schedule)
        state = initial_state(prob, rng.random(prob.shape), [rng.standard_normal(b.shape) for b in prob.blocks])
        flat = IterateState(*product.pack_state(state))
        for _ in range(100):
            state = step_blocks(prob, state, cfg)
            flat = step_tseng_ep(product, flat, cfg)
            ref = flat.x
            gap = np.abs(product.pack(state.x, state.v) - ref).max() / max(1.0, np.abs(ref).max())
            worst = max(worst, float(gap))
    elapsed = time.perf_counter() - t0
    record(4, worst <= 1e-13 and max(dims) <= 32 and elapsed < 5,
           f"max relative gap {worst:.3g} over dims {dims}, {elapsed:.2f}s")


# 5 -------------------------------------------------------------------------


def test_c05_known_zeros():
    t0 = time.perf_counter()
    inv_k2 = ErrorSchedule.from_sequence(lambda k: 1.0 / k ** 2, math.pi ** 2 / 6, "inv_k2")
    out = {}
    for toy in (bilinear(), l1quad()):
        clean = run(toy.problem, SolverConfig(gamma=0.3, max_iters=5000,
                                              stop_rule=StopRule("dist_to_ref", 1e-6, toy.solution)), toy.x0)
        gamma = 1 / (math.sqrt(10) * (toy.problem.beta + 1))
        noisy = run(toy.problem, SolverConfig(gamma=gamma, errors=inv_k2, max_iters=5000), toy.x0)
        out[toy.name] = (float(np.linalg.norm(clean.solution - toy.solution)), clean.iterations,
                         float(np.linalg.norm(noisy.solution - toy.solution)))
    elapsed = time.perf_counter() - t0
    ok = all(c < 1e-6 and e < 1e-5 for c, _, e in out.values()) and elapsed < 5
    detail = "; ".join(f"{k}: clean {c:.2e} after {n} it, with errors {e:.2e}" for k, (c, n, e) in out.items())
    record(5, ok, f"{detail}; {elapsed:.2f}s")


# 6 -------------------------------------------------------------------------


def test_c06_summable_residuals():
    setup = assemble_deblur(synthetic_phantom(32), DeblurConfig(noise_seed=1))
    res = run_blocks(setup.problem, setup.solver_config(10000), setup.initial_state())
    xp = np.array([t.residual for t in res.trace]) ** 2
    yq = np.array([t.yq_residual for t in res.trace]) ** 2
    # last decade on the logarithmic scale: iterations 10^3 .. 10^4
    r_xp, r_yq = xp[1000:].sum() / xp.sum(), yq[1000:].sum() / yq.sum()
    record(6, len(xp) == 10000 and r_xp < 0.05 and r_yq < 0.05,
           f"last-decade share: ||x-p||^2 {r_xp:.2e}, ||y-q||^2 {r_yq:.2e}")


# 7 -------------------------------------------------------------------------


def test_c07_quasi_fejer():
    out = {}
    for toy in (bilinear(), l1quad()):
        for U in (MetricOperator.identity(), MetricOperator.scalar(0.7)):
            xs = [toy.x0]
            cfg = SolverConfig(gamma=0.3, metric_schedule=MetricSchedule.constant(U), max_iters=3000)
            run(toy.problem, cfg, toy.x0, callback=lambda n, s: xs.append(s.x))
            d = [float(np.vdot(x - toy.solution, U.apply_inverse(x - toy.solution))) for x in xs]
            out[f"{toy.name}/U={U.data}"] = float(np.maximum(0.0, np.diff(d)).sum())
    record(7, max(out.values()) < 1e-6, f"sum of increases {out}")


# 8 -------------------------------------------------------------------------


def test_c08_operator_certifications():
    rng = np.random.default_rng(0)
    adj = 0.0
    for shape in ((8, 8), (16, 16), (5, 11)):
        A, L = gaussian_blur(shape, 9, 4.0), gradient_operator(shape)
        for _ in range(100):
            x, y, w = rng.standard_normal(shape), rng.standard_normal(shape), rng.standard_normal((2,) + shape)
            adj = max(adj, abs(np.vdot(A(x), y) - np.vdot(x, A.T(y))),
                      abs(np.vdot(discrete_gradient(x), w) - np.vdot(x, gradient_adjoint(w))))
    norms = {n: power_iteration_norm(gradient_operator((n, n)), iters=1000) ** 2 for n in (4, 16, 64)}
    tv = max(abs(tv_iso(x) - cross_norm(discrete_gradient(x))) for x in rng.random((100, 8, 8)))

    grid = np.linspace(-10, 10, 200001)
    h = grid[1] - grid[0]

    def brute(f, x, gamma, g=grid):
        return g[np.argmin(f(g) + (g - x) ** 2 / (2 * gamma))]

    prox_err = 0.0
    for x, gamma, b in [(2.5, 1.0, 0.0), (-0.5, 1.0, 0.0), (0.3, 0.7, 1.2), (-4.0, 2.0, -1.0)]:
        prox_err = max(prox_err, abs(prox_l1_translated([x], gamma, [b])[0] - brute(lambda t: np.abs(t - b), x, gamma)) / h)
        unit = np.linspace(-1, 1, 200001)
        prox_err = max(prox_err, abs(prox_l1_conj([x], gamma, [b])[0] - brute(lambda t: t * b, x, gamma, unit)) / (unit[1] - unit[0]))
        box = np.linspace(0, 1, 100001)
        prox_err = max(prox_err, abs(prox_box01([x])[0] - brute(lambda t: 0 * t, x, gamma, box)) / (box[1] - box[0]))
    t = np.linspace(-1, 1, 801)
    P, Q = np.meshgrid(t, t, indexing="ij")
    for pt in [(3.0, 4.0), (0.2, 0.1), (-0.8, 0.9)]:
        d = np.where(P ** 2 + Q ** 2 <= 1, (P - pt[0]) ** 2 + (Q - pt[1]) ** 2, np.inf)
        got = project_tv_dual_ball(np.array(pt).reshape(2, 1, 1), 1.0).ravel()
        # on a disc the grid argmin is ill-placed, so compare feasibility and objective value
        feasible = np.hypot(*got) <= 1 + 1e-12
        gap = np.hypot(*(got - pt)) - np.sqrt(d.min())
        prox_err = max(prox_err, 0.0 if feasible and gap <= 1e-12 else np.inf)

    moreau = 0.0
    for g in (abs_value(), l1_translated(rng.standard_normal(6))):
        for _ in range(100):
            x, gamma = 3 * rng.standard_normal(6), rng.uniform(0.05, 5)
            moreau = max(moreau, float(np.abs(g.prox(gamma, x) + gamma * resolvent_of_inverse(g, 1 / gamma, x / gamma) - x).max()))
    for _ in range(100):
        f, gamma = rng.standard_normal((2, 4, 4)), rng.uniform(0.1, 3)
        dual = tv_dual_ball(0.3)
        # the conjugate of the dual-ball indicator is 0.3 * (sum of pixel magnitudes); its prox is a group shrink
        u = f / gamma
        mag = np.sqrt(u[0] ** 2 + u[1] ** 2)
        shrink = u * np.maximum(0.0, 1 - (0.3 / gamma) / np.maximum(mag, 1e-300))
        moreau = max(moreau, float(np.abs(dual.prox(gamma, f) + gamma * shrink - f).max()))

    ok = adj <= 1e-10 and max(norms.values()) <= 8 + 1e-9 and tv <= 1e-12 and prox_err <= 1.0 and moreau <= 1e-10
    record(8, ok, f"adjoint {adj:.1e}; ||L||^2 {', '.join(f'{k}:{v:.9f}' for k, v in norms.items())}; "
                  f"tv {tv:.1e}; prox/grid {prox_err:.2f} cells; Moreau {moreau:.1e}")


# 9 -------------------------------------------------------------------------


def test_c09_deblur_smoke():
    t0 = time.perf_counter()
    setup = assemble_deblur(synthetic_phantom(64), DeblurConfig(noise_seed=0))
    res = run_blocks(setup.problem, setup.solver_config(1000), setup.initial_state())
    isnr = setup.isnr(res.solution)
    f_final, f_obs = setup.objective(res.solution), setup.objective(setup.observed)
    elapsed = time.perf_counter() - t0
    record(9, isnr > 0 and f_final < f_obs and elapsed < 60,
           f"ISNR {isnr:.3f} dB, objective {f_final:.4f} < observed {f_obs:.4f}, {elapsed:.1f}s")


# 10 ------------------------------------------------------------------------


SIGMA_RULES = ("const:1.001", "one-minus-inv-k", "one-minus-inv-k2", "one-minus-inv-k5", "one-minus-inv-kk",
               "k-over-k1")


def test_c10_metric_sweeps(tmp_path_factory):
    t0 = time.perf_counter()
    original = synthetic_phantom(32)
    base = DeblurConfig(noise_seed=1)
    npy, meta = compute_reference(original, base, 10000, tmp_path_factory.mktemp("cache"))
    f_ref = meta["fval"]

    def iterations(cfg, budget):
        setup = assemble_deblur(original, cfg)
        stop = StopRule("fval_gap", 1e-2, f_ref)
        res = run_blocks(setup.problem, setup.solver_config(budget, stop_rule=stop), setup.initial_state(),
                         objective=setup.fval)
        return res.iterations if res.reason.value == "fval_gap" else None

    baseline = iterations(base, 10000)
    counts = {rule: iterations(base.with_(sigma1=rule, sigma2=rule), 2 * baseline) for rule in SIGMA_RULES}
    elapsed = time.perf_counter() - t0
    ok = baseline is not None and all(c is not None for c in counts.values()) and elapsed < 600
    record(10, ok, f"baseline {baseline} it; " + ", ".join(f"{k}: {v}" for k, v in counts.items())
           + f"; {elapsed:.0f}s")


# 11 ------------------------------------------------------------------------


def test_c11_determinism(tmp_path, capsys):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        args = ["deblur", "--image", "synthetic:32", "--seed", "7", "--out", str(out), "--max-iters", "200",
                "--sigma2", "one-minus-inv-k"]
        assert main(args) == 0
        assert main(["toy", "bilinear", "--out", str(out), "--max-iters", "300"]) == 0
        outs.append(out)
    capsys.readouterr()
    names = ("trace.csv", "reconstructed.pgm", "observed.pgm", "toy-bilinear.csv")
    same = {n: (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names}
    record(11, all(same.values()), f"byte-identical: {same}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
