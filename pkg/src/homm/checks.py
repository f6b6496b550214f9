"""Self-checks run by ``homm check``.

Loss functions are looked up on their modules at call time, so a patched
(deliberately broken) implementation is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from homm import discrepancy as D
from homm import moments as M
from homm import network as N


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_rel_err={self.max_error:.3e}  {self.detail}"


def rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def random_pairs(n: int, seed: int, b_range=(2, 64), L_range=(2, 16)):
    """``n`` random (source, target) batches with equal sizes, entries in (-1, 1)."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        b = int(rng.integers(b_range[0], b_range[1] + 1))
        L = int(rng.integers(L_range[0], L_range[1] + 1))
        yield rng.uniform(-1, 1, (b, L)), rng.uniform(-1, 1, (b, L))


def direct_kernel_mmd(X, Y, gamma: float, exponent: int = 2) -> float:
    """Pairwise-loop kernel MMD, written independently of the library kernels."""
    def k(x, y):
        return np.exp(-gamma * np.sqrt(np.sum((x - y) ** 2)) ** exponent)

    kxx = sum(k(x, x2) for x in X for x2 in X) / len(X) ** 2
    kyy = sum(k(y, y2) for y in Y for y2 in Y) / len(Y) ** 2
    kxy = sum(k(x, y) for x in X for y in Y) / (len(X) * len(Y))
    return max(kxx - 2 * kxy + kyy, 0.0)


def check_linear_mmd(n=100, seed=0, tol=1e-12) -> CheckResult:
    errs = [rel_err(D.homm_full(s, t, 1), D.linear_mmd(s, t)) for s, t in random_pairs(n, seed)]
    worst = max(errs)
    return CheckResult("A: p=1 == linear MMD", worst <= tol, worst, f"{n} pairs")


def check_gram(n=100, seed=1, tol=1e-12) -> CheckResult:
    errs = [rel_err(D.homm_full(s, t, 2), D.gram_loss(s, t)) for s, t in random_pairs(n, seed)]
    worst = max(errs)
    return CheckResult("B: p=2 == Gram matching", worst <= tol, worst, f"{n} pairs")


def check_sampled_exhaustive(n=100, seed=2, tol=1e-12, max_p=3) -> CheckResult:
    errs = []
    rng = np.random.default_rng(seed + 1000)
    for s, t in random_pairs(n, seed):
        p = int(rng.integers(1, max_p + 1))
        idx = M.exhaustive_indices(s.shape[1], p)
        errs.append(rel_err(D.homm_sampled(s, t, idx), D.homm_full(s, t, p)))
    worst = max(errs)
    return CheckResult("C: exhaustive sampled == full", worst <= tol, worst, f"{n} pairs")


def check_kernel_mmd(n=100, seed=3, tol=1e-12) -> CheckResult:
    errs = []
    rng = np.random.default_rng(seed + 1000)
    for s, t in random_pairs(n, seed, b_range=(2, 24)):
        kernel = D.KernelConfig(gamma=float(rng.uniform(0.05, 2.0)))
        idx = M.exhaustive_indices(s.shape[1], 1)
        errs.append(rel_err(D.khomm(s, t, idx, kernel),
                            direct_kernel_mmd(s, t, kernel.gamma, kernel.exponent)))
    worst = max(errs)
    return CheckResult("D: kernelized p=1 == KMMD", worst <= tol, worst, f"{n} pairs")


def monte_carlo_study(b=32, L=16, p=3, Ns=(100, 1000, 10000), n_seeds=20, data_seed=0):
    """Mean and standard error of the sampled estimate for each ``N``."""
    rng = np.random.default_rng(data_seed)
    s, t = rng.uniform(-1, 1, (b, L)), rng.uniform(-1, 1, (b, L))
    exact = D.homm_full(s, t, p)
    rows = []
    for N_ in Ns:
        vals = np.array([D.homm_sampled(s, t, M.sample_indices(L, p, N_, seed))
                         for seed in range(n_seeds)])
        rows.append((N_, vals.mean(), vals.std(ddof=1) / np.sqrt(n_seeds)))
    return exact, rows


def check_monte_carlo() -> CheckResult:
    exact, rows = monte_carlo_study()
    errors = [abs(mean - exact) for _, mean, _ in rows]
    monotone = all(a > b for a, b in zip(errors, errors[1:]))
    _, mean, se = rows[-1]
    within = abs(mean - exact) <= 3 * se
    detail = " ".join(f"N={n_}:err={e:.2e}" for (n_, _, _), e in zip(rows, errors))
    return CheckResult("Monte-Carlo consistency", monotone and within,
                       errors[-1] / exact, detail + f" se={se:.2e}")


def tiny_problem(seed=0):
    """A d=4, L=8, c=3, b=4 network with batches, centers and pseudo-labels."""
    rng = np.random.default_rng(seed)
    net = N.init_network([4, 6, 8, 3], seed=seed)
    xs = rng.normal(size=(4, 4))
    xt = rng.normal(size=(4, 4)) + 0.5
    ys = rng.integers(0, 3, size=4)
    centers = D.ClassCenters(rng.uniform(-0.5, 0.5, (3, 8)))
    assignment = D.PseudoLabelAssignment(np.array([0, 2, 3]), np.array([1, 0, 1]),
                                         np.array([0.9, 0.9, 0.9]))
    return net, xs, ys, xt, centers, assignment


def gradient_objectives(centers, assignment, L=8, seed=0):
    idx = M.sample_indices(L, 3, 100, seed)
    kern = D.KernelConfig(gamma=1.0)
    off = dict(source_weight=0.0)
    return {
        "L_s": N.Objective(),
        "L_d full p=3": N.Objective(variant="full", lambda_d=100.0, p=3, **off),
        "L_d group p=3": N.Objective(variant="group", lambda_d=100.0, p=3, n_groups=2, **off),
        "L_d sampled p=3": N.Objective(variant="sampled", lambda_d=100.0, p=3, idx=idx, **off),
        "L_d kernelized p=3": N.Objective(variant="kernelized", lambda_d=100.0, p=3, idx=idx,
                                          kernel=kern, **off),
        "L_d mmd": N.Objective(variant="mmd", lambda_d=1.0, **off),
        "L_d gram": N.Objective(variant="gram", lambda_d=1.0, **off),
        "L_d coral": N.Objective(variant="coral", lambda_d=1.0, **off),
        "L_dc": N.Objective(lambda_dc=1.0, centers=centers, assignment=assignment, **off),
        "L_ent": N.Objective(entropy_weight=1.0, **off),
        "composite": N.Objective(variant="full", lambda_d=100.0, p=3, lambda_dc=0.3,
                                 centers=centers, assignment=assignment, entropy_weight=0.5),
    }


def gradient_reports(step=1e-5, tol=1e-4, seed=0):
    net, xs, ys, xt, centers, assignment = tiny_problem(seed)
    out = {}
    for name, obj in gradient_objectives(centers, assignment, seed=seed).items():
        _, grads = N.backward(net, xs, ys, xt, obj)

        def closure(params, obj=obj):
            return N.objective_value(net.with_params(params), xs, ys, xt, obj).total

        out[name] = N.finite_diff_check(net.params(), closure, grads, step, tol)
    return out


def check_gradients(step=1e-5, tol=1e-4) -> CheckResult:
    reports = gradient_reports(step, tol)
    worst = max(r.max_error for r in reports.values())
    bad = [k for k, r in reports.items() if not r.passed]
    return CheckResult("finite-difference gradients", not bad, worst,
                       f"{len(reports)} objectives" + (f"; failing: {', '.join(bad)}" if bad else ""))


ALL_CHECKS = (check_linear_mmd, check_gram, check_sampled_exhaustive, check_kernel_mmd,
              check_monte_carlo, check_gradients)


def run_all() -> list[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        try:
            results.append(fn())
        except Exception as exc:  # report, never throw
            results.append(CheckResult(fn.__name__, False, float("nan"), f"error: {exc!r}"))
    return results
