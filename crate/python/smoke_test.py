"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""

import math
import sys

import dsmp_py


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return cond


def main():
    results = []

    names = dsmp_py.Problem.catalog_names()
    results.append(check("lq-forward" in names, "catalog lists lq-forward"))

    # LQ optimum against the Riccati-style recursion a_t, c_t
    lq = dsmp_py.Problem.catalog("lq-forward")
    tree = lq.tree()
    a, c = 1.0, 0.0
    for _ in range(tree.horizon):
        c += a
        a = 1.0 + a / (1.0 + a)
    res = lq.optimize(tree)
    results.append(check(abs(res["cost"] - c) < 1e-8, f"optimizer cost {res['cost']:.12f} vs {c:.12f}"))
    mp = lq.check_mp(tree, res["control"])
    results.append(check(mp["passed"], f"MP certificate, residual {mp['max_violation']:.2e}"))

    # constant terminal value and linear generator: Y_0 = 1.1^T * 2
    beta = dsmp_py.Problem.catalog("linear-beta")
    t5 = beta.tree(horizon=5)
    y0 = beta.solve(t5)["y"][0][0][0]
    results.append(check(abs(y0 - 2 * 1.1**5) < 1e-12, f"linear-beta Y_0 = {y0}"))

    # binary trees leave no orthogonal martingale part
    bt = dsmp_py.Tree(4, "rademacher")
    leaves = [[math.sin(i)] for i in range(bt.level_size(4))]
    sol = dsmp_py.solve_bsde(bt, leaves, lambda t, node, y, z: [0.5 * math.tanh(y[0])])
    n_max = max(abs(v) for level in sol["n"] for node in level for v in node)
    results.append(check(sol["residual"] < 1e-12 and n_max < 1e-12, f"BSDE residual {sol['residual']:.1e}, |N| {n_max:.1e}"))

    mono = dsmp_py.Problem.catalog("linear-monotone")
    rep = mono.validate_monotone(mono.tree(), alpha=1.0)
    results.append(check(rep["passed"] and rep["alpha_estimate"] == 1.0, "monotone alpha = 1"))

    tanh = dsmp_py.Problem.catalog("tanh-smooth")
    tt = tanh.tree()
    lhs, rhs, gap = tanh.duality(tt, 1, [[1.0]] * tt.level_size(1))
    results.append(check(gap <= 1e-10 * (1 + abs(lhs)), f"duality gap {gap:.1e}"))

    try:
        dsmp_py.Problem.catalog("nope")
        results.append(check(False, "unknown catalog name raises"))
    except ValueError as e:
        results.append(check("lq-forward" in str(e), "unknown catalog name raises"))

    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
