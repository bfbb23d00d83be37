#!/usr/bin/env python3
"""Smoke test for the qpower_py extension module.

Builds are produced by `cargo build -p qpower-py` (or `--release`); this
script locates the compiled cdylib under target/, stages it as an importable
module and exercises the bound surface end to end.
"""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def stage_module() -> str:
    candidates = [
        os.path.join(ROOT, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libqpower_py.so", "qpower_py.so", "libqpower_py.dylib")
    ]
    built = next((c for c in candidates if os.path.exists(c)), None)
    if built is None:
        sys.exit("build the module first: cargo build -p qpower-py")
    stage = tempfile.mkdtemp(prefix="qpower-py-")
    shutil.copy(built, os.path.join(stage, "qpower_py.so"))
    return stage


sys.path.insert(0, stage_module())
import qpower_py as qp  # noqa: E402

failures = []


def check(name: str, ok: bool, detail: str = "") -> None:
    print(f"[smoke] {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    if not ok:
        failures.append(name)


# --- Q-functions and divergences -------------------------------------------
q0 = qp.QFunction.from_json(json.dumps({
    "actions": [1, 2, 3],
    "points": [
        {"x": [0.0], "weight": 0.4, "q": {"1": 0.8, "2": 2.1, "3": 1.2}},
        {"x": [1.0], "weight": 0.6, "q": {"1": 2.5, "2": 0.6, "3": 1.0}},
    ],
}))
check("round trip preserves the q-file", qp.QFunction.from_json(q0.to_json()).to_json() == q0.to_json())
check("greedy argmax", q0.greedy([0.0]) == 2 and q0.greedy([1.0]) == 1)

scaled = q0.scaled_by([3.0, 0.25])
check("gamma divergence vanishes on the equivalence class",
      qp.gamma_divergence(q0, scaled, -1.5) <= 1e-10)
check("policy equivalence detected", qp.policy_equivalent(q0, scaled))
check("beta divergence separates the same pair",
      qp.beta_divergence(q0, scaled, -1.5) > 1e-6)
check("eKL and nKL are nonnegative",
      qp.ekl_divergence(q0, scaled) >= 0.0 and qp.nkl_divergence(q0, scaled) == 0.0)

lhs, rhs = qp.harmonic_identity_check(q0)
check("harmonic identity", abs(lhs - rhs) <= 1e-12 * abs(lhs), f"({lhs:.6f} vs {rhs:.6f})")

q1 = qp.QFunction.from_json(json.dumps({
    "actions": [1, 2, 3],
    "points": [
        {"x": [0.0], "weight": 0.4, "q": {"1": 2.0, "2": 0.5, "3": 0.9}},
        {"x": [1.0], "weight": 0.6, "q": {"1": 0.3, "2": 1.8, "3": 0.7}},
    ],
}))
rows = qp.value_gap_limit(q0, q1, [10.0, 200.0])
gap = rows[0][2]
check("value-gap limit tightens",
      abs(rows[1][1] - gap) <= abs(rows[0][1] - gap) and abs(rows[1][1] - gap) < 1e-3,
      f"(gap={gap:.4f}, gamma*D at 200 = {rows[1][1]:.4f})")

# --- Fitting on simulated records -------------------------------------------
x, a, y, p = qp.simulate_dataset("correct", 4000, seed=11)
fit = qp.fit_gamma_mde([[v] for v in x], a, y, p, gamma=-1.5, seed=11)
check("gamma fit converges", fit.converged, f"psi_hat={fit.psi_hat}")
# Internal layout [psi0, psi1]; truth (psi1, psi0) = (2, -1).
check("gamma fit near the truth",
      abs(fit.psi_hat[1] - 2.0) < 0.3 and abs(fit.psi_hat[0] + 1.0) < 0.4,
      f"psi_hat={fit.psi_hat}")
se = [math.sqrt(fit.covariance[k][k]) for k in range(2)]
check("sandwich covariance is finite and positive", all(s > 0 and math.isfinite(s) for s in se))

mlfit = qp.fit_ml([[v] for v in x], a, y, p, seed=11)
check("ml fit converges near the truth",
      mlfit.converged and abs(mlfit.psi_hat[1] - 2.0) < 0.2, f"psi_hat={mlfit.psi_hat}")

# --- Replication harness -----------------------------------------------------
r1 = qp.run_replications("correct", n=150, reps=4, seed=7, methods=["gamma"])
r2 = qp.run_replications("correct", n=150, reps=4, seed=7, methods=["gamma"])
check("replication harness is deterministic", r1 == r2)
report = json.loads(r1)[0]
check("report carries mean/rmse/failures",
      {"mean", "rmse", "failures"} <= set(report.keys()),
      f"mean={report['mean']}")

print()
if failures:
    sys.exit(f"{len(failures)} smoke checks failed: {failures}")
print(f"all smoke checks passed")
