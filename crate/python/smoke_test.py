#!/usr/bin/env python3
"""Builds the native extension and exercises the exposed operations."""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_extension(work_dir: Path) -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "cate-forge-py"],
        cwd=REPO,
        check=True,
    )
    built = REPO / "target" / "debug" / "lib_cate_forge.so"
    if not built.exists():  # e.g. macOS
        built = REPO / "target" / "debug" / "lib_cate_forge.dylib"
    dest = work_dir / "_cate_forge.so"
    shutil.copyfile(built, dest)
    return dest


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        work_dir = Path(tmp)
        build_extension(work_dir)
        sys.path.insert(0, str(work_dir))
        import _cate_forge as cf

        # Projection: already-feasible points are fixed, infeasible ones land
        # on the simplex.
        q = cf.project_to_simplex([0.2, 0.3, 0.5])
        assert max(abs(a - b) for a, b in zip(q, [0.2, 0.3, 0.5])) < 1e-12, q
        q = cf.project_to_simplex([5.0, 0.0, 0.0])
        assert q == [1.0, 0.0, 0.0], q

        # Two synthetic site models tau1 = 0, tau2 = 2h on shared draws:
        # the minimax-regret ensemble is the midpoint.
        rows = []
        for i in range(2000):
            h = math.sin(0.1 * i) + 0.5 * math.cos(0.37 * i)
            rows.append([0.0, 2.0 * h])
        sol = cf.regret_weights(rows)
        assert abs(sol["weights"][0] - 0.5) < 1e-6, sol
        assert abs(sol["weights"][1] - 0.5) < 1e-6, sol
        assert sol["converged"], sol
        assert sol["kkt_residual"] < 1e-6, sol

        # Relative risk against site 2's own predictions collapses onto it.
        rows = [[math.sin(0.1 * i), math.cos(0.2 * i)] for i in range(2000)]
        baseline = [r[1] for r in rows]
        sol = cf.relative_risk_weights(rows, baseline)
        assert sol["weights"][1] > 0.999, sol

        gamma = cf.estimate_gamma([[1.0, 2.0], [1.0, 2.0]])
        assert abs(gamma[0][0] - 1.0) < 1e-12, gamma
        assert abs(gamma[0][1] - 2.0) < 1e-12, gamma
        assert abs(gamma[1][1] - 4.0) < 1e-12, gamma

        # Closed-form two-site weight and its clipping.
        assert abs(cf.risk_2site_weight(1.0, 0.0, 2.0) - 0.75) < 1e-15
        assert cf.risk_2site_weight(9.0, 0.0, 2.0) == 1.0

        assert cf.empirical_regret([1.0, 2.0], [0.0, 0.0]) == 2.5

        rep = cf.simulate_oracle_replication("B", 4, 11)
        assert len(rep["weights"]) == 4
        assert abs(sum(rep["weights"]) - 1.0) < 1e-9, rep
        assert rep["worst_case_regret"] >= max(rep["per_site_regret"]) - 1e-12
        assert all(r < 1e-9 for r in rep["site_rmse"]), rep  # oracle models

        try:
            cf.regret_weights([[1.0, 2.0], [1.0]])
        except ValueError:
            pass
        else:
            raise AssertionError("ragged matrix should raise ValueError")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
