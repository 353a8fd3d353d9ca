"""Shared numerical oracles for the test suite."""

import numpy as np


def central_diff(f, arrays, h=1e-3):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array
    (arrays are perturbed in place and restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(analytic, numeric):
    """Max abs deviation scaled by the numeric gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def max_rel_err(analytics, numerics):
    return max(rel_err(a, n) for a, n in zip(analytics, numerics))


# --- acceptance bookkeeping ---

import time  # noqa: E402

ACCEPTANCE: dict = {}


class Criterion:
    """Collects named checks and the runtime charged to one acceptance criterion.

    Work reused from another criterion's cache is charged via ``charge`` so the
    reported runtime covers everything the criterion depends on.
    """

    def __init__(self, number: int, budget_s: float):
        self.number, self.budget = number, budget_s
        self.checks: list = []
        self.extra = 0.0
        self.t0 = time.perf_counter()

    def check(self, name: str, ok, detail: str = ""):
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    def charge(self, seconds: float):
        self.extra += seconds

    def finish(self):
        elapsed = time.perf_counter() - self.t0 + self.extra
        self.check("runtime", elapsed < self.budget, f"{elapsed:.1f}s of {self.budget:.0f}s")
        failed = [c for c in self.checks if not c[1]]
        ACCEPTANCE[self.number] = (not failed, elapsed, self.checks)
        status = "PASS" if not failed else "FAIL"
        print(f"\ncriterion {self.number}: {status} ({elapsed:.1f}s)")
        for name, ok, detail in self.checks:
            print(f"  [{'ok' if ok else 'FAIL'}] {name} {detail}")
        assert not failed, "; ".join(f"{n} {d}" for n, _, d in failed)
