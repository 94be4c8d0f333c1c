"""Central finite-difference check of the adapter/head gradients.

Entries whose +/-h perturbation flips any ReLU gate are skipped: the loss
is not differentiable across the kink and the difference quotient there is
meaningless.  Skips are counted and reported.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import AdapterSet, BackboneConfig, _run, backward, build_backbone, softmax_xent
from .numerics import make_rng

STEP = 1e-4
REL_TOL = 1e-5
ABS_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    checked: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)
    max_rel_err: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures and self.checked > 0

    def merge(self, other: "GradCheckResult") -> None:
        self.checked += other.checked
        self.skipped += other.skipped
        self.failures.extend(other.failures)
        self.max_rel_err = max(self.max_rel_err, other.max_rel_err)


def random_problem(rng: np.random.Generator, max_D=16, max_d=32, max_h=32, max_r=8,
                   max_L=3, max_classes=5, max_batch=8):
    D = int(rng.integers(1, max_D + 1))
    d = int(rng.integers(1, max_d + 1))
    h = int(rng.integers(1, max_h + 1))
    r = int(rng.integers(1, max_r + 1))
    L = int(rng.integers(1, max_L + 1))
    k = int(rng.integers(2, max_classes + 1))
    n = int(rng.integers(1, max_batch + 1))
    cfg = BackboneConfig(D, d, h, L, use_identity_residual=bool(rng.integers(2)),
                         init_seed=int(rng.integers(2**31)), init_scale=1.0 / np.sqrt(max(D, d)))
    bb = build_backbone(cfg)
    s = 1.0 / np.sqrt(d)
    adapters = AdapterSet([rng.uniform(-s, s, (d, r)) for _ in range(L)],
                          [rng.uniform(-s, s, (r, d)) for _ in range(L)])
    head = rng.uniform(-1.0, 1.0, (d, k))
    X = rng.standard_normal((n, D))
    y = rng.integers(0, k, n)
    return bb, adapters, head, X, y


def _loss_and_gates(X, y, bb, adapters, head):
    emb, cache = _run(X, bb, adapters, keep=True)
    gates = [np.concatenate([(z > 0).ravel(), (u > 0).ravel()]) for _, z, u in cache]
    return softmax_xent(emb @ head, y)[0], np.concatenate(gates)


def check_problem(bb, adapters, head, X, y, step=STEP, rel_tol=REL_TOL,
                  abs_floor=ABS_FLOOR) -> GradCheckResult:
    _, grads = backward(X, y, bb, adapters, head)
    _, gates0 = _loss_and_gates(X, y, bb, adapters, head)
    res = GradCheckResult()
    params = [*adapters.arrays(), head]
    analytic = [*grads.down, *grads.up, grads.head]
    for p_idx, (p, g) in enumerate(zip(params, analytic)):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp, gp = _loss_and_gates(X, y, bb, adapters, head)
            p[idx] = orig - step
            lm, gm = _loss_and_gates(X, y, bb, adapters, head)
            p[idx] = orig
            if not (np.array_equal(gp, gates0) and np.array_equal(gm, gates0)):
                res.skipped += 1
                continue
            num = (lp - lm) / (2 * step)
            err = abs(num - g[idx])
            res.checked += 1
            scale = max(abs(num), abs(g[idx]))
            rel = err / scale if scale > 0 else 0.0
            res.max_rel_err = max(res.max_rel_err, rel if scale > abs_floor else 0.0)
            if err >= abs_floor and rel >= rel_tol:
                res.failures.append((p_idx, idx, float(g[idx]), float(num), rel))
    return res


def run_gradcheck(n_configs: int = 100, seed: int = 0, **limits) -> GradCheckResult:
    total = GradCheckResult()
    for k in range(n_configs):
        rng = make_rng(seed, k)
        total.merge(check_problem(*random_problem(rng, **limits)))
    return total
