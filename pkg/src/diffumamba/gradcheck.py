"""Central finite-difference gradient checking.

``out_fn`` returns any output tensor; the checked scalar is its dot
product with a fixed random projection.  The analytic side
differentiates the taped sum(out * w) at the tensors' native precision.
The finite-difference side is the oracle, so it runs at full accuracy:
the probed tensors are temporarily upcast to float64 (subgraphs that do
not depend on the perturbed coordinate keep identical rounding across
the +/-h evaluations and cancel in the difference), the dot product is
accumulated in float64, and each coordinate is measured with three
stencils (two small-step central differences and a wider 4th-order
five-point rule, which covers functions with large high derivatives);
the best agreement counts.  A genuinely wrong adjoint fails all three.

Coordinates whose gradient sits below the dtype's absolute floor are
held to that floor instead of a pure ratio: a float32 backward pass
cannot resolve ratios of gradients at its own rounding level.
"""

from __future__ import annotations

import numpy as np

from .tensor import Rng, Tensor, no_grad


def _pick_coords(analytic, n_coords, rng: Rng):
    flat = np.abs(analytic).ravel()
    order = np.argsort(-flat)
    picks = list(order[:max(1, n_coords // 2)])
    pool = order[len(picks):max(len(picks) + 1, len(order) // 3)]
    while len(picks) < n_coords and len(pool):
        picks.append(int(pool[int(rng.integers(0, len(pool)))]))
    return sorted(set(int(p) for p in picks))


def finite_difference_check(out_fn, wiggle, rel_tol, n_coords=4, seed=0):
    """Compare analytic grads of sum(out_fn() * w) against central FD.

    ``wiggle`` lists the tensors whose gradients are checked; their
    ``.data`` buffers are perturbed in place and restored.  Raises
    AssertionError when any coordinate exceeds ``rel_tol``; returns
    (max relative error, per-coordinate records) otherwise.
    """
    rng = Rng(seed, name="gradcheck")
    for t in wiggle:
        t.zero_grad()
    out = out_fn()
    proj = Tensor(rng.normal(out.shape, dtype=out.dtype))
    proj64 = proj.data.astype(np.float64)
    (out * proj).sum().backward()
    analytic = []
    for t in wiggle:
        if t.grad is None:
            raise AssertionError("checked tensor received no gradient")
        analytic.append(t.grad.copy())

    def value():
        with no_grad():
            return float(np.dot(out_fn().data.astype(np.float64).ravel(),
                                proj64.ravel()))

    records = []
    saved = [t.data for t in wiggle]
    try:
        for t in wiggle:
            t.data = t.data.astype(np.float64)
        for t, grad, orig in zip(wiggle, analytic, saved):
            atol = 1e-5 if orig.dtype == np.float32 else 1e-10
            floor = atol / rel_tol
            flat_data = t.data.reshape(-1)
            flat_grad = grad.reshape(-1)
            for idx in _pick_coords(grad, n_coords, rng):
                x0 = float(flat_data[idx])
                scale = max(1.0, abs(x0))
                a = float(flat_grad[idx])

                def probe(offset):
                    flat_data[idx] = x0 + offset
                    return value()

                estimates = []
                for h in (3e-6 * scale, 3e-5 * scale):
                    estimates.append((probe(h) - probe(-h)) / (2.0 * h))
                h = 1e-3 * scale
                estimates.append((-probe(2 * h) + 8.0 * probe(h)
                                  - 8.0 * probe(-h) + probe(-2 * h)) / (12.0 * h))
                flat_data[idx] = x0
                rel, fd = min(((abs(a - f) / max(abs(a), abs(f), floor), f)
                               for f in estimates), key=lambda p: p[0])
                records.append({"coord": idx, "analytic": a, "fd": fd, "rel": rel})
    finally:
        for t, data in zip(wiggle, saved):
            t.data = data
    max_rel = max(r["rel"] for r in records)
    if max_rel >= rel_tol:
        worst = max(records, key=lambda r: r["rel"])
        raise AssertionError(f"gradient check failed: rel={worst['rel']:.3e} "
                             f"(analytic={worst['analytic']:.6e}, fd={worst['fd']:.6e}, "
                             f"tol={rel_tol:g})")
    return max_rel, records
