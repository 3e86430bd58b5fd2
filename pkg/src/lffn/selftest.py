"""Built-in oracle and gradient suite behind ``lffn selftest``."""
from __future__ import annotations

import numpy as np

from lffn import ops, oracles
from lffn.arch import SFFM
from lffn.gradcheck import all_checks
from lffn.tensor import Tensor


def oracle_checks(seed: int = 0) -> list[tuple[str, float, float]]:
    """(name, max abs error, tolerance) for the fast kernels vs the loop oracles."""
    rng = np.random.default_rng(seed)
    out = []
    for name, cin, cout, groups, stride in [("conv2d", 4, 3, 1, 1), ("conv2d_depthwise", 4, 4, 4, 1),
                                            ("conv2d_grouped_s2", 4, 6, 2, 2)]:
        x = rng.standard_normal((1, cin, 5, 5)).astype(np.float32)
        w = rng.standard_normal((cout, cin // groups, 3, 3)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        spec = ops.ConvSpec(cin, cout, 3, stride, 1, groups)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
        out.append((name, float(np.abs(got - oracles.conv2d_loops(x, w, b, stride, 1, groups)).max()), 1e-5))

    sffm = SFFM(3, 4)
    for a in sffm.alphas:
        a.data[...] = rng.standard_normal(a.shape)
    levels = [rng.standard_normal((2, 4, 3, 3)).astype(np.float32) for _ in range(3)]
    got = sffm([Tensor(v) for v in levels]).data
    ref, _ = oracles.sffm_loops(levels, [a.data for a in sffm.alphas])
    out.append(("sffm_forward", float(np.abs(got - ref).max()), 1e-5))

    x = Tensor(rng.standard_normal((2, 12, 4, 5)))
    rt = ops.pixel_unshuffle(ops.pixel_shuffle(x, 2), 2).data
    out.append(("pixel_shuffle_roundtrip", float(np.abs(rt - x.data).max()), 0.0))
    return out


def run(verbose: bool = False) -> bool:
    ok = True
    for name, err, tol in oracle_checks():
        passed = err <= tol
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  oracle  {name:<32} max|diff| {err:.2e} (tol {tol:g})")
    for chk in all_checks():
        ok &= chk.ok
        if verbose:
            print(f"{'PASS' if chk.ok else 'FAIL'}  grad    {chk.name:<32} rel.err  {chk.max_rel_error:.2e} (tol {chk.tol:g})")
    if verbose:
        print("selftest", "passed" if ok else "FAILED")
    return bool(ok)
