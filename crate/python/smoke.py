"""Smoke test for the lqg_prefix_py extension.

Build and install first, e.g. `pip install maturin && maturin develop -m crates/python/Cargo.toml`.
"""
import math
import sys

import lqg_prefix_py as lp

REF1 = dict(a=[[2.0]], b=[[1.0]], w=[[1.0]], x0=[[1.0]], q=[[1.0]], r=[[1.0]], gamma=5.6068884)


def main():
    s = lp.solve(**REF1)
    assert abs(s["S"][0][0] - (2 + math.sqrt(5))) < 1e-9, s["S"]
    assert abs(s["rate_bits"] - 0.5 * math.log2(14)) < 1e-7, s["rate_bits"]
    gap = 0.5 * math.log2(2 * math.pi * math.e / 12)
    assert abs(lp.space_filling_loss() - gap) < 1e-15

    for mode in ("tv-si", "tv-nosi", "ti-si", "ti-nosi"):
        out = lp.simulate(**REF1, mode=mode, horizon=20000, seed=1)
        assert out["sync_ok"] and out["bits_pass"], out
        assert out["avg_bits"] <= out["bound_bits"], out
        print(f"{mode:8s} cost {out['avg_cost']:.4f} bits {out['avg_bits']:.4f} bound {out['bound_bits']:.4f}")

    inv = lp.invariant(2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.6068884, mc_steps=500000, seed=2)
    assert abs(inv["var_series"] - 1.4) < 1e-3, inv
    print(f"invariant var series {inv['var_series']:.6f} mc {inv['var_mc']:.4f} tv {inv['tv_distance']:.4f}")

    cells, probs = [0, 1, 2], [0.5, 0.25, 0.25]
    words = dict(lp.codebook(cells, probs))
    assert words == {0: "0", 1: "10", 2: "11"}, words
    msg = [0, 2, 1, 1, 0]
    bits = lp.encode(cells, probs, msg)
    assert lp.decode(cells, probs, bits, len(msg)) == msg
    try:
        lp.encode(cells, probs, [9])
    except ValueError:
        pass
    else:
        raise AssertionError("unlisted symbol should be rejected")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
