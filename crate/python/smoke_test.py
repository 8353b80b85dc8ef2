"""Smoke test for the pyfbc2c extension module.

Build and install the module first (see README), then run
`python python/smoke_test.py`.
"""

import math
import os
import tempfile

import pyfbc2c


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    points = [[i / 199] for i in range(200)]

    fem = pyfbc2c.Basis.fem([0.0, 0.5, 1.0])
    d = fem.design_matrix([[0.0], [0.25], [0.5], [1.0]])
    check(abs(d[1][1] - 0.5) < 1e-15 and d[0] == [1.0, 0.0, 0.0], "fem hat values")

    rfm = pyfbc2c.Basis.rfm(1, [4], 16, 3.0, 7, bounds=[[0.0, 1.0]])
    check(rfm.size == 64 and rfm.dim == 1, "rfm size")
    design = rfm.design_matrix(points)
    check(all(abs(v) <= 1.0 for row in design for v in row), "rfm values bounded")

    values = [[math.sin(math.pi * k * x[0]) for x in points] for k in (1, 2, 3)]
    enc = pyfbc2c.Encoder(design, "svd", 1e-10)
    coeffs = enc.encode(values)
    recon = [[sum(design[i][j] * c[j] for j in range(rfm.size)) for i in range(len(points))] for c in coeffs]
    err = max(abs(a - b) for r, v in zip(recon, values) for a, b in zip(r, v))
    check(err < 1e-4, f"encode/reconstruct sine (max err {err:.1e})")

    check(abs(pyfbc2c.effective_rank([2.0, 1.0, 1.0]) - 2 ** 1.5) < 1e-12, "effective rank hand case")
    diag = pyfbc2c.diagnostics([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    check(abs(diag["effective_rank"] - 1.0) < 1e-12, "rank-1 diagnostics")

    net = pyfbc2c.OperatorNet(rfm.size, 16, rfm.size, seed=3)
    check(net.param_count == 16 * 64 + 16 + 64 * 16, "parameter count")
    out = net.forward(coeffs)
    loss, per = pyfbc2c.relative_loss(out, design, values)
    check(len(per) == 3 and loss > 0, "relative loss")

    cfg = pyfbc2c.preset_config("darcy1d")
    cfg = cfg.replace("grid = 2000", "grid = 64").replace("train = 500", "train = 12").replace("test = 200", "test = 4")
    with tempfile.TemporaryDirectory() as tmp:
        report = pyfbc2c.run(config_toml=cfg, epochs=5, out_dir=tmp)
        check(report["epochs"] == 5 and report["final_test_error"] >= report["projection_error"] - 1e-9, "pipeline run")
        ckpt = pyfbc2c.read_container(os.path.join(tmp, "checkpoint.fbc"))
        check(ckpt["metadata"]["kind"] == "checkpoint", "checkpoint container")
        restored = pyfbc2c.OperatorNet.load(os.path.join(tmp, "checkpoint.fbc"))
        check(restored.shape == (report["input_dim"], 512, report["output_dim"]), "checkpoint restore")

    try:
        pyfbc2c.preset_config("nope")
    except ValueError as e:
        check("dataset.problem" in str(e), "config errors raise ValueError")
    else:
        raise SystemExit("FAIL unknown preset accepted")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
