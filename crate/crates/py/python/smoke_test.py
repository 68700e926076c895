"""Smoke test for the tdnpy extension. Run after
`pip install -e crates/py --no-build-isolation`."""

import math
import os
import subprocess
import sys
import tempfile

import tdnpy as td

NET = """input 16 16 1
conv a k=3 s=2 f=8 bn=1
conv b k=3 f=8 bn=1 act=none
add r from=b,a act=relu
gap g
dense fc units=6
softmax p
"""


def main():
    report = td.analyze(NET)
    assert report["flops"] > 0 and report["params"] > 0, report
    assert len(report["per_layer"]) == 7
    assert td.analyze(td.canonical(NET)) == report

    assert abs(td.netscore(98.0, 427_776, 97_263_435) - 93.46) < 0.01
    assert td.check(97_263_435) and td.check(105_000_000) and not td.check(106_000_000)
    assert td.ratio_string(24_136_710 / 427_776) == "56×"
    assert td.ratio_string(0.01881 / 0.00247) == "7.6×"

    pixels, mask, name = td.synth_image(5, 3, size=16, seed=1)
    assert len(pixels) == 256 and len(mask) == 256 and name == "Sc_0003"
    assert all(0.0 <= p <= 1.0 for p in pixels) and any(mask)

    model = td.Model(NET, seed=3)
    assert model.input_shape == (16, 16, 1)
    probs = model.infer([pixels, pixels])
    assert len(probs) == 2 and probs[0] == probs[1]
    assert all(abs(sum(row) - 1.0) < 1e-5 for row in probs)
    logits = model.infer([pixels], logits=True)[0]
    m = max(logits)
    soft = [math.exp(v - m) / sum(math.exp(u - m) for u in logits) for v in logits]
    assert all(abs(a - b) < 1e-5 for a, b in zip(soft, probs[0]))

    for bad in (lambda: td.analyze("input 4 4 1\nbogus x\n"), lambda: model.infer([[0.0] * 3])):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    tdn = os.environ.get("TDN_BIN")
    if tdn:
        # Weights trained by the CLI load into the extension unchanged.
        with tempfile.TemporaryDirectory() as d:
            arch = os.path.join(d, "net.tdn")
            with open(arch, "w") as f:
                f.write(NET)
            cfg = os.path.join(d, "run.cfg")
            with open(cfg, "w") as f:
                f.write("train.epochs=1\nruntime.num_threads=1\n")
            run = lambda *a: subprocess.run([tdn, "--config", cfg, *a], cwd=d, check=True, capture_output=True)
            run("synth", "--per-class", "5", "--size", "16", "--out", "data")
            run("train", "net.tdn", "--data", "data", "--out", "model")
            trained = td.Model(NET, weights=os.path.join(d, "model", "model.tdnw"))
            assert len(trained.infer([pixels])[0]) == 6

    print("tdnpy smoke test: ok")


if __name__ == "__main__":
    sys.exit(main())
