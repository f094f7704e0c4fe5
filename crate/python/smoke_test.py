"""Smoke test for the fourierflow_py extension.

Builds the extension with cargo if no compiled module is importable, then
exercises each binding on tiny inputs. Run from the repository root:

    python3 python/smoke_test.py
"""

import importlib
import json
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load_module():
    try:
        return importlib.import_module("fourierflow_py")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "fourierflow-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libfourierflow_py.so"
    if not lib.exists():
        lib = ROOT / "target" / "release" / "libfourierflow_py.dylib"
    dest = Path(tempfile.mkdtemp()) / "fourierflow_py.so"
    shutil.copy(lib, dest)
    sys.path.insert(0, str(dest.parent))
    return importlib.import_module("fourierflow_py")


def close(a, b, tol=1e-10):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    ff = load_module()
    print("fourierflow_py", ff.version())

    a, s, da, ds = ff.schedule_eval("linear", 0.25)
    assert (a, s, da, ds) == (0.75, 0.25, -1.0, 1.0)
    a, s, _, _ = ff.schedule_eval("vp", 0.5)
    assert close(a * a + s * s, 1.0)

    assert close(ff.accumulated_noise_variance(2.0, 0.5), 2.0)
    # t_gamma for |omega|^-alpha power with g = 1: omega^-alpha / gamma
    assert close(ff.threshold_time(2.0, 4.0), 1.0 / 16.0, 1e-8)

    n = 8
    field = [[math.cos(2 * math.pi * 2 * x / n) for x in range(n)] for _ in range(n)]
    spec = ff.radial_energy_spectrum(field)
    total = sum(spec)
    assert close(spec[2], total), spec
    assert close(total, (n * n) ** 2 / 2)

    with tempfile.TemporaryDirectory() as tmp:
        cfg = {"n_traj": 3, "test_fraction": 0.34, "val_fraction": 0.0, "solver": {"n": 16, "n_steps": 70, "save_stride": 10}}
        counts = ff.gen_data(os.path.join(tmp, "data"), json.dumps(cfg))
        assert counts[0] >= 1 and counts[2] >= 1, counts
        test = os.path.join(tmp, "data", "test.fpk")
        shape, values = ff.read_fieldpack(test)
        assert shape[1:] == [8, 16, 16, 2] and len(values) == math.prod(shape)
        mse, nrmse, max_err = ff.metrics(test, test)
        assert (mse, nrmse, max_err) == (0.0, 0.0, 0.0)

    print("smoke test passed")


if __name__ == "__main__":
    main()
