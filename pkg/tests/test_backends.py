import os
import runpy
import subprocess
import sys
from pathlib import Path

import pytest

from demotesim.cache import BACKEND, BACKENDS

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_core.py"


def _backend_in_subprocess(pure: str | None) -> str:
    env = dict(os.environ)
    env.pop("DEMOTESIM_PURE", None)
    if pure is not None:
        env["DEMOTESIM_PURE"] = pure
    out = subprocess.run([sys.executable, "-c",
                          "from demotesim.cache import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_pure_env_selects_python():
    assert _backend_in_subprocess("1") == "python"


def test_compiled_is_default_when_built():
    want = "cython" if "cython" in BACKENDS else "python"
    if os.environ.get("DEMOTESIM_PURE") in ("1", "true", "yes"):
        pytest.skip("pure mode forced for this run")
    assert BACKEND == want
    assert _backend_in_subprocess(None) == want


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled core not built")
def test_benchmark_smoke(tmp_path):
    mod = runpy.run_path(str(BENCH))
    out = tmp_path / "bench.json"
    rc = mod["main"](["--ops", "3000", "--repeat", "1", "--only", "random_ops",
                      "--only", "evtest_kernel", "--json", str(out)])
    assert rc == 0
    assert out.exists()
