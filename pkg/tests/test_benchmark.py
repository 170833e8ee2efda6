import importlib.util
from pathlib import Path

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_benchmark_runs(capsys):
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    from mtdistill import kernels

    before = kernels.softmax_xent
    bench.main(["--repeat", "3"])
    out = capsys.readouterr().out
    assert "student step" in out
    for name in bench.KERNELS:
        assert name in out
    # The step benchmark swaps backends; the selected one must be restored.
    assert kernels.softmax_xent is before
