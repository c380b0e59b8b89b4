"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py --chunks 1000 --repeat 20
"""

import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np


def bench_backend(mod, chunks: int, repeat: int) -> dict[str, float]:
    rng = np.random.default_rng(0)
    seqs = rng.permutation(chunks).astype(np.int64)
    rounds = np.full(chunks, 7, dtype=np.uint64)
    rounds[::50] = 6

    def ingest():
        flags = np.zeros(chunks, dtype=np.uint8)
        acc = np.zeros(chunks, dtype=np.uint8)
        mod.ingest(flags, seqs, rounds, 7, 0, chunks, acc)

    key = mod.stream_key(1, 2, 3)
    out = {}
    out["ingest"] = min(timeit.repeat(ingest, number=1, repeat=repeat))
    out["hash_stream"] = min(timeit.repeat(lambda: mod.hash_stream(key, 0, chunks), number=1, repeat=repeat))
    out["mix64 x1000"] = min(timeit.repeat(lambda: [mod.mix64(i) for i in range(1000)], number=1, repeat=repeat))
    return out


def transfer_script(chunks: int, payload: int, repeat: int) -> str:
    """Burst-round virtual-time transfer, timed in a fresh interpreter so the backend switch applies."""
    return (
        "import timeit\n"
        "from dblp.lossnet import LossSchedule, VirtualLink\n"
        f"data = bytes({chunks} * {payload})\n"
        "def run():\n"
        "    link = VirtualLink(LossSchedule(0.05, ((0, 0.7),), seed=1, model='stratified'))\n"
        f"    link.transfer(data, 0, 0.008, max_payload={payload})\n"
        f"print(min(timeit.repeat(run, number=1, repeat={repeat})))\n"
    )


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--chunks", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    mods = {"python": importlib.import_module("dblp._pykernels")}
    try:
        mods["cython"] = importlib.import_module("dblp._kernels")
    except ImportError:
        print("compiled backend not built; showing the Python fallback only")

    results = {name: bench_backend(m, args.chunks, args.repeat) for name, m in mods.items()}
    cases = {
        # full-size datagrams: bulk numpy copies dominate
        f"transfer {args.chunks}x1384B": transfer_script(args.chunks, 1384, max(3, args.repeat // 4)),
        # tiny datagrams: the per-datagram ingest loop dominates
        "transfer 50000x4B": transfer_script(50000, 4, 3),
    }
    for name in mods:
        env = dict(os.environ)
        if name == "python":
            env["DBLP_PURE_PYTHON"] = "1"
        else:
            env.pop("DBLP_PURE_PYTHON", None)
        for label, code in cases.items():
            res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            results[name][label] = float(res.stdout.strip())

    names = list(results)
    print(f"{'kernel':<22}" + "".join(f"{n:>14}" for n in names) + ("       speedup" if len(names) == 2 else ""))
    for k in results["python"]:
        row = f"{k:<22}" + "".join(f"{results[n][k] * 1e3:>11.3f} ms" for n in names)
        if len(names) == 2:
            row += f"{results['python'][k] / results['cython'][k]:>13.1f}x"
        print(row)


if __name__ == "__main__":
    main()
