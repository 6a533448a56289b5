"""Timing comparison of the compiled and pure-python kernel backends.

Runs each hot kernel on identical inputs through every importable
backend, cross-checks that their outputs agree, and reports best-of-N
wall times. Invoke from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --edge 96 --repeats 7 --json out.json
"""

import argparse
import json
import sys
import time

import numpy as np

from calcquant.kernels import available_backends, get_backend


def _best_seconds(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def _check_labelings_agree(mask, a, b):
    """Two labelings agree when their foreground partitions are identical."""
    labels_a, count_a = a
    labels_b, count_b = b
    if count_a != count_b:
        raise AssertionError(f"component counts differ: {count_a} vs {count_b}")
    fg = mask > 0
    if not (np.array_equal(labels_a > 0, fg) and np.array_equal(labels_b > 0, fg)):
        raise AssertionError("foreground voxels differ between labelings")
    pairs = np.unique(
        np.stack([labels_a[fg], labels_b[fg]], axis=1), axis=0
    )
    if not (
        len(pairs) == count_a
        and len(np.unique(pairs[:, 0])) == count_a
        and len(np.unique(pairs[:, 1])) == count_a
    ):
        raise AssertionError("label maps are not a relabeling of each other")


def build_workloads(edge, seed):
    rng = np.random.default_rng(seed)
    volume = rng.normal(0.0, 200.0, size=(edge, edge, edge))
    # spill slightly past the voxel-center hull so the fill path is timed too
    coords = rng.uniform(-2.0, edge + 1.0, size=(edge**3, 3))
    mask = (rng.uniform(size=(edge, edge, edge)) < 0.2).astype(np.uint8)

    workloads = [
        ("gather_linear", lambda be: be.gather_linear(volume, coords, -1024.0)),
        ("gather_nearest", lambda be: be.gather_nearest(volume, coords, -1024.0)),
        ("label_components_6", lambda be: be.label_components(mask, 6)),
        ("label_components_26", lambda be: be.label_components(mask, 26)),
    ]
    return workloads, coords.shape[0], mask


def run(edge, repeats, seed):
    backends = [get_backend(name) for name in available_backends()]
    workloads, n_points, mask = build_workloads(edge, seed)

    rows = []
    for name, call in workloads:
        outputs = []
        timings = {}
        for backend in backends:
            outputs.append(call(backend))
            timings[backend.BACKEND] = _best_seconds(
                lambda b=backend: call(b), repeats
            )
        for other in outputs[1:]:
            if name.startswith("label_components"):
                _check_labelings_agree(mask, outputs[0], other)
            elif not np.allclose(outputs[0], other, rtol=1e-9, atol=1e-9):
                raise AssertionError(f"backends disagree on {name}")
        n = n_points if name.startswith("gather") else int(np.prod(mask.shape))
        rows.append({"kernel": name, "n": n, "seconds": timings})
    return rows


def format_table(rows):
    names = sorted({backend for row in rows for backend in row["seconds"]})
    header = f"{'kernel':<22}{'n':>10}" + "".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        line = f"{row['kernel']:<22}{row['n']:>10}"
        for name in names:
            line += f"{row['seconds'][name] * 1e3:>10.2f}ms"
        if len(names) == 2:
            slow, fast = row["seconds"]["python"], row["seconds"]["compiled"]
            line += f"{slow / fast:>9.1f}x"
        lines.append(line)
    return "\n".join(lines)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--edge", type=int, default=64, help="cube edge in voxels")
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats; best is kept")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", type=str, default=None, help="also write results to this path")
    args = parser.parse_args(argv)

    if args.edge < 8:
        parser.error("--edge must be at least 8")
    if args.repeats < 1:
        parser.error("--repeats must be at least 1")

    rows = run(args.edge, args.repeats, args.seed)
    print(f"backends: {', '.join(available_backends())}")
    print(format_table(rows))
    if "compiled" not in available_backends():
        print("compiled backend unavailable; timed the python fallback only")

    if args.json:
        payload = {"edge": args.edge, "repeats": args.repeats, "results": rows}
        with open(args.json, "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"wrote {args.json}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
