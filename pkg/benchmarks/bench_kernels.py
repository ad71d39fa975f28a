"""Compare the compiled and numpy kernel backends on a phantom-sized problem.

    python benchmarks/bench_kernels.py [--resolution 8] [--repeats 5]
"""
import argparse
import time

import numpy as np

from fesurrogate import fesolver as fe
from fesurrogate import kernels
from fesurrogate.geometry import PhantomSpec, generate_phantom


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    mesh = generate_phantom(PhantomSpec(grid_resolution=(args.resolution,) * 3))
    rng = np.random.default_rng(args.seed)
    mats = fe.MaterialField.from_regions(mesh.labels, fe.MaterialRanges().draw(rng))
    load = fe.sample_probe_load(mesh, 0.005, args.seed)
    prescribed = fe.dirichlet_field(mesh, load)
    u = 1e-3 * rng.standard_normal((mesh.n_nodes, 3))
    u[mesh.fixed_nodes] = 0.0

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_tets} tets; active backend {kernels.BACKEND}")
    print(f"{'kernel':<28}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    rows = {}
    for b in backends:
        asm = fe.Assembler(mesh, b)
        f, K = asm.forces_and_tangent(u, mats)
        rhs = f.ravel() + 1.0
        free = np.ones((mesh.n_nodes, 3), dtype=bool)
        free[mesh.fixed_nodes] = free[mesh.loaded_nodes] = False
        free = free.ravel()
        Kf = K[free][:, free].tocsr()
        rhs = rhs[free]
        rows.setdefault("element forces+tangent", []).append(
            best_of(lambda: asm.forces_and_tangent(u, mats), args.repeats))
        rows.setdefault("element forces", []).append(
            best_of(lambda: asm.forces(u, mats), args.repeats))
        rows.setdefault("jacobi pcg (one solve)", []).append(
            best_of(lambda: kernels.pcg(Kf, rhs, 1e-10, backend=b), args.repeats))
        rows.setdefault("full static solve", []).append(
            best_of(lambda: fe.solve_static(mesh, mats, prescribed, backend=b),
                    max(1, args.repeats // 2)))
    for name, ts in rows.items():
        line = f"{name:<28}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts)
        if len(ts) == 2:
            line += f"  {ts[0] / ts[1]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
