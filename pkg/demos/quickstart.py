"""Run a few BO iterations on the 2-d drop-wave function and print the trace.

    python demos/quickstart.py

Expected output: one line per iteration for EI and for a 2-step lookahead,
then the final GAP of each. One seed and ten iterations say very little about
which policy is better; the point is to show the moving parts.
"""

from lookahead_bo import gap, parse_policy, run_bo
from lookahead_bo.benchmarks import derive_seed, get_function, load_optima

fn = get_function("dropwave")
y_star = load_optima()["dropwave"].value

for spec in ("ei", "2-step"):
    policy = parse_policy(spec)
    trace = run_bo(fn, policy, budget=10, seed=derive_seed(0, fn.name, 0))
    print(f"\n{spec}: {trace.n_init} initial points, best so far {trace.initial_best:.4f}")
    for i, (x, y, best) in enumerate(zip(trace.points[trace.n_init:], trace.values[trace.n_init:],
                                         trace.incumbents[trace.n_init:])):
        print(f"  iter {i:2d}  x = ({x[0]:+.3f}, {x[1]:+.3f})  y = {y:.4f}  best = {best:.4f}")
    print(f"{spec}: GAP after 10 iterations = {gap(trace, y_star):.3f}")
