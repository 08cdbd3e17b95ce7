"""How much the cached fantasy update saves over conditioning from scratch.

    python demos/fantasy_speed.py

For each training-set size n and fantasy count m the script times two ways
of getting posterior means after adding one fantasized observation:
re-factorizing the (n+1)x(n+1) kernel matrix for every fantasy, and the
rank-space cache update that is shared by all m fantasies. The speedup column
grows with both n and m.
"""

from lookahead_bo.cli import fantasy_benchmark

print(f"{'n':>6} {'m':>5} {'fast (ms)':>10} {'naive (ms)':>11} {'speedup':>8}")
for row in fantasy_benchmark([128, 256, 512], [1, 16, 128], reps=3):
    print(f"{row['n']:>6} {row['m']:>5} {1e3 * row['fast_s']:>10.2f} {1e3 * row['naive_s']:>11.2f} {row['speedup']:>7.1f}x")
