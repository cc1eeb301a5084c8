"""How many proposals does the sparse window group keep?

Compares the Fibonacci window group against the dense T x T start/end map for a
few sequence lengths, then shows what the bilinear sampling matrix looks like
for one window. Runs in a second; no training involved.

    python demos/window_budget.py
"""

import numpy as np

from tapg.sampler import enumerate_windows, fibonacci_group, sampling_matrix, stride


def budget(T, D, gamma=21):
    group = fibonacci_group(D, gamma)
    L = len(enumerate_windows(T, group))
    return group, L, L / T ** 2


print(f"{'T':>5} {'D':>5} {'L':>6} {'L/T^2':>8}  window sizes")
for T, D in [(50, 50), (100, 100), (256, 64), (256, 256)]:
    group, L, ratio = budget(T, D)
    print(f"{T:5d} {D:5d} {L:6d} {ratio:8.4f}  {group.sizes}")

print("\nstride per window size (gamma = 21):")
sizes = fibonacci_group(100).sizes
print("  " + "  ".join(f"{w}:{stride(w, 21)}" for w in sizes))

# one window, eight sample points over a ten-snippet sequence
np.set_printoptions(precision=2, suppress=True, linewidth=120)
W = sampling_matrix((2.0, 5.5), 8, 10)
print("\nsampling matrix for window [2, 5.5], N=8, T=10 (rows sum to 1):")
print(W)
