"""How much kernel memory the two-stage factorization saves, per layer shape.

Prints the analytic byte counts for a few layer sizes, then allocates both
kernel sets for a small layer and checks the bytes actually requested match.
"""
from guidedconv.cost import analyze, format_gb, measure

shapes = [
    # M, N, K, H, B
    (32, 32, 3, 64, 128),
    (64, 64, 3, 32, 64),
    (128, 128, 3, 64, 304),   # a KITTI-sized layer at 1/4 resolution
    (256, 256, 3, 16, 76),
]

print(f"{'M':>4} {'N':>4} {'K':>2} {'H':>4} {'B':>4} {'naive GB':>9} {'fact GB':>8} {'saving':>8}")
for M, N, K, H, B in shapes:
    r = analyze(M, N, K, H, B)
    print(f"{M:4d} {N:4d} {K:2d} {H:4d} {B:4d} {format_gb(r.naive_bytes):>9} {format_gb(r.fact_bytes):>8} "
          f"{float(1 / r.ratio):7.1f}x")

# the saving is roughly N: the full kernel repeats its K*K*H*B spatial part once per output channel
m = measure(8, 8, 3, 16, 16)
print()
print(f"measured at M=N=8, K=3, 16x16: naive {m.naive_kernel_bytes} B, factorized {m.fact_kernel_bytes} B")
print(f"analytic:                      naive {m.report.naive_bytes} B, factorized {m.report.fact_bytes} B")
print(f"wall-clock naive/factorized: {m.time_ratio:.1f}")
