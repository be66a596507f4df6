"""Memory and multiply-accumulate accounting for guided convolution.

For a depth feature of M channels and H x B pixels mapped to N channels with
K x K kernels, the unfactorised kernel tensor holds M*N*K*K*H*B values, the
factorised pair M*K*K*H*B + M*N.  Their ratio is exactly 1/N + 1/(K*K*H*B).
"""
from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .guided import (ORACLE_CAP_ELEMS, KernelCapExceeded, channelwise_variant_conv, check_oracle_cap,
                     crosschannel_conv, generate_channelwise_kernels, generate_crosschannel_kernels,
                     generate_full_kernels, naive_guided_conv, track_kernel_allocations)
from .tensor import Tensor, no_grad

GIB = 2 ** 30


@dataclass(frozen=True)
class CostReport:
    M: int
    N: int
    K: int
    H: int
    B: int
    bytes_per_elem: int = 4

    def __post_init__(self):
        for name in ("M", "N", "K", "H", "B", "bytes_per_elem"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def naive_kernel_elems(self):
        return self.M * self.N * self.K ** 2 * self.H * self.B

    @property
    def fact_kernel_elems(self):
        return self.M * self.K ** 2 * self.H * self.B + self.M * self.N

    @property
    def naive_bytes(self):
        return self.naive_kernel_elems * self.bytes_per_elem

    @property
    def fact_bytes(self):
        return self.fact_kernel_elems * self.bytes_per_elem

    @property
    def ratio(self):
        """Exact factorised / naive memory ratio."""
        return Fraction(self.fact_kernel_elems, self.naive_kernel_elems)

    @property
    def naive_macs_per_pixel_channel(self):
        return self.M * self.K ** 2

    @property
    def fact_macs_per_pixel_channel(self):
        return self.K ** 2 + self.M

    def rows(self):
        return [
            ("kernel elements", self.naive_kernel_elems, self.fact_kernel_elems),
            ("kernel bytes", self.naive_bytes, self.fact_bytes),
            ("kernel GB (2^30)", f"{self.naive_bytes / GIB:.3g}", f"{self.fact_bytes / GIB:.3g}"),
            ("MACs per output", self.naive_macs_per_pixel_channel, self.fact_macs_per_pixel_channel),
        ]

    def to_table(self):
        head = f"M={self.M} N={self.N} K={self.K} H={self.H} B={self.B} bytes/elem={self.bytes_per_elem}"
        lines = [head, f"{'':18s} {'naive':>16s} {'factorized':>16s}"]
        for label, a, b in self.rows():
            lines.append(f"{label:18s} {str(a):>16s} {str(b):>16s}")
        r = self.ratio
        lines.append(f"naive / factorized = {float(1 / r):.1f}x  (factorized / naive = {r} = {float(r):.6g})")
        lines.append(f"naive {format_gb(self.naive_bytes)} GB -> factorized {format_gb(self.fact_bytes)} GB "
                     f"(GB = 2^30 bytes; decimal GB would read {self.naive_bytes / 1e9:.1f} / {self.fact_bytes / 1e9:.2f})")
        return "\n".join(lines)


def format_gb(nbytes):
    """Render bytes as GiB with the precision used for reporting (10.7, 0.08)."""
    gb = nbytes / GIB
    return f"{gb:.1f}" if gb >= 1 else f"{gb:.2f}"


def _as_int(name, v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, float) and v.is_integer():
        return int(v)
    raise ValueError(f"{name} must be a positive integer, got {v!r}")


def analyze(M, N, K, H, B, bytes_per_elem=4):
    dims = dict(M=M, N=N, K=K, H=H, B=B, bytes_per_elem=bytes_per_elem)
    return CostReport(**{k: _as_int(k, v) for k, v in dims.items()})


CSV_FIELDS = ("M", "N", "K", "H", "B", "naive_bytes", "fact_bytes", "ratio")


def to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow([r.M, r.N, r.K, r.H, r.B, r.naive_bytes, r.fact_bytes, repr(float(r.ratio))])
    return buf.getvalue()


@dataclass
class Measurement:
    report: CostReport
    naive_kernel_bytes: int | None
    fact_kernel_bytes: int
    naive_seconds: float | None
    fact_seconds: float
    naive_peak_bytes: int | None
    fact_peak_bytes: int

    @property
    def analytic_only(self):
        return self.naive_kernel_bytes is None

    @property
    def time_ratio(self):
        return None if self.naive_seconds is None else self.naive_seconds / self.fact_seconds


def measure(M, N, K, H, B, seed=0, cap=ORACLE_CAP_ELEMS):
    """Run both paths on one random image and record their kernel buffers.

    Kernel buffers are counted from the allocations made by the kernel
    generators (float32, batch 1); peak traced memory and wall time are
    reported alongside.  The naive path is skipped above ``cap`` elements.
    """
    report = analyze(M, N, K, H, B, 4)
    rng = np.random.default_rng(seed)
    f32 = np.float32
    image = Tensor(rng.normal(size=(1, M, H, B)).astype(f32))
    depth = Tensor(rng.normal(size=(1, M, H, B)).astype(f32))
    kgl_w = Tensor(rng.normal(size=(M * K * K, M, 3, 3)).astype(f32))
    kgl_b = Tensor(np.zeros(M * K * K, f32))
    fc_w = Tensor(rng.normal(size=(M * N, M)).astype(f32))
    fc_b = Tensor(np.zeros(M * N, f32))

    with no_grad():
        tracemalloc.start()
        t0 = time.perf_counter()
        with track_kernel_allocations() as log:
            cw = generate_channelwise_kernels(image, kgl_w, kgl_b, M, K)
            cc = generate_crosschannel_kernels(image, fc_w, fc_b, M, N)
        crosschannel_conv(channelwise_variant_conv(depth, cw), cc)
        fact_seconds = time.perf_counter() - t0
        fact_peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        fact_bytes = sum(n for _, n in log)

        try:
            check_oracle_cap((1, M, N, K * K, H, B), 4, cap)
        except KernelCapExceeded:
            return Measurement(report, None, fact_bytes, None, fact_seconds, None, fact_peak)
        full_w = Tensor(rng.normal(size=(M * N * K * K, M, 3, 3)).astype(f32))
        tracemalloc.start()
        t0 = time.perf_counter()
        with track_kernel_allocations() as log:
            full = generate_full_kernels(image, full_w, None, M, N, K, cap=cap)
        naive_guided_conv(depth, full)
        naive_seconds = time.perf_counter() - t0
        naive_peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        naive_bytes = sum(n for _, n in log)
    return Measurement(report, naive_bytes, fact_bytes, naive_seconds, fact_seconds, naive_peak, fact_peak)
