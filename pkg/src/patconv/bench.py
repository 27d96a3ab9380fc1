"""Benchmark harness comparing dense im2col, CSR and compiled pattern execution.

Each layer of a suite gets seeded random weights, is pruned with ``k``
patterns and a connectivity keep ratio, and is then timed under every
variant. Timing is 3 untimed warmups followed by ``reps`` timed runs; the
CSV reports the median and minimum.

Variants are timed in separate blocks with a short pause after the dense
block: BLAS worker threads keep spinning for a while after a GEMM and would
otherwise steal the core from whatever runs next. The pattern-count sweep
only times the pattern executor, so there the ``k`` values are interleaved
run by run, which spreads machine noise evenly over them.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .compiler import compile_layer
from .errors import ValidationError
from .executor import CsrSparseLayer, csr_execute, execute_plan
from .model import to_dense
from .patterns import extended_pattern_set
from .pruning import connectivity_prune, prune_layer
from .tensor import ConvSpec, DenseConvLayer, Tensor4D, conv2d_im2col, mac_count

__all__ = [
    "BenchLayer",
    "BenchRow",
    "BenchReport",
    "SUITES",
    "CSV_COLUMNS",
    "VARIANTS",
    "suite_layers",
    "run_bench",
    "run_pattern_sweep",
]

CSV_COLUMNS = ("suite", "layer", "H", "W", "C", "F", "k", "keep_ratio", "variant", "threads",
               "reps", "median_ms", "min_ms", "gflops")
VARIANTS = ("dense_im2col", "csr", "pattern")
WARMUP = 3
MIN_REPS = 10
BLAS_SETTLE_S = 0.25


@dataclass(frozen=True)
class BenchLayer:
    name: str
    channels: int
    filters: int
    h: int
    w: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(self.kernel, self.kernel, self.stride, self.padding)


def _vgg16():
    dims = [(3, 64, 224), (64, 64, 224), (64, 128, 112), (128, 128, 112), (128, 256, 56),
            (256, 256, 56), (256, 512, 28), (512, 512, 28), (512, 512, 14)]
    names = ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv4_1",
             "conv4_2", "conv5_1"]
    return [BenchLayer(n, c, f, s, s) for n, (c, f, s) in zip(names, dims)]


def _resnet50():
    # stride-1 3x3 convs of the four bottleneck stages
    return [BenchLayer(f"res{i + 2}_3x3", c, c, s, s)
            for i, (c, s) in enumerate([(64, 56), (128, 28), (256, 14), (512, 7)])]


def _mobilenetv2():
    # 225 input so the unpadded stride-2 stem lands exactly on 112x112
    stem = BenchLayer("stem", 3, 32, 225, 225, 3, 2, 0)
    pointwise = [(16, 96, 112), (24, 144, 56), (32, 192, 28), (64, 384, 14), (96, 576, 14),
                 (160, 960, 7), (320, 1280, 7)]
    return [stem] + [BenchLayer(f"pw{i + 1}", c, f, s, s, 1, 1, 0)
                     for i, (c, f, s) in enumerate(pointwise)]


def _toy():
    return [BenchLayer("toy1", 8, 16, 16, 16), BenchLayer("toy2", 16, 16, 16, 16),
            BenchLayer("toy3", 16, 32, 8, 8)]


SUITES: Dict[str, Callable[[], List[BenchLayer]]] = {
    "vgg16": _vgg16,
    "resnet50-shapes": _resnet50,
    "mobilenetv2-shapes": _mobilenetv2,
    "toy": _toy,
}


def suite_layers(suite: str) -> List[BenchLayer]:
    if suite not in SUITES:
        raise ValidationError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    return SUITES[suite]()


@dataclass(frozen=True)
class BenchRow:
    suite: str
    layer: str
    H: int
    W: int
    C: int
    F: int
    k: int
    keep_ratio: float
    variant: str
    threads: int
    reps: int
    median_ms: float
    min_ms: float
    gflops: float
    times_ms: Tuple[float, ...] = field(default=(), repr=False, compare=False)

    def csv_values(self):
        d = asdict(self)
        d["median_ms"] = f"{self.median_ms:.4f}"
        d["min_ms"] = f"{self.min_ms:.4f}"
        d["gflops"] = f"{self.gflops:.4f}"
        return [d[c] for c in CSV_COLUMNS]


@dataclass
class BenchReport:
    rows: List[BenchRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_values())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def select(self, **match) -> List[BenchRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def total_median_ms(self, **match) -> float:
        return float(sum(r.median_ms for r in self.select(**match)))

    def summary(self) -> str:
        lines = [f"{'layer':<10} {'variant':<13} {'k':>3} {'median_ms':>10} {'gflops':>8}"]
        for r in self.rows:
            lines.append(f"{r.layer:<10} {r.variant:<13} {r.k:>3} {r.median_ms:>10.3f} "
                         f"{r.gflops:>8.2f}")
        return "\n".join(lines)


def _check_reps(reps):
    if reps < MIN_REPS:
        raise ValidationError(f"reps must be at least {MIN_REPS}, got {reps}")


def _time(fn, reps) -> List[float]:
    for _ in range(WARMUP):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def _row(suite, bl, k, keep, variant, threads, times, macs):
    med = statistics.median(times)
    return BenchRow(suite, bl.name, bl.h, bl.w, bl.channels, bl.filters, k, keep, variant,
                    threads, len(times), med, min(times), 2.0 * macs / (med * 1e6),
                    tuple(times))


def _case(bl: BenchLayer, seed: int, batch: int = 1):
    rng = np.random.default_rng([seed, bl.channels, bl.filters, bl.h, bl.kernel])
    dense = DenseConvLayer.random(bl.filters, bl.channels, bl.kernel, bl.kernel, rng, bias=True)
    x = Tensor4D.random((batch, bl.channels, bl.h, bl.w), rng)
    return dense, x


def _dense_runner(dense, x, spec, threads):
    def run():
        with threadpool_limits(threads):
            conv2d_im2col(x, dense, spec)
    return run


def run_bench(suite: str, *, threads: int = 4, reps: int = 10, k: int = 4,
              keep_ratio: float = 0.5, variants: Sequence[str] = VARIANTS, seed: int = 0,
              progress: Optional[Callable[[str], None]] = None) -> BenchReport:
    """Time every layer of ``suite`` under each variant.

    Sparse variants run on the same pruned weights. 1x1 layers have no
    patterns; they are connectivity-pruned only and timed as dense and CSR
    (``k`` is reported as 0). GFLOPS counts 2 FLOPs per multiply-add the
    variant actually performs.
    """
    _check_reps(reps)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValidationError(f"unknown variants {sorted(unknown)}")
    layers = suite_layers(suite)
    rows = []
    for bl in layers:
        dense, x = _case(bl, seed)
        spec = bl.spec
        if bl.kernel == 3:
            pruned = prune_layer(dense, extended_pattern_set(k), keep_ratio, balanced=True)
            sparse_dense = to_dense(pruned)
            row_k = k
        else:
            keep = connectivity_prune(dense, keep_ratio, balanced=True)
            sparse_dense = DenseConvLayer(dense.weights * keep[:, :, None, None], dense.bias)
            pruned = None
            row_k = 0
        ho, wo = spec.output_hw(bl.h, bl.w)
        sparse_macs = x.n * ho * wo * int(np.count_nonzero(sparse_dense.weights))
        for variant in variants:
            if variant == "dense_im2col":
                times = _time(_dense_runner(dense, x, spec, threads), reps)
                macs = mac_count(dense, spec, x)
                time.sleep(BLAS_SETTLE_S)
            elif variant == "csr":
                csr = CsrSparseLayer.from_dense(sparse_dense)
                times = _time(lambda: csr_execute(csr, spec, x, threads=threads), reps)
                macs = sparse_macs
            else:
                if pruned is None:
                    continue
                plan = compile_layer(pruned, spec, (bl.h, bl.w), threads, bl.name)
                times = _time(lambda: execute_plan(plan, pruned, x), reps)
                macs = mac_count(pruned, spec, x)
            rows.append(_row(suite, bl, row_k, keep_ratio, variant, threads, times, macs))
            if progress:
                progress(f"{bl.name} {variant}: median {rows[-1].median_ms:.2f} ms")
    return BenchReport(rows)


def run_pattern_sweep(suite: str, *, ks: Sequence[int] = (4, 8, 12), threads: int = 4,
                      reps: int = 10, keep_ratio: float = 0.5, seed: int = 0,
                      progress: Optional[Callable[[str], None]] = None) -> BenchReport:
    """Pattern executor time per layer for several pattern-library sizes.

    All ``k`` share the same dense weights and input, so they differ only in
    the pattern library; runs alternate between the ``k`` values.
    """
    _check_reps(reps)
    rows = []
    for bl in suite_layers(suite):
        if bl.kernel != 3:
            continue
        dense, x = _case(bl, seed)
        spec = bl.spec
        runners = {}
        macs = {}
        for k in ks:
            pruned = prune_layer(dense, extended_pattern_set(k), keep_ratio, balanced=True)
            plan = compile_layer(pruned, spec, (bl.h, bl.w), threads, bl.name)
            runners[k] = (lambda p=plan, l=pruned: execute_plan(p, l, x))
            macs[k] = mac_count(pruned, spec, x)
        for _ in range(WARMUP):
            for k in ks:
                runners[k]()
        times = {k: [] for k in ks}
        for _ in range(reps):
            for k in ks:
                t0 = time.perf_counter()
                runners[k]()
                times[k].append((time.perf_counter() - t0) * 1e3)
        for k in ks:
            rows.append(_row(suite, bl, k, keep_ratio, "pattern", threads, times[k], macs[k]))
        if progress:
            progress(f"{bl.name}: " + ", ".join(f"k={k} {statistics.median(times[k]):.2f} ms"
                                                for k in ks))
    return BenchReport(rows)
