import csv
import io
from pathlib import Path

import pytest

from patconv import ValidationError
from patconv.bench import (CSV_COLUMNS, SUITES, VARIANTS, run_bench, run_pattern_sweep,
                           suite_layers)

GOLDEN = Path(__file__).parent / "golden" / "toy_bench_structure.csv"
TIMED = ("median_ms", "min_ms", "gflops")


@pytest.fixture(scope="module")
def toy_report():
    return run_bench("toy", threads=2, reps=10, seed=3)


def test_csv_schema_golden(toy_report):
    rows = list(csv.DictReader(io.StringIO(toy_report.to_csv())))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    kept = [c for c in CSV_COLUMNS if c not in TIMED]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(kept)
    for r in rows:
        w.writerow([r[c] for c in kept])
    assert buf.getvalue() == GOLDEN.read_text()


def test_timing_fields(toy_report):
    for r in toy_report.rows:
        assert len(r.times_ms) == r.reps == 10
        assert r.min_ms <= r.median_ms
        assert r.gflops > 0
    pattern = toy_report.select(layer="toy1", variant="pattern")[0]
    # 16 filters x 4 kept kernels x 4 taps x 16 x 16 positions
    assert pattern.gflops == pytest.approx(2 * 16 * 4 * 4 * 256 / (pattern.median_ms * 1e6))


def test_write_csv(toy_report, tmp_path):
    path = tmp_path / "b.csv"
    toy_report.write_csv(path)
    assert path.read_text() == toy_report.to_csv()
    assert toy_report.total_median_ms(variant="csr") > 0
    assert "toy3" in toy_report.summary()


def test_vgg16_suite_shapes():
    layers = suite_layers("vgg16")
    assert len(layers) == 9
    assert len({(bl.channels, bl.filters, bl.h) for bl in layers}) == 9
    assert all(bl.kernel == 3 and bl.stride == 1 for bl in layers)


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suites_have_valid_specs(suite):
    for bl in suite_layers(suite):
        ho, wo = bl.spec.output_hw(bl.h, bl.w)
        assert ho >= 1 and wo >= 1


def test_mobilenet_rows_skip_pattern_for_pointwise():
    rep = run_bench("mobilenetv2-shapes", threads=1, reps=10, variants=("csr",))
    assert {r.k for r in rep.rows if r.layer.startswith("pw")} == {0}
    assert {r.variant for r in rep.rows} == {"csr"}


def test_sweep_rows():
    rep = run_pattern_sweep("toy", threads=1, reps=10)
    assert [(r.layer, r.k) for r in rep.rows][:3] == [("toy1", 4), ("toy1", 8), ("toy1", 12)]
    assert {r.variant for r in rep.rows} == {"pattern"}


@pytest.mark.parametrize("kwargs", [dict(suite="alexnet"), dict(suite="toy", reps=0),
                                    dict(suite="toy", reps=9),
                                    dict(suite="toy", variants=("winograd",))])
def test_bench_errors(kwargs):
    with pytest.raises(ValidationError):
        run_bench(**kwargs)


def test_variants_constant():
    assert VARIANTS == ("dense_im2col", "csr", "pattern")
