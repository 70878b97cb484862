import numpy as np

from icam.autograd import Tensor
from icam.bench import Tracker, aafm_forward, bench_attention, bench_one, fit_slopes, growth_exponent, mha_forward
from icam.model import aafm, adaptation_bias
from icam.instances import pairwise_distances


def test_bench_kernel_matches_model_aafm(rng):
    n, d = 300, 6
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    coords = rng.random((n, 2))
    a = adaptation_bias(n, pairwise_distances(coords), 0.7)
    want = aafm(Tensor(q), Tensor(k), Tensor(v), Tensor(a)).data
    assert np.abs(aafm_forward(q, k, v, coords, alpha=0.7, chunk=64) - want).max() <= 1e-10


def test_mha_rows_are_convex_combinations(rng):
    q, k = rng.standard_normal((20, 16)), rng.standard_normal((20, 16))
    v = np.ones((20, 16))
    assert np.allclose(mha_forward(q, k, v), 1.0)


def test_aafm_never_forms_square_intermediate(rng):
    n, d = 1024, 32
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    tr = Tracker()
    aafm_forward(q, k, v, rng.random((n, 2)), track=tr)
    assert all(shape[:2] != (n, n) for shape in tr.shapes)
    assert tr.peak <= max(n * d, 128 * n * 2) * 8


def test_growth_exponent():
    xs = [1, 2, 4, 8]
    assert abs(growth_exponent(xs, [3 * x ** 2 for x in xs]) - 2.0) <= 1e-12


def test_record_fields():
    r = bench_one("aafm", 128, d=16, repeats=1)
    assert r.n == 128 and r.d == 16 and r.seconds > 0 and r.peak_bytes > 0


def test_space_slopes_short_ladder():
    recs = bench_attention((256, 512, 1024), d=32, repeats=1)
    s = fit_slopes(recs)
    assert 0.8 <= s["aafm"]["space"] <= 1.2
    assert 1.8 <= s["mha"]["space"] <= 2.2
