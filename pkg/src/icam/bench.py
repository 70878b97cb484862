"""Time / memory micro-benchmark: AAFM pooling versus softmax attention.

Both kernels are forward-only numpy. Memory is the largest single
intermediate array each kernel allocates, which isolates the algorithmic
space term; a tracemalloc peak is recorded alongside for reference.
"""

import math
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

N_LADDER = (128, 256, 512, 1024, 2048)


@dataclass
class BenchRecord:
    mechanism: str
    n: int
    d: int
    seconds: float
    peak_bytes: int
    traced_bytes: int = 0
    largest_shape: tuple = ()

    def to_dict(self):
        return asdict(self)


class Tracker:
    def __init__(self):
        self.peak = 0
        self.shape = ()
        self.shapes = []

    def __call__(self, arr):
        self.shapes.append(arr.shape)
        if arr.nbytes > self.peak:
            self.peak, self.shape = arr.nbytes, arr.shape
        return arr


def aafm_forward(q, k, v, coords, alpha=1.0, chunk=128, track=None):
    """AAFM with the adaptation bias generated row-block by row-block from coordinates.

    No (N, N) array is ever formed: bias, weights and distances exist only
    for ``chunk`` query rows at a time.
    """
    track = track or (lambda a: a)
    n = q.shape[0]
    scale = -alpha * math.log2(n)
    ek = track(np.exp(k - k.max(axis=0, keepdims=True)))
    ekv = track(ek * v)
    out = track(np.empty_like(q))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        diff = track(coords[lo:hi, None, :] - coords[None, :, :])
        a = track(scale * np.sqrt((diff * diff).sum(-1)))
        w = track(np.exp(a - a.max(axis=1, keepdims=True)))
        num = track(w @ ekv)
        den = track(w @ ek)
        out[lo:hi] = 0.5 * (np.tanh(0.5 * q[lo:hi]) + 1.0) * num / den
    return out


def mha_forward(q, k, v, heads=8, track=None):
    """Scaled dot-product attention; heads are processed one at a time."""
    track = track or (lambda a: a)
    n, d = q.shape
    dh = d // heads
    out = track(np.empty_like(q))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = track(q[:, sl] @ k[:, sl].T / math.sqrt(dh))
        e = track(np.exp(s - s.max(axis=1, keepdims=True)))
        out[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ v[:, sl]
    return out


KERNELS = {"aafm": aafm_forward, "mha": mha_forward}


def _inputs(n, d, seed):
    rng = np.random.default_rng([seed, n, d])
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    return q, k, v, rng.random((n, 2))


def bench_one(mechanism, n, d=128, repeats=3, seed=0):
    q, k, v, coords = _inputs(n, d, seed)

    def run(track=None):
        if mechanism == "aafm":
            return aafm_forward(q, k, v, coords, track=track)
        return mha_forward(q, k, v, track=track)

    tracker = Tracker()
    run(tracker)
    tracemalloc.start()
    run()
    _, traced = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return BenchRecord(mechanism, n, d, min(times), tracker.peak, traced, tracker.shape)


def bench_attention(ns=N_LADDER, d=128, repeats=3, mechanisms=("aafm", "mha"), seed=0):
    return [bench_one(m, n, d, repeats, seed) for m in mechanisms for n in ns]


def growth_exponent(xs, ys):
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def fit_slopes(records):
    out = {}
    for mech in sorted({r.mechanism for r in records}):
        rs = sorted((r for r in records if r.mechanism == mech), key=lambda r: r.n)
        ns = [r.n for r in rs]
        out[mech] = {
            "space": growth_exponent(ns, [r.peak_bytes for r in rs]),
            "time": growth_exponent(ns, [r.seconds for r in rs]),
        }
    return out
