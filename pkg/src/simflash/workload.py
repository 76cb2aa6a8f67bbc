"""YCSB-style closed-loop workloads: key sampling, op mix, warmup window."""
import csv
from dataclasses import dataclass

import numpy as np

GET, PUT, FULL_READ = "get", "put", "full_read"
OP_KINDS = (GET, PUT, FULL_READ)


@dataclass(frozen=True)
class WorkloadSpec:
    key_count: int
    op_count: int
    read_ratio: float = 1.0
    distribution: str = "uniform"  # or "zipf"
    alpha: float = 0.9
    full_page_read_ratio: float = 0.0
    warmup_fraction: float = 0.3
    queue_depth: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.key_count < 1:
            raise ValueError("key_count must be >= 1")
        if self.op_count < 1:
            raise ValueError("op_count must be >= 1")
        for name in ("read_ratio", "full_page_read_ratio", "warmup_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.distribution not in ("uniform", "zipf"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "zipf" and self.alpha <= 0:
            raise ValueError("zipf alpha must be > 0")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")

    @property
    def warmup_ops(self):
        return int(self.op_count * self.warmup_fraction)


class ZipfSampler:
    """Exact Zipf over ranks 1..n: P(r) = r**-alpha / H(n, alpha), by inverse CDF."""

    def __init__(self, n, alpha):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.alpha = alpha
        w = np.arange(1, n + 1, dtype=np.float64) ** -alpha
        self.harmonic = float(w.sum())
        self.cdf = np.cumsum(w) / self.harmonic
        self.cdf[-1] = 1.0

    def pmf(self, rank):
        return rank ** -self.alpha / self.harmonic

    def sample(self, rng, size):
        """Ranks, 1-based."""
        u = rng.random(size)
        return np.searchsorted(self.cdf, u, side="right") + 1


def fit_zipf_n(alpha, top_mass, lo=2, hi=1 << 24):
    """Smallest n whose top-rank mass is <= ``top_mass`` (mass falls as n grows)."""
    def top(n):
        return 1.0 / float(np.sum(np.arange(1, n + 1, dtype=np.float64) ** -alpha))
    if top(lo) <= top_mass:
        return lo
    while lo < hi:
        mid = (lo + hi) // 2
        if top(mid) <= top_mass:
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass
class OpStream:
    kinds: np.ndarray   # indices into OP_KINDS
    key_ids: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.kinds)

    def op(self, i):
        return OP_KINDS[self.kinds[i]], int(self.key_ids[i]), int(self.values[i])


def sample(spec, rng=None):
    """The whole op sequence for ``spec``; deterministic in ``spec.seed`` unless ``rng`` given."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.op_count
    if spec.distribution == "zipf":
        ranks = ZipfSampler(spec.key_count, spec.alpha).sample(rng, n)
        perm = rng.permutation(spec.key_count)
        key_ids = perm[ranks - 1]
    else:
        key_ids = rng.integers(0, spec.key_count, size=n)
    u = rng.random(n)
    v = rng.random(n)
    kinds = np.where(u < spec.read_ratio,
                     np.where(v < spec.full_page_read_ratio, 2, 0), 1).astype(np.int8)
    values = rng.integers(0, 1 << 63, size=n, dtype=np.uint64)
    return OpStream(kinds, key_ids.astype(np.int64), values)


@dataclass
class OpRecord:
    index: int
    kind: str
    key_id: int
    start: int
    end: int
    host_bytes: int
    warmup: bool

    @property
    def latency(self):
        return self.end - self.start


def run(spec, host, keys, stream=None, on_measure_start=None):
    """Closed loop: ``queue_depth`` clients each issue the next op when their last one ends.

    ``keys`` maps key id to the 64-bit key.  ``on_measure_start`` is called
    once, when the first non-warmup op is issued.  Returns the op log in
    issue order.
    """
    stream = sample(spec) if stream is None else stream
    env = host.env
    log = [None] * len(stream)
    state = {"next": 0, "marked": False}
    warm = spec.warmup_ops

    def client():
        while state["next"] < len(stream):
            i = state["next"]
            state["next"] += 1
            kind, kid, value = stream.op(i)
            if i >= warm and not state["marked"]:
                state["marked"] = True
                if on_measure_start is not None:
                    on_measure_start(env.now)
            key = int(keys[kid])
            start = env.now
            if kind == GET:
                res = yield from host.get(key)
            elif kind == PUT:
                res = yield from host.put(key, value)
            else:
                res = yield from host.full_page_read(key)
            log[i] = OpRecord(i, kind, kid, start, env.now, res.host_bytes, i < warm)

    procs = [env.process(client()) for _ in range(spec.queue_depth)]
    env.run(until=env.all_of(procs))
    return log


def export_log(log, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("index", "kind", "key_id", "start_ns", "end_ns", "host_bytes", "warmup"))
        for r in log:
            w.writerow((r.index, r.kind, r.key_id, r.start, r.end, r.host_bytes, int(r.warmup)))
