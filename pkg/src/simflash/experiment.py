"""Experiment configs, paired runs, reports, sweeps and export."""
import csv
import dataclasses
import functools
import io
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from simflash.reliability import DEFAULT_CONFIG, ReliabilityConfig
from simflash.chip import ChipGeometry, ChipTiming
from simflash.controller import ENERGY_CATEGORIES, AJ_PER_J, Controller, PowerConfig
from simflash.index import BaselineHost, SimHost, TopLevelIndex, preload, random_leafset
from simflash.layout import SLOTS
from simflash.workload import FULL_READ, GET, WorkloadSpec, export_log, run, sample

DESK_INDEX_PAGES = 16384  # 64 MiB


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class WorkloadConfig:
    op_count: int = 100_000
    read_ratio: float = 1.0
    distribution: str = "uniform"
    alpha: float = 0.9
    full_page_read_ratio: float = 0.0
    warmup_fraction: float = 0.3
    queue_depth: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: ChipGeometry = ChipGeometry()
    timing: ChipTiming = ChipTiming()
    power: PowerConfig = PowerConfig()
    reliability: ReliabilityConfig = DEFAULT_CONFIG
    index_pages: int = DESK_INDEX_PAGES
    cache_coverage: float = 0.25
    workload: WorkloadConfig = WorkloadConfig()
    mode: str = "sim"
    scheduler: str = "fcfs"
    deadline_ns: int = 4000
    seed: int = 0
    log_events: bool = False
    output: str = None

    def __post_init__(self):
        if self.mode not in ("baseline", "sim"):
            raise ConfigError("mode", f"expected baseline or sim, got {self.mode!r}")
        if self.scheduler not in ("fcfs", "deadline"):
            raise ConfigError("scheduler", f"expected fcfs or deadline, got {self.scheduler!r}")
        if not 0.0 <= self.cache_coverage <= 1.0:
            raise ConfigError("cache_coverage", "must be in [0, 1]")
        if self.index_pages < 2 or self.index_pages % 2:
            raise ConfigError("index_pages", "must be a positive even number")
        if self.index_pages > self.geometry.total_pages:
            raise ConfigError("index_pages", "larger than the simulated flash")
        if self.deadline_ns < 0:
            raise ConfigError("deadline_ns", "must be >= 0")

    @property
    def cache_pages(self):
        return int(round(self.cache_coverage * self.index_pages))

    @property
    def key_count(self):
        return self.index_pages // 2 * SLOTS

    def workload_spec(self):
        w = self.workload
        dist, alpha = parse_distribution(w.distribution, w.alpha)
        try:
            return WorkloadSpec(self.key_count, w.op_count, w.read_ratio, dist, alpha,
                                w.full_page_read_ratio, w.warmup_fraction, w.queue_depth,
                                seed=self.seed)
        except ValueError as exc:
            raise ConfigError("workload", str(exc)) from None

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)


def parse_distribution(text, alpha):
    """``"uniform"``, ``"zipf"`` or ``"zipf:<alpha>"``."""
    if text == "uniform":
        return "uniform", alpha
    if text == "zipf":
        return "zipf", alpha
    if text.startswith("zipf:"):
        try:
            return "zipf", float(text[5:])
        except ValueError:
            pass
    raise ConfigError("workload.distribution", f"cannot parse {text!r}")


_SECTIONS = {"geometry": ChipGeometry, "timing": ChipTiming, "power": PowerConfig,
             "reliability": ReliabilityConfig, "workload": WorkloadConfig}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown field")
    kwargs = {}
    for k, v in data.items():
        sub = f"{path}.{k}" if path else k
        if k in _SECTIONS and cls is ExperimentConfig:
            v = _build(_SECTIONS[k], v, sub)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def config_from_dict(data):
    return _build(ExperimentConfig, data, "")


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def set_path(data, dotted, value):
    """Copy of a nested config dict with ``dotted`` set to ``value``."""
    out = json.loads(json.dumps(data))
    node = out
    *head, last = dotted.split(".")
    for k in head:
        node = node.setdefault(k, {})
    node[last] = value
    return out


# -- presets ---------------------------------------------------------------------

def low_power_bus_preset():
    """Per-query transfer model of the SiM vs full-page comparison table.

    1.8 V bus; match mode at 40 MT/s drawing 11 mA, full-page mode at
    1600 MT/s drawing 152 mA.  The comparison covers only result bytes, so the
    open-time verification transfer is left out.
    """
    return ExperimentConfig(
        timing=ChipTiming(match_rate_mts=40.0, storage_rate_mts=1600.0, open_transfer_bytes=0),
        power=PowerConfig(bus_mv=1800, bus_match_ua=11000, bus_storage_ua=152000))


PRESETS = {"default": ExperimentConfig, "low_power_bus": low_power_bus_preset}


# -- reports ---------------------------------------------------------------------

REPORT_FIELDS = (
    "mode", "seed", "ops", "elapsed_ns", "qps",
    "read_p25_ns", "read_p50_ns", "read_p75_ns", "read_p99_ns",
    *(f"energy_{c}_j" for c in ENERGY_CATEGORIES), "energy_total_j",
    "bytes_internal", "bytes_host_read", "bytes_host_write",
    "programs", "erases", "gc_runs", "merge_probability", "ecc_fallbacks",
)


@dataclass
class Report:
    mode: str
    seed: int
    ops: int
    elapsed_ns: int
    qps: float
    read_p25_ns: float
    read_p50_ns: float
    read_p75_ns: float
    read_p99_ns: float
    energy_aj: dict
    bytes_internal: int
    bytes_host_read: int
    bytes_host_write: int
    programs: int
    erases: int
    gc_runs: int
    merge_probability: float
    ecc_fallbacks: int
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def energy_j(self):
        return {k: v / AJ_PER_J for k, v in self.energy_aj.items()}

    @property
    def energy_total_j(self):
        return sum(self.energy_aj.values()) / AJ_PER_J

    def row(self):
        d = {k: getattr(self, k) for k in REPORT_FIELDS if hasattr(self, k)}
        for c in ENERGY_CATEGORIES:
            d[f"energy_{c}_j"] = self.energy_aj[c] / AJ_PER_J
        d["energy_total_j"] = self.energy_total_j
        return {k: d[k] for k in REPORT_FIELDS}


def fmt(v):
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def _pct(samples, q):
    return float(np.percentile(samples, q)) if len(samples) else float("nan")


@functools.lru_cache(maxsize=4)
def _leafset(index_pages, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1DE7]))
    return random_leafset(index_pages // 2 * SLOTS, rng)


def build_system(cfg):
    """Controller with the index preloaded, plus the host for ``cfg.mode``."""
    leaves = _leafset(cfg.index_pages, cfg.seed)
    ctl = Controller(cfg.geometry, cfg.timing, cfg.power, cfg.reliability,
                     provisioned=cfg.index_pages, scheduler=cfg.scheduler,
                     deadline_ns=cfg.deadline_ns, seed=cfg.seed, log_events=cfg.log_events)
    preload(ctl, leaves)
    cls = SimHost if cfg.mode == "sim" else BaselineHost
    host = cls(ctl, TopLevelIndex(leaves.first_keys()), cfg.cache_pages)
    return leaves, ctl, host


def run_experiment(cfg):
    """Run one configuration; returns its :class:`Report` (raw logs in ``extras``)."""
    spec = cfg.workload_spec()
    leaves, ctl, host = build_system(cfg)
    mark = {}

    def on_start(now):
        mark["t"] = now
        mark["snap"] = ctl.snapshot()
        mark["stats"] = dataclasses.replace(ctl.stats, bus_active_ns=None)
        mark["programs"] = host.programs

    log = run(spec, host, leaves.keys, sample(spec), on_measure_start=on_start)
    measured = [r for r in log if not r.warmup]
    if not measured:
        raise ConfigError("workload", "no ops outside the warmup window")
    if "snap" not in mark:
        on_start(measured[0].start)
    t0 = min(r.start for r in measured)
    t1 = max(r.end for r in measured)
    elapsed = t1 - t0
    reads = np.array([r.latency for r in measured if r.kind in (GET, FULL_READ)], dtype=np.int64)
    since_led, since_active, since_events = mark["snap"]
    led = ctl.ledger_with_idle(elapsed, since=(since_led, since_active))
    s0 = mark["stats"]
    st = ctl.stats
    searches = st.searches - s0.searches
    merged = st.merged_searches - s0.merged_searches
    internal = st.internal_bytes - s0.internal_bytes
    rep = Report(
        mode=cfg.mode, seed=cfg.seed, ops=len(measured), elapsed_ns=elapsed,
        qps=len(measured) / (elapsed * 1e-9) if elapsed else float("inf"),
        read_p25_ns=_pct(reads, 25), read_p50_ns=_pct(reads, 50),
        read_p75_ns=_pct(reads, 75), read_p99_ns=_pct(reads, 99),
        energy_aj=dict(led.aj), bytes_internal=internal,
        bytes_host_read=sum(r.host_bytes for r in measured),
        bytes_host_write=(host.programs - mark["programs"]) * 4096,
        programs=st.programs - s0.programs, erases=st.erases - s0.erases,
        gc_runs=st.gc_runs - s0.gc_runs,
        merge_probability=merged / searches if searches else 0.0,
        ecc_fallbacks=st.ecc_fallbacks - s0.ecc_fallbacks)
    rep.extras = {"log": log, "controller": ctl, "host": host, "event_start": since_events,
                  "elapsed_ns": elapsed}
    if cfg.output:
        os.makedirs(cfg.output, exist_ok=True)
        stem = os.path.join(cfg.output, f"{cfg.mode}_seed{cfg.seed}")
        report_export(rep, stem + ".json", "json")
        report_export(rep, stem + ".csv", "csv")
        export_log(log, stem + "_ops.csv")
        if cfg.log_events:
            ctl.export_events(stem + "_events.csv", since_events)
    return rep


def report_text(report, fmt_name):
    row = report.row()
    if fmt_name == "json":
        body = ",\n".join(f"  {json.dumps(k)}: {_json_value(v)}" for k, v in row.items())
        return "{\n" + body + "\n}\n"
    if fmt_name == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(row.keys())
        w.writerow(fmt(v) for v in row.values())
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt_name!r}")


def _json_value(v):
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float) and not np.isfinite(v):
        return json.dumps(str(v))
    return fmt(v)


def report_export(report, path, fmt_name=None):
    fmt_name = fmt_name or os.path.splitext(path)[1].lstrip(".")
    text = report_text(report, fmt_name)
    with open(path, "w") as f:
        f.write(text)
    return path


def parse_report(text, fmt_name):
    """Inverse of :func:`report_text`: the exported row as a dict."""
    if fmt_name == "json":
        return json.loads(text)
    if fmt_name == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        out = {}
        for k, v in zip(rows[0], rows[1]):
            try:
                out[k] = int(v)
            except ValueError:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
        return out
    raise ValueError(f"unknown report format {fmt_name!r}")


# -- sweeps ------------------------------------------------------------------------

SWEEP_METRICS = ("qps", "read_p25_ns", "read_p50_ns", "read_p75_ns", "read_p99_ns",
                 "energy_total_j", "bytes_internal", "bytes_host_read", "programs",
                 "merge_probability")


def grid_cells(grid):
    """Expand ``{"base": {...}, "axes": {"dotted.path": [values]}}`` into config dicts."""
    if not isinstance(grid, dict) or "axes" not in grid:
        raise ConfigError("axes", "grid needs an 'axes' object")
    base = grid.get("base", {})
    axes = grid["axes"]
    if not axes or any(not isinstance(v, list) or not v for v in axes.values()):
        raise ConfigError("axes", "every axis needs a non-empty list")
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        d = base
        for n, v in zip(names, combo):
            d = set_path(d, n, v)
        cells.append((dict(zip(names, combo)), d))
    return cells


def _run_pair(cell_dict):
    cfg = config_from_dict(cell_dict)
    out = {}
    for mode in ("baseline", "sim"):
        out[mode] = run_experiment(cfg.with_(mode=mode, output=None)).row()
    return out


def sweep(grid, jobs=1):
    """Paired baseline/SiM runs for every grid cell; returns (header, rows)."""
    cells = grid_cells(grid)
    for _, d in cells:
        config_from_dict(d)  # fail fast on a bad cell
    dicts = [d for _, d in cells]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_pair, dicts))
    else:
        results = [_run_pair(d) for d in dicts]
    axis_names = list(cells[0][0])
    header = axis_names + [f"{m}_{k}" for m in ("baseline", "sim") for k in SWEEP_METRICS] + [
        "speedup", "energy_ratio", "latency_reduction"]
    rows = []
    for (axes, _), res in zip(cells, results):
        b, s = res["baseline"], res["sim"]
        row = [axes[n] for n in axis_names]
        row += [b[k] for k in SWEEP_METRICS] + [s[k] for k in SWEEP_METRICS]
        row.append(s["qps"] / b["qps"] if b["qps"] else float("nan"))
        row.append(s["energy_total_j"] / b["energy_total_j"] if b["energy_total_j"] else float("nan"))
        row.append(1.0 - s["read_p50_ns"] / b["read_p50_ns"] if b["read_p50_ns"] else float("nan"))
        rows.append(row)
    return header, rows


def write_matrix(header, rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(fmt(v) for v in r)
