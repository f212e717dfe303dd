"""Timing harness: settings / proof / verify per module over loopback sessions.

Each repetition starts a fresh contributor (cold generator derivation plus
row commitments, the "settings" phase), runs one session that exchanges a
random activation for every module, requests the proof bundle and verifies
it on the calling thread.  Timings are wall-clock, monotonic.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .commitments import clear_key_cache
from .field import DEFAULT_PROFILE, DeploymentProfile
from .lora_proof import FailureReason, OpeningBudget, verify_bundle
from .mpi.client import UserSession, _connect
from .mpi.server import Contributor, start_contributor
from .mpi.wire import Channel
from .quantizer import overflow_check
from .tensorio import synthetic_chain

__all__ = [
    "RegimeTooLarge",
    "Regime",
    "BenchSpec",
    "BenchRow",
    "ModuleTiming",
    "TrendReport",
    "SIZE_REGIMES",
    "COUNT_SWEEP",
    "CSV_COLUMNS",
    "run_regime",
    "run_scaling_bench",
    "write_rows",
    "read_rows",
    "load_reference",
    "compare_reference",
    "linear_fit",
    "repetition_totals",
]

CSV_COLUMNS = ["regime_id", "num_loras", "avg_lora_size", "avg_settings_ms", "avg_proof_ms",
               "avg_verify_ms", "total_verify_ms", "median_verify_ms"]
LONG_COLUMNS = ["regime_id", "repetition", "module_id", "num_loras", "lora_size", "settings_ms",
                "proof_ms", "verify_ms"]

REFERENCE_CSV = Path(__file__).with_name("data") / "reference_timings.csv"

# (num_modules, n, d, r) per row of the published table, dims chosen so that
# r·(n+d) equals the listed average adapter size
SIZE_REGIMES = [
    (24, 512, 512, 24),
    (48, 768, 768, 32),
    (32, 2048, 1280, 8),
    (80, 8192, 1024, 16),
    (32, 4096, 1024, 32),
    (32, 4096, 4096, 40),
]
COUNT_SWEEP = (8, 16, 32, 48, 80)

MEMORY_LIMIT = 8 << 30


class RegimeTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Regime:
    num_modules: int
    n: int
    d: int
    r: int

    @property
    def lora_size(self) -> int:
        return self.r * (self.n + self.d)


@dataclass
class BenchSpec:
    regimes: list
    m: int = 15
    repetitions: int = 3
    seed: int = 0
    parallel_prove: bool = False
    smoke: bool = False  # permits fewer than 3 repetitions for quick checks
    interleave: bool = False  # round-robin over regimes per repetition; holds all regimes in memory

    def __post_init__(self):
        self.regimes = [r if isinstance(r, Regime) else Regime(*r) for r in self.regimes]
        if not self.regimes:
            raise ValueError("at least one regime is required")
        if self.repetitions < 1 or (self.repetitions < 3 and not self.smoke):
            raise ValueError("repetitions must be >= 3")
        if self.m < 1:
            raise ValueError("m must be positive")
        for g in self.regimes:
            if min(g.num_modules, g.n, g.d, g.r) < 1:
                raise ValueError(f"bad regime {g}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regimes"] = [asdict(g) for g in self.regimes]
        return d


@dataclass
class ModuleTiming:
    regime_id: int
    repetition: int
    module_id: int
    num_loras: int
    lora_size: int
    settings_ms: float
    proof_ms: float
    verify_ms: float


@dataclass
class BenchRow:
    regime_id: int
    num_loras: int
    avg_lora_size: int
    avg_settings_ms: float
    avg_proof_ms: float
    avg_verify_ms: float
    total_verify_ms: float
    median_verify_ms: float
    median_settings_ms: float = 0.0
    median_proof_ms: float = 0.0
    median_total_verify_ms: float = 0.0  # robust to a slow repetition on shared hosts
    best_total_verify_ms: float = 0.0  # sum over modules of the fastest repetition, as timeit reports

    def csv_row(self) -> list:
        return [self.regime_id, self.num_loras, self.avg_lora_size] + [
            f"{getattr(self, c):.3f}" for c in CSV_COLUMNS[3:]]


def _precheck(g: Regime, m: int, profile: DeploymentProfile) -> None:
    f = profile.scale_bits
    # synthetic entries are in [-1, 1], so quantized magnitudes stay within 2^f
    ob = overflow_check(g.n, g.r, m, f, 1 << f, 1 << f, 1 << f, profile.p)
    if not ob.ok:
        raise RegimeTooLarge(f"{g}: worst-case delta {ob.bound} exceeds the field range")
    # float weights, int64 copies and commitment points, all per module
    est = g.num_modules * g.lora_size * (4 + 8 + 8) + g.num_modules * (g.r + g.d) * 200
    if est > MEMORY_LIMIT:
        raise RegimeTooLarge(f"{g}: needs about {est >> 20} MiB")


def _prepare(regime_id: int, g: Regime, spec: BenchSpec, profile: DeploymentProfile):
    _precheck(g, spec.m, profile)
    _, _, manifest, weights = synthetic_chain(spec.seed + regime_id, g.num_modules, g.n, g.d, g.r,
                                              scale_bits=profile.scale_bits)
    return manifest, weights, np.random.default_rng(spec.seed + 1000 + regime_id)


def _repetition(regime_id, rep, g, spec, manifest, weights, rng, profile):
    """One fresh contributor and one loopback session; returns ([ModuleTiming], total verify ms)."""
    clear_key_cache()
    contributor = Contributor(manifest, weights, profile, budget=OpeningBudget())
    gen_share = contributor.generator_ms / g.num_modules
    server = start_contributor(contributor)
    try:
        ch = Channel(_connect(server.address, 600.0))
        try:
            sess = UserSession(ch, profile)
            sess.handshake()
            for mod in manifest.modules:
                x = rng.uniform(-1, 1, size=(g.n, spec.m)).astype(np.float32)
                sess.exchange(mod.module_id, x)
            proofs, prove_ms = sess.request_proofs()
            report = verify_bundle(proofs, sess.context())
            sess.send_report(report)
        finally:
            ch.close()
    finally:
        server.shutdown()
        server.server_close()
    if not report.accepted:
        bad = [(m.module_id, m.reason.value) for m in report.modules if m.reason != FailureReason.NONE]
        raise RuntimeError(f"honest benchmark bundle rejected: {bad}")
    timings = [ModuleTiming(regime_id, rep, res.module_id, g.num_modules, g.lora_size,
                            contributor.settings_ms[res.module_id] + gen_share, prove_ms[res.module_id],
                            res.verify_ms)
               for res in report.modules]
    return timings, report.total_verify_ms


def _aggregate(regime_id: int, g: Regime, timings, totals) -> BenchRow:
    st = [t.settings_ms for t in timings]
    pr = [t.proof_ms for t in timings]
    vt = [t.verify_ms for t in timings]
    best: dict = {}
    for t in timings:
        best[t.module_id] = min(best.get(t.module_id, t.verify_ms), t.verify_ms)
    return BenchRow(regime_id, g.num_modules, g.lora_size, statistics.fmean(st), statistics.fmean(pr),
                    statistics.fmean(vt), statistics.fmean(totals), statistics.median(vt),
                    statistics.median(st), statistics.median(pr), statistics.median(totals), sum(best.values()))


def run_regime(regime_id: int, g: Regime, spec: BenchSpec, profile: DeploymentProfile = DEFAULT_PROFILE):
    """All repetitions of one regime; returns (BenchRow, [ModuleTiming])."""
    manifest, weights, rng = _prepare(regime_id, g, spec, profile)
    timings: list[ModuleTiming] = []
    totals = []
    for rep in range(spec.repetitions):
        t, total = _repetition(regime_id, rep, g, spec, manifest, weights, rng, profile)
        timings.extend(t)
        totals.append(total)
    return _aggregate(regime_id, g, timings, totals), timings


def _run_interleaved(spec: BenchSpec, profile: DeploymentProfile):
    """Repetition-major order, so a slow stretch of the host hits every regime alike.

    Odd repetitions run the regimes in reverse, which cancels a linear drift
    in host speed between neighbours.
    """
    prepared = [_prepare(i, g, spec, profile) for i, g in enumerate(spec.regimes)]
    timings = [[] for _ in spec.regimes]
    totals = [[] for _ in spec.regimes]
    order = list(range(len(spec.regimes)))
    for rep in range(spec.repetitions):
        for i in (order if rep % 2 == 0 else order[::-1]):
            g = spec.regimes[i]
            t, total = _repetition(i, rep, g, spec, *prepared[i], profile)
            timings[i].extend(t)
            totals[i].append(total)
    return [(_aggregate(i, g, timings[i], totals[i]), timings[i]) for i, g in enumerate(spec.regimes)]


def repetition_totals(timings) -> dict:
    """(regime_id, repetition) -> total verify ms of that session."""
    out: dict = {}
    for t in timings:
        out[(t.regime_id, t.repetition)] = out.get((t.regime_id, t.repetition), 0.0) + t.verify_ms
    return out


def host_metadata() -> dict:
    import gmpy2

    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "gmpy2": gmpy2.version(),
    }


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in sorted(rows, key=lambda r: r.regime_id):
            w.writerow(row.csv_row())


def read_rows(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {rd.fieldnames}")
        return [BenchRow(int(r["regime_id"]), int(r["num_loras"]), int(r["avg_lora_size"]),
                         *(float(r[c]) for c in CSV_COLUMNS[3:])) for r in rd]


def run_scaling_bench(spec: BenchSpec, out_dir=None, profile: DeploymentProfile = DEFAULT_PROFILE,
                      log=None) -> tuple[list[BenchRow], list[ModuleTiming]]:
    """Run every regime; with ``out_dir`` write bench.csv, modules.csv and summary.json."""
    for g in spec.regimes:
        _precheck(g, spec.m, profile)
    rows, long = [], []
    t0 = time.perf_counter()
    if spec.interleave:
        results = _run_interleaved(spec, profile)
    else:
        results = (run_regime(i, g, spec, profile) for i, g in enumerate(spec.regimes))
    for i, (row, timings) in enumerate(results):
        g = spec.regimes[i]
        rows.append(row)
        long.extend(timings)
        if log:
            log(f"regime {i}: {g.num_modules} x {g.lora_size} params, settings {row.avg_settings_ms:.1f} ms, "
                f"proof {row.avg_proof_ms:.1f} ms, verify {row.avg_verify_ms:.1f} ms")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "bench.csv", rows)
        with open(out / "modules.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LONG_COLUMNS)
            for t in long:
                w.writerow([t.regime_id, t.repetition, t.module_id, t.num_loras, t.lora_size,
                            f"{t.settings_ms:.3f}", f"{t.proof_ms:.3f}", f"{t.verify_ms:.3f}"])
        summary = {
            "spec": spec.to_dict(),
            "profile": profile.to_dict(),
            "host": host_metadata(),
            "wall_seconds": time.perf_counter() - t0,
            "rows": [asdict(r) for r in rows],
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, long


# -- trend comparison -----------------------------------------------------------


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct x values")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def load_reference(path=REFERENCE_CSV) -> list[dict]:
    """The published table (external reference data; units unlabeled)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    return [{"model": r["model"], "num_loras": int(r["num_loras"]), "avg_lora_size": int(r["avg_lora_size"]),
             "avg_settings": float(r["avg_settings"]), "avg_proof": float(r["avg_proof"])} for r in rows]


@dataclass
class TrendReport:
    settings_monotone: bool
    proof_monotone: bool
    verify_slope: float | None
    reference_settings_monotone: bool | None = None
    reference_proof_monotone: bool | None = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.settings_monotone and self.proof_monotone
                and (self.verify_slope is None or self.verify_slope > 0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _monotone(pairs) -> bool:
    """Nondecreasing in the key after averaging duplicate keys."""
    groups: dict = {}
    for k, v in pairs:
        groups.setdefault(k, []).append(v)
    vals = [statistics.fmean(groups[k]) for k in sorted(groups)]
    return all(a <= b for a, b in zip(vals, vals[1:]))


def compare_reference(rows, reference=None, sizes=None) -> TrendReport:
    """Trend agreement only; absolute times are never compared.

    ``rows`` are BenchRows or a CSV path.  ``sizes`` restricts the check to
    the listed average adapter sizes.
    """
    if isinstance(rows, (str, os.PathLike)):
        rows = read_rows(rows)
    if sizes is not None:
        rows = [r for r in rows if r.avg_lora_size in set(sizes)]
    notes = []
    s_ok = _monotone((r.avg_lora_size, r.avg_settings_ms) for r in rows)
    p_ok = _monotone((r.avg_lora_size, r.avg_proof_ms) for r in rows)
    slope = None
    if len({r.num_loras for r in rows}) >= 2:
        pts = sorted((r.num_loras, r.total_verify_ms) for r in rows)
        slope = linear_fit([k for k, _ in pts], [t for _, t in pts])[0]
    else:
        notes.append("a single module count: verify slope not assessed")
    ref_s = ref_p = None
    if reference is not False:
        ref = load_reference(reference or REFERENCE_CSV)
        if sizes is not None:
            ref = [r for r in ref if r["avg_lora_size"] in set(sizes)]
        ref_s = _monotone((r["avg_lora_size"], r["avg_settings"]) for r in ref)
        ref_p = _monotone((r["avg_lora_size"], r["avg_proof"]) for r in ref)
        if not (ref_s and ref_p):
            notes.append("the reference table itself is not monotone over these sizes")
    return TrendReport(s_ok, p_ok, slope, ref_s, ref_p, notes)
