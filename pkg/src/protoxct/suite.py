"""Reproducibility harness: fixture checks and a head throughput micro-benchmark.

Fixtures live in ``fixtures/suite.json``; each names a check kind, its
inputs, the expected outcome, where the expected value comes from and the
tolerance. A fixture the suite requires but cannot find is a failure.

Run ``python -m protoxct.suite [--filter SUBSTRING] [--json PATH]``; the
report is TAP text on stdout and the exit status is nonzero on any failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .evaluation import ScoredSet, apply_temperature, fit_temperature, metrics_from_counts, roc_auc, select_threshold
from .head import SEMANTIC_TYPES, Anchor, AnchorSet, PrototypeModel, class_logits, distances, forward, medoid, prototype_logits
from .loss import TERMS, LossWeights, class_weights, term_parts
from .maps import DefectMap, aggregate_majority, tile
from .numerics import make_rng, softmax

__all__ = [
    "Fixture",
    "CaseResult",
    "SuiteReport",
    "REQUIRED",
    "load_fixtures",
    "run_suite",
    "gradient_instance",
    "coordinate_errors",
    "certify_gradients",
    "benchmark_head",
    "main",
]

REQUIRED = (
    "metrics/resnet50",
    "metrics/prototype_resnet50",
    "gradients",
    "head_identity",
    "medoid_oracle",
    "temperature_recovery",
    "threshold_sweep",
    "map_tiling",
    "map_votes",
)


@dataclass
class Fixture:
    name: str
    kind: str
    inputs: dict
    expected: dict
    provenance: str
    tolerance: float


@dataclass
class CaseResult:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0
    values: dict = field(default_factory=dict)


@dataclass
class SuiteReport:
    results: list[CaseResult]
    benchmark: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.results)

    def to_tap(self) -> str:
        lines = [f"1..{len(self.results)}"]
        for i, r in enumerate(self.results, 1):
            status = "ok" if r.ok else "not ok"
            note = f" # {r.detail}" if r.detail else ""
            lines.append(f"{status} {i} - {r.name}{note}")
        if self.benchmark:
            lines.append(f"# head throughput {self.benchmark['records_per_second']:.0f} records/s")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        summary = {
            "passed": self.passed,
            "n": len(self.results),
            "failures": [r.name for r in self.results if not r.ok],
            "results": [asdict(r) for r in self.results],
            "benchmark": self.benchmark,
        }
        return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def load_fixtures(path=None) -> list[Fixture]:
    if path is None:
        text = resources.files("protoxct").joinpath("fixtures/suite.json").read_text()
    else:
        text = Path(path).read_text()
    return [Fixture(**f) for f in json.loads(text)["fixtures"]]


# checks ---------------------------------------------------------------------------


def _check_metrics(fx: Fixture) -> tuple[bool, str, dict]:
    got = metrics_from_counts(**fx.inputs)
    err = {k: abs(got[k] - v) for k, v in fx.expected.items()}
    worst = max(err, key=err.get)
    return err[worst] <= fx.tolerance, f"max |diff| {err[worst]:.2e} ({worst})", got


def gradient_instance(seed: int, dim: int = 8, batch: int = 5, tau: float = 1.0):
    """Random head, anchors and batch; both classes are present in the batch."""
    rng = make_rng(seed)
    centres = rng.normal(size=(2, dim))
    P = np.vstack([centres[0] + 0.4 * rng.normal(size=(3, dim)), centres[1] + 0.4 * rng.normal(size=(3, dim))])
    M = P + 0.3 * rng.normal(size=P.shape)
    Z = rng.normal(size=(batch, dim))
    y = np.r_[0, 1, rng.integers(0, 2, batch - 2)]
    anchors = {t: [Anchor(10 * k + i, P[k] + rng.normal(size=dim)) for i in range(6)] for k, t in enumerate(SEMANTIC_TYPES)}
    return Z, y, P, M, float(tau), AnchorSet(anchors)


def coordinate_errors(analytic, numeric, floor: float = 1e-8, rel_tol: float = 1e-4) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - f)
    mag = np.maximum(np.abs(a), np.abs(f))
    small = mag < floor
    return np.where(small, rel_tol * diff / floor, diff / np.where(small, 1.0, mag))


def certify_gradients(seed: int, dim: int = 8, batch: int = 5, tau: float = 1.0, step: float = 1e-4) -> dict[str, float]:
    """Worst relative error of analytic vs. central-difference gradients, per term and for the total.

    Coordinates are compared relatively, ``|a - f| / max(|a|, |f|)``, except
    where both magnitudes are below 1e-8; those are compared absolutely
    against 1e-8 and reported on the relative scale (``1e-4 * |a - f| / 1e-8``)
    so one number per term decides pass or fail against 1e-4.
    """
    Z, y, P, M, tau, aset = gradient_instance(seed, dim, batch, tau)
    w = LossWeights()
    lam = w.term_weights()
    cw = tuple(class_weights(y))
    names = list(TERMS) + ["total"]

    def values(Zx, Px, tx) -> np.ndarray:
        parts = term_parts(Zx, y, PrototypeModel(Px, tx, M), aset, w, cw)
        v = [parts[t][0] for t in TERMS]
        return np.array(v + [sum(lam[t] * parts[t][0] for t in TERMS)])

    parts = term_parts(Z, y, PrototypeModel(P, tau, M), aset, w, cw)
    analytic = {t: parts[t][1] for t in TERMS}
    total = None
    for t in TERMS:
        g = analytic[t] * lam[t]
        total = g if total is None else total + g
    analytic["total"] = total

    def numeric(block: str) -> np.ndarray:
        x0 = {"z": Z, "P": P, "tau": np.array([tau])}[block]
        out = np.empty((len(names),) + x0.shape)
        flat = x0.reshape(-1)
        for i in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += step
            xm[i] -= step
            ev = []
            for x in (xp, xm):
                x = x.reshape(x0.shape)
                if block == "z":
                    ev.append(values(x, P, tau))
                elif block == "P":
                    ev.append(values(Z, x, tau))
                else:
                    ev.append(values(Z, P, float(x[0])))
            out.reshape(len(names), -1)[:, i] = (ev[0] - ev[1]) / (2 * step)
        return out

    fd = {b: numeric(b) for b in ("z", "P", "tau")}
    worst = {}
    for j, name in enumerate(names):
        g = analytic[name]
        errs = []
        for b, a in (("z", g.z), ("P", g.P), ("tau", np.array([g.tau]))):
            errs.append(coordinate_errors(a, fd[b][j]).max())
        worst[name] = float(max(errs))
    return worst


def _check_gradients(fx: Fixture) -> tuple[bool, str, dict]:
    inp = fx.inputs
    worst = {}
    fails = 0
    for s in range(inp["seeds"]):
        r = certify_gradients(s, inp["dim"], inp["batch"], inp["tau"], inp["step"])
        fails += any(v > fx.tolerance for v in r.values())
        for k, v in r.items():
            worst[k] = max(worst.get(k, 0.0), v)
    top = max(worst, key=worst.get)
    return fails == 0, f"{inp['seeds'] - fails}/{inp['seeds']} instances pass; worst {worst[top]:.1e} ({top})", worst


def _check_head_identity(fx: Fixture) -> tuple[bool, str, dict]:
    rng = make_rng(fx.inputs["seed"])
    worst = 0.0
    for _ in range(fx.inputs["instances"]):
        K = int(rng.integers(2, 9))
        D = int(rng.integers(1, 17))
        cmap = np.r_[0, 1, rng.integers(0, 2, K - 2)]
        rng.shuffle(cmap)
        z = rng.normal(size=D) * rng.uniform(0.1, 5)
        P = rng.normal(size=(K, D)) * rng.uniform(0.1, 5)
        l = prototype_logits(distances(z, P), rng.uniform(0.05, 5))
        q = softmax(l)
        marg = np.array([q[cmap == 0].sum(), q[cmap == 1].sum()])
        pooled = softmax(class_logits(l, cmap))
        worst = max(worst, float(np.abs(marg - pooled).max()))
    return worst < fx.tolerance, f"max |diff| {worst:.1e}", {"max_abs_diff": worst}


def _check_medoid(fx: Fixture) -> tuple[bool, str, dict]:
    rng = make_rng(fx.inputs["seed"])
    bad = 0
    for _ in range(fx.inputs["trials"]):
        n = int(rng.integers(1, fx.inputs["max_size"] + 1))
        E = rng.normal(size=(n, int(rng.integers(1, 9))))
        ids = [int(i) for i in rng.choice(1000, n, replace=False)]
        c = E.sum(axis=0) / n
        d = [float(np.sum((e - c) ** 2)) for e in E]
        expect = min(range(n), key=lambda i: (d[i], ids[i]))
        got, _ = medoid(ids, E)
        bad += got != ids[expect]
    return bad == 0, f"{bad} mismatches", {"mismatches": bad}


def _check_temperature(fx: Fixture) -> tuple[bool, str, dict]:
    rng = make_rng(fx.inputs["seed"])
    worst = 0.0
    auc_same = True
    for factor in fx.inputs["factors"]:
        truth = rng.normal(0.0, 2.5, fx.inputs["n"])
        y = (rng.random(truth.size) < 1.0 / (1.0 + np.exp(-truth))).astype(int)
        logits = factor * truth
        T = fit_temperature(logits, y)
        worst = max(worst, abs(T - factor) / factor)
        before = roc_auc(ScoredSet.from_arrays(y, apply_temperature(logits, 1.0)))
        after = roc_auc(ScoredSet.from_arrays(y, apply_temperature(logits, T)))
        auc_same &= before == after
    ok = worst <= fx.tolerance and auc_same
    return ok, f"worst relative error {worst:.3f}; AUC unchanged {auc_same}", {"relative_error": worst}


def _partition_f1(y, s, t) -> float:
    pred = s >= t
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def _check_threshold(fx: Fixture) -> tuple[bool, str, dict]:
    rng = make_rng(fx.inputs["seed"])
    grid = np.linspace(0.0, 1.0, fx.inputs["grid"] + 1)
    bad = 0
    for _ in range(fx.inputs["sets"]):
        n = int(rng.integers(10, 200))
        y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        s = np.round(np.clip(rng.normal(0.35 + 0.3 * y, 0.2), 0, 1), 3)
        t = select_threshold(ScoredSet.from_arrays(y, s))
        f1 = np.array([_partition_f1(y, s, g) for g in grid])
        g = grid[int(np.argmax(f1))]
        # same side of every score means within one inter-score gap
        bad += not np.array_equal(s >= t, s >= g)
    return bad == 0, f"{bad} mismatches", {"mismatches": bad}


def _check_tiling(fx: Fixture) -> tuple[bool, str, dict]:
    n = len(tile(fx.inputs["height"], fx.inputs["width"], fx.inputs["stride"]))
    return n == fx.expected["patches"], f"{n} patches", {"patches": n}


def _check_votes(fx: Fixture) -> tuple[bool, str, dict]:
    h, w, stride = fx.inputs["height"], fx.inputs["width"], fx.inputs["stride"]
    grid = tile(h, w, stride)
    labels = make_rng(fx.inputs["seed"]).integers(0, 2, len(grid))
    pix = aggregate_majority(DefectMap(grid, labels.astype(float), labels, np.zeros_like(labels), 0.5))
    side = grid.side
    interior = pix.coverage[side - stride: h - side + stride, side - stride: w - side + stride]
    cov = np.zeros((h, w), int)
    hit = np.zeros((h, w), int)
    for (r, c), lab in zip(grid.origins, labels):
        cov[r:r + side, c:c + side] += 1
        hit[r:r + side, c:c + side] += lab
    brute = np.where(cov == 0, -1, (2 * hit >= cov).astype(int))
    ok = bool(np.all(interior == fx.expected["interior_votes"])) and np.array_equal(brute, pix.label)
    return ok, f"interior votes {sorted(set(interior.ravel().tolist()))}; brute force equal {np.array_equal(brute, pix.label)}", {}


_CHECKS = {
    "metrics": _check_metrics,
    "gradients": _check_gradients,
    "head_identity": _check_head_identity,
    "medoid": _check_medoid,
    "temperature": _check_temperature,
    "threshold": _check_threshold,
    "tiling": _check_tiling,
    "votes": _check_votes,
}


def benchmark_head(n: int = 20000, dim: int = 64, repeats: int = 5, seed: int = 0) -> dict:
    """Best-of-``repeats`` throughput of the head forward pass on standardized embeddings."""
    rng = make_rng(seed)
    model = PrototypeModel(rng.normal(size=(len(SEMANTIC_TYPES), dim)), 1.0, np.zeros((len(SEMANTIC_TYPES), dim)))
    Z = rng.normal(size=(n, dim))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward(Z, model)
        best = min(best, time.perf_counter() - t0)
    return {"records": n, "dim": dim, "seconds": best, "records_per_second": n / best}


def run_suite(filter: str | None = None, fixtures_path=None, benchmark: bool = True) -> SuiteReport:
    """Run every fixture whose name contains ``filter`` (all when ``None``)."""
    try:
        fixtures = load_fixtures(fixtures_path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return SuiteReport([CaseResult("load_fixtures", False, f"cannot load fixtures: {exc}")])
    results = []
    names = {f.name for f in fixtures}
    for req in REQUIRED:
        if req not in names and (filter is None or filter in req):
            results.append(CaseResult(req, False, "fixture missing"))
    for fx in fixtures:
        if filter is not None and filter not in fx.name:
            continue
        check = _CHECKS.get(fx.kind)
        if check is None:
            results.append(CaseResult(fx.name, False, f"unknown fixture kind {fx.kind!r}"))
            continue
        t0 = time.perf_counter()
        try:
            ok, detail, values = check(fx)
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            ok, detail, values = False, f"raised {type(exc).__name__}: {exc}", {}
        results.append(CaseResult(fx.name, bool(ok), detail, time.perf_counter() - t0, values))
    bench = benchmark_head() if benchmark and (filter is None or filter in "benchmark") else {}
    return SuiteReport(results, bench)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m protoxct.suite", description=__doc__.splitlines()[0])
    ap.add_argument("--filter", help="only fixtures whose name contains this substring")
    ap.add_argument("--fixtures", type=Path, help="alternative fixture file")
    ap.add_argument("--json", type=Path, help="also write a JSON summary here")
    args = ap.parse_args(argv)
    report = run_suite(args.filter, args.fixtures)
    sys.stdout.write(report.to_tap())
    if args.json:
        args.json.write_text(report.to_json())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
