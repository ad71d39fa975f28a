"""Error metrics, region summaries, paired t-tests and holdout reports.

Conventions: per-point error is the Euclidean norm of the displacement
error in millimetres; St.D. is the population standard deviation;
quartiles use linear interpolation between order statistics with
inclusive endpoints (position ``q * (n - 1)`` in the sorted sample).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .features import TessellationConfig, resample_features
from .fesolver import MaterialField
from .geometry import Region
from .inference import REFERENCE_LATENCY, predict

REFERENCE_ROWS = {
    "Tetrahedral Mesh": "0.010 +/- 0.012 mm",
    "Tessellation": "0.017 +/- 0.015 mm",
}


class EvaluationError(ValueError):
    pass


class DegenerateTestError(EvaluationError):
    """Paired differences with zero variance: the t statistic is undefined."""


def nodal_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-point Euclidean error norm in millimetres (inputs in metres)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise EvaluationError(f"prediction/truth count mismatch: {pred.shape} vs {truth.shape}")
    return np.linalg.norm(pred - truth, axis=-1) * 1e3


def quartiles(errors) -> tuple[float, float, float]:
    x = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if x.size == 0:
        raise EvaluationError("quartiles of an empty sample")
    out = []
    for q in (0.25, 0.5, 0.75):
        pos = q * (x.size - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, x.size - 1)
        out.append(float(x[lo] + (pos - lo) * (x[hi] - x[lo])))
    return tuple(out)


@dataclass
class ErrorSummary:
    mae: float
    std: float
    n: int

    def fmt(self) -> str:
        return f"{self.mae:.3f}+/-{self.std:.3f}"


def summarise(errors) -> ErrorSummary:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size and np.ptp(e) == 0:
        # constant sample: report it exactly instead of carrying rounding noise
        return ErrorSummary(float(e[0]), 0.0, int(e.size))
    return ErrorSummary(float(e.mean()), float(e.std()), int(e.size))


def region_errors(errors, labels) -> dict:
    """CZ and WG summaries; WG includes CZ points.  Empty regions map to None."""
    errors = np.asarray(errors)
    labels = np.asarray(labels)
    if errors.shape != labels.shape:
        raise EvaluationError("labels must be aligned with errors")
    masks = {"CZ": labels == Region.CZ, "WG": (labels == Region.WG) | (labels == Region.CZ)}
    return {name: (summarise(errors[m]) if m.any() else None) for name, m in masks.items()}


# -- Student t distribution -------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise EvaluationError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta ``I_x(a, b)``."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    return betainc(0.5 * df, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False
    construction: str = ""


def paired_ttest(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("paired samples must be 1-D with equal length")
    n = a.size
    if n < 2:
        raise EvaluationError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateTestError("paired differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return TTestResult(float(t), student_t_two_sided_p(float(t), n - 1), n - 1)


def _safe_ttest(a, b, construction: str) -> TTestResult:
    try:
        res = paired_ttest(a, b)
    except DegenerateTestError:
        res = TTestResult(float("nan"), float("nan"), len(a) - 1, degenerate=True)
    res.construction = construction
    return res


# -- reports ----------------------------------------------------------------

@dataclass
class StrategyBlock:
    name: str
    overall: ErrorSummary
    q: tuple
    cz: Optional[ErrorSummary]
    wg: Optional[ErrorSummary]
    case_mae: list
    n_points: int

    @property
    def mean_case_mae(self) -> float:
        return float(np.mean(self.case_mae))


def strategy_block(name: str, errors_per_case: Sequence[np.ndarray],
                   labels_per_case: Sequence[np.ndarray]) -> StrategyBlock:
    errors = np.concatenate(errors_per_case)
    labels = np.concatenate(labels_per_case)
    regions = region_errors(errors, labels)
    return StrategyBlock(name, summarise(errors), quartiles(errors), regions["CZ"],
                         regions["WG"], [float(np.mean(e)) for e in errors_per_case],
                         int(errors.size))


@dataclass
class EvaluationReport:
    blocks: list
    tests: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def check(self) -> None:
        for blk in self.blocks:
            q1, q2, q3 = blk.q
            if not (q1 <= q2 <= q3):
                raise EvaluationError(f"quartile ordering violated in {blk.name}")
            if blk.overall.mae < 0:
                raise EvaluationError("negative error")

    def rows(self) -> list:
        out = []
        for blk in self.blocks:
            out.append({
                "strategy": blk.name,
                "mae": blk.overall.mae, "std": blk.overall.std,
                "q1": blk.q[0], "q2": blk.q[1], "q3": blk.q[2],
                "cz_mae": blk.cz.mae if blk.cz else None, "cz_std": blk.cz.std if blk.cz else None,
                "wg_mae": blk.wg.mae if blk.wg else None, "wg_std": blk.wg.std if blk.wg else None,
                "mean_case_mae": blk.mean_case_mae, "n_points": blk.n_points,
            })
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())

    def to_text(self) -> str:
        lines = [format_table(self.rows(), "Sampling Strategy", "Results on holdout set")]
        for key, res in self.tests.items():
            if res.degenerate:
                lines.append(f"paired t-test [{key}] ({res.construction}): degenerate "
                             "(zero variance of differences)")
            else:
                lines.append(f"paired t-test [{key}] ({res.construction}): "
                             f"t = {res.t:.4f}, df = {res.df}, p = {res.p:.3g}")
        if self.latency:
            lines.append("latency: median {median_ms:.1f} ms, p95 {p95_ms:.1f} ms "
                         "({n_points} points, S={points_per_pass}, P={passes})".format(**self.latency))
        for k, v in self.header.items():
            lines.append(f"{k}: {v}")
        return "\n".join(lines)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def format_table(rows: list, section: str, subtitle: str, key: str = "strategy") -> str:
    """Text table with MAE+/-St.D., Q1-Q3 and CZ/WG columns (mm, 3 decimals)."""
    head = f"{'':<22}|{'MAE+/-St.D.':>16}|{'Q1':>8}|{'Q2':>8}|{'Q3':>8}|{'CZ':>16}|{'WG':>16}"
    sep = "-" * len(head)
    lines = [sep, f"{section:<22}| {subtitle}", sep, head, sep]
    for r in rows:
        cz = "-" if r["cz_mae"] is None else f"{r['cz_mae']:.3f}+/-{r['cz_std']:.3f}"
        wg = "-" if r["wg_mae"] is None else f"{r['wg_mae']:.3f}+/-{r['wg_std']:.3f}"
        lines.append(f"{str(r[key]):<22}|{r['mae']:>9.3f}+/-{r['std']:.3f}|{r['q1']:>8.3f}|"
                     f"{r['q2']:>8.3f}|{r['q3']:>8.3f}|{cz:>16}|{wg:>16}")
    lines.append(sep)
    return "\n".join(lines)


def rows_to_csv(rows: list) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.3f}" if isinstance(v, float) else ("" if v is None else v))
                         for k, v in r.items()})
    return buf.getvalue()


def case_materials(sample, mesh) -> MaterialField:
    """Recover the material field of a stored simulation."""
    regions = {int(k): tuple(v) for k, v in sample.meta.get("materials", {}).items()}
    if sample.features.shape[1] == 9:
        return MaterialField(sample.features[:, 7], sample.features[:, 8], regions)
    if not regions:
        raise EvaluationError("pb sample without recorded region materials")
    return MaterialField.from_regions(mesh.labels, regions)


def case_prescribed(sample, mesh) -> np.ndarray:
    u = np.zeros((mesh.n_nodes, 3))
    u[mesh.loaded_nodes] = sample.features[mesh.loaded_nodes, 4:7]
    return u


def evaluate_holdout(params, holdout: Sequence, tessellation: TessellationConfig = TessellationConfig(),
                     points_per_pass: int = 512, passes: Optional[int] = None, seed: int = 0,
                     training_ids: Optional[Sequence] = None, latency: Optional[dict] = None,
                     predictor=None) -> EvaluationReport:
    """Score a network on holdout datasets with mesh-node and tessellation sampling.

    ``holdout`` is a sequence of :class:`~fesurrogate.io.Dataset`.  ``predictor``
    overrides the bagged network prediction (signature ``(features, seed) -> (N, 3)``).
    """
    train_ids = set(training_ids if training_ids is not None
                    else (getattr(params, "extra", {}) or {}).get("training_phantoms", []))
    for ds in holdout:
        if ds.split != "holdout":
            raise EvaluationError(f"dataset for phantom {ds.phantom_id} is tagged "
                                  f"{ds.split!r}, not 'holdout'")
        if ds.phantom_id in train_ids:
            raise EvaluationError(f"phantom {ds.phantom_id} was used for training")

    def run(feats, s):
        if predictor is not None:
            return predictor(feats, s)
        mode_feats = feats if params.config.input_dim == feats.shape[1] else feats[:, :7]
        return predict(params, mode_feats, points_per_pass, passes, s).displacement

    mesh_err, mesh_lab, tess_err, tess_lab = [], [], [], []
    pred_mag, true_mag = [], []
    case = 0
    for ds in holdout:
        for sample in ds.samples:
            s = seed + case
            pred = run(sample.features, s)
            mesh_err.append(nodal_errors(pred, sample.displacements))
            mesh_lab.append(sample.labels)
            pred_mag.append(float(np.linalg.norm(pred, axis=1).mean() * 1e3))
            true_mag.append(float(np.linalg.norm(sample.displacements, axis=1).mean() * 1e3))
            rs = resample_features(ds.mesh, case_materials(sample, ds.mesh),
                                   case_prescribed(sample, ds.mesh), tessellation, seed=s,
                                   displacements=sample.displacements)
            tpred = run(rs.features, s)
            tess_err.append(nodal_errors(tpred, rs.targets))
            tess_lab.append(rs.labels)
            case += 1
    if case == 0:
        raise EvaluationError("holdout set is empty")

    blocks = [strategy_block("Tetrahedral Mesh", mesh_err, mesh_lab),
              strategy_block("Tessellation", tess_err, tess_lab)]
    zeros = [0.0] * case
    tests = {
        "mesh vs tessellation": _safe_ttest(
            blocks[0].case_mae, blocks[1].case_mae, "per-case MAE, mesh nodes vs tessellation points"),
        "network vs FE (mesh)": _safe_ttest(
            blocks[0].case_mae, zeros, "per-case MAE vs zero-error FE-vs-FE baseline"),
        "network vs FE (tessellation)": _safe_ttest(
            blocks[1].case_mae, zeros, "per-case MAE vs zero-error FE-vs-FE baseline"),
        "network vs FE magnitude": _safe_ttest(
            pred_mag, true_mag, "per-case mean displacement magnitude, network vs FE"),
    }
    header = {f"published {k}": v for k, v in REFERENCE_ROWS.items()}
    header["published latency"] = REFERENCE_LATENCY
    header["cases"] = case
    report = EvaluationReport(blocks, tests, latency or {}, header)
    report.check()
    return report
