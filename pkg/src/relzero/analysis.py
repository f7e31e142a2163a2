"""Statistical battery: distance-distance regression, residual and uniqueness
studies, and the end-to-end robustness sweep, with CSV report emission.

All computations are pure; CSV writers use UTF-8, LF line endings, and '.' as
the decimal separator. No plotting happens here — figures are rendered by the
CLI layer from these results.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .imaging import ImageBuffer, PatchFeatureMap, extract_mean_rgb
from .perturb import AttackConfig, apply_attack
from .predictor import PredictorModel, extract_watermark
from .relational import DistanceMatrix, PairIndexSet
from .watermark import ArnoldKey, CalibrationResult, encrypt, verify


@dataclass(frozen=True)
class RegressionReport:
    """OLS fit of after-distance on before-distance over all canonical pairs."""

    alpha: float
    beta: float
    r_squared: float
    spearman_rho: float
    n: int


@dataclass(frozen=True)
class HistogramReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float


@dataclass(frozen=True)
class SsmResidualReport:
    raw: np.ndarray
    adjusted: np.ndarray
    raw_mean: float
    raw_max: float
    adjusted_mean: float
    adjusted_max: float
    alpha: float
    beta: float


@dataclass(frozen=True)
class UniquenessReport:
    etas: np.ndarray
    id_pairs: list[tuple[str, str]]
    mean: float
    max: float
    bin_edges: np.ndarray
    counts: np.ndarray
    threshold: float
    exceed_count: int
    expected_eta: float


@dataclass(frozen=True)
class SweepRow:
    attack: str
    tpr: float
    n: int
    threshold_m: int
    calib_mode: str


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return 0.0
    return float((xc * yc).sum() / denom)


def spearman_rho(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    return _pearson(average_ranks(x), average_ranks(y))


def fit_distance_regression(
    before: DistanceMatrix, after: DistanceMatrix
) -> RegressionReport:
    """Fit after ~ alpha * before + beta by OLS over the canonical pairs.

    Reports the coefficient of determination (possibly negative; capped only
    at 1 by construction) and the Spearman rank correlation.
    """
    if before.P != after.P:
        raise ValueError(f"dimension mismatch: {before.P} vs {after.P}")
    x = before.condensed()
    y = after.condensed()
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pairs to fit")
    xm = x.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("degenerate input: before-distances have zero variance")
    ym = y.mean()
    alpha = float(((x - xm) * (y - ym)).sum() / sxx)
    beta = float(ym - alpha * xm)
    resid = y - (alpha * x + beta)
    ss_res = float((resid**2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 if ss_res == 0.0 else 1.0 - ss_res / ss_tot
    return RegressionReport(alpha, beta, r2, spearman_rho(x, y), n)


def residual_distribution(
    before: DistanceMatrix, after: DistanceMatrix, bins: int = 50
) -> HistogramReport:
    """Histogram of per-pair |d_after - d_before| over [0, max residual]."""
    if before.P != after.P:
        raise ValueError(f"dimension mismatch: {before.P} vs {after.P}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    res = np.abs(after.condensed() - before.condensed())
    hi = float(res.max()) if res.size and res.max() > 0 else 1.0
    counts, edges = np.histogram(res, bins=bins, range=(0.0, hi))
    return HistogramReport(edges, counts, float(res.mean()), float(res.std()))


def ssm_residual(before: DistanceMatrix, after: DistanceMatrix) -> SsmResidualReport:
    """Entrywise |after - before| plus the residual left after removing the
    fitted global scale (alpha, beta) from the regression."""
    fit = fit_distance_regression(before, after)
    raw = np.abs(after.values - before.values)
    adjusted = np.abs(after.values - (fit.alpha * before.values + fit.beta))
    np.fill_diagonal(adjusted, 0.0)
    iu, ju = np.triu_indices(before.P, k=1)
    raw_off = raw[iu, ju]
    adj_off = adjusted[iu, ju]
    return SsmResidualReport(
        raw=raw,
        adjusted=adjusted,
        raw_mean=float(raw_off.mean()),
        raw_max=float(raw_off.max()),
        adjusted_mean=float(adj_off.mean()),
        adjusted_max=float(adj_off.max()),
        alpha=fit.alpha,
        beta=fit.beta,
    )


def uniqueness_study(
    watermarks: list[PairIndexSet],
    K: int,
    ids: list[str] | None = None,
    threshold: float | None = None,
    bins: int = 20,
) -> UniquenessReport:
    """All inter-image overlap ratios among the given watermark sets.

    The expected overlap for unrelated images under the uniform-subset null,
    K / C(P,2), is reported alongside for comparison.
    """
    if len(watermarks) < 2:
        raise ValueError("need at least 2 watermarks")
    for wm in watermarks:
        if len(wm) != K:
            raise ValueError(f"watermark size {len(wm)} != K={K}")
    if ids is None:
        ids = [f"{i:04d}" for i in range(len(watermarks))]
    if len(ids) != len(watermarks):
        raise ValueError("ids and watermarks length mismatch")
    m_universe = watermarks[0].P * (watermarks[0].P - 1) // 2
    etas, id_pairs = [], []
    for a in range(len(watermarks)):
        for b in range(a + 1, len(watermarks)):
            etas.append(len(watermarks[a].pairs & watermarks[b].pairs) / K)
            id_pairs.append((ids[a], ids[b]))
    etas = np.asarray(etas)
    if threshold is None:
        threshold = float(etas.max())
    counts, edges = np.histogram(etas, bins=bins, range=(0.0, 1.0))
    return UniquenessReport(
        etas=etas,
        id_pairs=id_pairs,
        mean=float(etas.mean()),
        max=float(etas.max()),
        bin_edges=edges,
        counts=counts,
        threshold=float(threshold),
        exceed_count=int((etas > threshold).sum()),
        expected_eta=K / m_universe,
    )


def _sweep_seed(base: int, image_idx: int, attack_idx: int) -> int:
    ss = np.random.SeedSequence([base, image_idx, attack_idx])
    return int(ss.generate_state(1, np.uint64)[0])


def robustness_sweep(
    model: PredictorModel,
    images: list[tuple[str, ImageBuffer]],
    key: ArnoldKey,
    calib: CalibrationResult,
    attacks: list[AttackConfig],
    patch_side: int = 16,
    seed: int = 0,
) -> list[SweepRow]:
    """Register each image, attack it, re-extract, verify; TPR per attack.

    Images are processed in input order; stochastic attacks get per-(image,
    attack) seeds derived from `seed`, so the sweep is reproducible.
    """
    if not images:
        raise ValueError("empty corpus")
    if not attacks:
        raise ValueError("no attacks given")
    K = calib.K
    successes = [0] * len(attacks)
    for img_idx, (_, img) in enumerate(images):
        fm = extract_mean_rgb(img, patch_side)
        registered = extract_watermark(model, fm, K)
        record = encrypt(
            registered,
            key,
            content_id=images[img_idx][0],
            patch_side=patch_side,
            image_side=img.width,
        )
        for atk_idx, cfg in enumerate(attacks):
            seeded = replace(cfg, seed=_sweep_seed(seed, img_idx, atk_idx))
            attacked = apply_attack(img, seeded)
            suspect = extract_watermark(model, extract_mean_rgb(attacked, patch_side), K)
            result = verify(record, key, suspect, calib)
            if result.authenticated:
                successes[atk_idx] += 1
    n = len(images)
    return [
        SweepRow(cfg.label(), successes[i] / n, n, calib.m, calib.mode)
        for i, cfg in enumerate(attacks)
    ]


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.write_bytes(("\n".join([header, *rows]) + "\n").encode("utf-8"))


def write_regression_csv(path: str | Path, rows: list[tuple[str, RegressionReport]]) -> None:
    """regression.csv: one row per image (id prepended to the fixed columns)."""
    _write_csv(
        Path(path),
        "image,alpha,beta,r2,rho,n",
        [
            f"{img},{r.alpha:.12g},{r.beta:.12g},{r.r_squared:.12g},{r.spearman_rho:.12g},{r.n}"
            for img, r in rows
        ],
    )


def write_residuals_csv(path: str | Path, hist: HistogramReport) -> None:
    rows = [
        f"{hist.bin_edges[i]:.12g},{hist.bin_edges[i + 1]:.12g},{int(hist.counts[i])}"
        for i in range(len(hist.counts))
    ]
    _write_csv(Path(path), "bin_lo,bin_hi,count", rows)


def write_ssm_csv(path: str | Path, rows: list[tuple[str, SsmResidualReport]]) -> None:
    _write_csv(
        Path(path),
        "image,raw_mean,raw_max,adjusted_mean,adjusted_max,alpha,beta",
        [
            f"{img},{r.raw_mean:.12g},{r.raw_max:.12g},{r.adjusted_mean:.12g},"
            f"{r.adjusted_max:.12g},{r.alpha:.12g},{r.beta:.12g}"
            for img, r in rows
        ],
    )


def write_uniqueness_csv(path: str | Path, report: UniquenessReport) -> None:
    rows = [
        f"{a},{b},{eta:.12g}"
        for (a, b), eta in zip(report.id_pairs, report.etas.tolist())
    ]
    _write_csv(Path(path), "id_a,id_b,eta", rows)


def write_robustness_csv(path: str | Path, rows: list[SweepRow]) -> None:
    _write_csv(
        Path(path),
        "attack,tpr,n,threshold_m,calib_mode",
        [f"{r.attack},{r.tpr:.12g},{r.n},{r.threshold_m},{r.calib_mode}" for r in rows],
    )
