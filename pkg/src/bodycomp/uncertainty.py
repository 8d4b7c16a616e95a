"""Ensemble combination, uncertainty decomposition, failure filtering, and
calibration diagnostics.

Members are combined in standardized units as a uniform Gaussian mixture:
the mixture mean is the member average, the aleatoric part is the average
member variance, and the epistemic part is the spread of member means.
Destandardization happens once, after combination.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .model import PredictionRecord, Standardizer

EPISTEMIC_CLAMP = 1e-9  # tolerated float cancellation below zero


class EnsembleError(ValueError):
    pass


@dataclass
class EnsemblePrediction:
    """Combined prediction for one subject, standardized units."""

    subject_id: str
    target_names: tuple
    member_means: np.ndarray  # (M, T)
    member_vars: np.ndarray  # (M, T)
    mu: np.ndarray  # (T,)
    var_total: np.ndarray
    var_aleatoric: np.ndarray
    var_epistemic: np.ndarray
    n_clamped: int = 0


def ensemble_combine(members, subject_id: str = "", target_names=()) -> EnsemblePrediction:
    """Combine member (mu_m, var_m) pairs; var_m may be None for MSE members.

    mu* = mean(mu_m); var_total = mean(var_m + mu_m^2) - mu*^2, split into
    aleatoric mean(var_m) and epistemic mean(mu_m^2) - mu*^2. Epistemic values
    in [-1e-9, 0) are float cancellation and clamp to zero (counted); anything
    lower is an error.
    """
    if not members:
        raise EnsembleError("no ensemble members")
    mu_list = [np.asarray(m, dtype=np.float64) for m, _ in members]
    var_list = [
        np.zeros_like(mu_list[i]) if v is None else np.asarray(v, dtype=np.float64)
        for i, (_, v) in enumerate(members)
    ]
    shapes = {a.shape for a in mu_list} | {a.shape for a in var_list}
    if len(shapes) != 1:
        raise EnsembleError(f"members disagree on target sets: shapes {sorted(shapes)}")
    mus = np.array(mu_list)
    vars_ = np.array(var_list)
    mu = mus.mean(axis=0)
    alea = vars_.mean(axis=0)
    # centered form of mean(mu^2) - mu*^2 (same quantity, no cancellation),
    # with exact zero/identity shortcuts so degenerate ensembles are exact
    epi = ((mus - mu) ** 2).mean(axis=0)
    same_mu = (mus == mus[0]).all(axis=0)
    same_var = (vars_ == vars_[0]).all(axis=0)
    mu = np.where(same_mu, mus[0], mu)
    epi = np.where(same_mu, 0.0, epi)
    alea = np.where(same_var, vars_[0], alea)
    n_clamped = int(((epi < 0) & (epi >= -EPISTEMIC_CLAMP)).sum())
    if (epi < -EPISTEMIC_CLAMP).any():
        raise EnsembleError(f"{subject_id}: epistemic variance {epi.min()} below the "
                            "cancellation tolerance; member outputs are inconsistent")
    epi = np.maximum(epi, 0.0)
    return EnsemblePrediction(
        subject_id=subject_id,
        target_names=tuple(target_names),
        member_means=mus,
        member_vars=vars_,
        mu=mu,
        var_total=alea + epi,
        var_aleatoric=alea,
        var_epistemic=epi,
        n_clamped=n_clamped,
    )


def combine_members(member_mus, member_vars, subject_ids, target_names,
                    standardizer: Standardizer):
    """Combine whole-cohort member outputs into destandardized PredictionRecords.

    ``member_mus`` is (M, N, T) in standardized units; ``member_vars`` likewise
    or None (MSE members). More than 1% clamped epistemic entries across the
    cohort is an error.
    """
    M, N, T = np.shape(member_mus)
    if tuple(standardizer.target_names) != tuple(target_names):
        raise EnsembleError("standardizer targets do not match member outputs")
    records = []
    total_clamped = 0
    for i, sid in enumerate(subject_ids):
        members = [
            (member_mus[m][i], None if member_vars is None else member_vars[m][i])
            for m in range(M)
        ]
        comb = ensemble_combine(members, subject_id=sid, target_names=target_names)
        total_clamped += comb.n_clamped
        mean, var_total = standardizer.destandardize_mean_var(comb.mu, comb.var_total)
        _, var_alea = standardizer.destandardize_mean_var(comb.mu, comb.var_aleatoric)
        _, var_epi = standardizer.destandardize_mean_var(comb.mu, comb.var_epistemic)
        records.append(PredictionRecord(
            subject_id=sid,
            mean=dict(zip(target_names, mean)),
            var_total=dict(zip(target_names, var_total)),
            var_aleatoric=dict(zip(target_names, var_alea)),
            var_epistemic=dict(zip(target_names, var_epi)),
        ))
    if total_clamped > 0.01 * N * T:
        raise EnsembleError(f"{total_clamped} of {N * T} epistemic entries needed "
                            "clamping (> 1%); numerical trouble upstream")
    return records


def filter_by_uncertainty(preds, target: str, exclude_fraction: float):
    """Drop the ceil(q*N) most-uncertain subjects for the named target.

    Ties break toward excluding the lexicographically larger subject_id.
    Returns (kept, excluded); kept preserves input order.
    """
    if not 0.0 <= exclude_fraction < 1.0:
        raise ValueError(f"exclude_fraction must be in [0, 1), got {exclude_fraction}")
    n_excl = math.ceil(exclude_fraction * len(preds))
    ranked = sorted(preds, key=lambda r: (r.var_total[target], r.subject_id), reverse=True)
    excluded = ranked[:n_excl]
    dropped = {r.subject_id for r in excluded}
    kept = [r for r in preds if r.subject_id not in dropped]
    return kept, excluded


def calibration_report(preds, truths: dict) -> dict:
    """Per-target z-scores, empirical coverage, and rank diagnostics.

    ``truths`` maps subject_id -> {target: value}. Coverage_68/95 count
    |z| <= 1 and |z| <= 1.96. Spearman correlations relate var_total to the
    absolute error and to the predicted mean; degenerate (constant) ranks
    report 0.0 and are flagged.
    """
    ids = [r.subject_id for r in preds if r.subject_id in truths]
    if len(ids) < 10:
        raise ValueError(f"calibration needs >= 10 subjects, got {len(ids)}")
    by_id = {r.subject_id: r for r in preds}
    targets = list(preds[0].mean)
    report = {}
    for t in targets:
        mu = np.array([by_id[s].mean[t] for s in ids])
        var = np.array([by_id[s].var_total[t] for s in ids])
        truth = np.array([truths[s][t] for s in ids])
        if (var <= 0).any():
            raise ValueError(f"{t}: calibration requires var_total > 0 for all records")
        z = (truth - mu) / np.sqrt(var)
        err = np.abs(truth - mu)
        degenerate = bool(np.all(var == var[0]))

        def spear(a, b):
            if degenerate or np.all(a == a[0]) or np.all(b == b[0]):
                return 0.0
            return float(stats.spearmanr(a, b).statistic)

        report[t] = {
            "n": len(ids),
            "z_scores": z.tolist(),
            "coverage_68": float(np.mean(np.abs(z) <= 1.0)),
            "coverage_95": float(np.mean(np.abs(z) <= 1.96)),
            "uncertainty_error_spearman": spear(var, err),
            "uncertainty_value_spearman": spear(var, mu),
            "degenerate_uncertainty_ranks": degenerate,
        }
    return report


def write_predictions_csv(records, target_names, path) -> None:
    cols = ["subject_id"]
    for t in target_names:
        cols += [f"{t}_mean", f"{t}_var_total", f"{t}_var_alea", f"{t}_var_epi"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in sorted(records, key=lambda r: r.subject_id):
            row = [r.subject_id]
            for t in target_names:
                row += [repr(float(r.mean[t])), repr(float(r.var_total[t])),
                        repr(float(r.var_aleatoric[t])),
                        repr(float(r.var_epistemic[t]))]
            w.writerow(row)


def read_predictions_csv(path):
    """Returns (target_names, list of PredictionRecord)."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: empty predictions file")
    names = []
    for col in rows[0]:
        if col.endswith("_mean"):
            names.append(col[: -len("_mean")])
    records = []
    for row in rows:
        records.append(PredictionRecord(
            subject_id=row["subject_id"],
            mean={t: float(row[f"{t}_mean"]) for t in names},
            var_total={t: float(row[f"{t}_var_total"]) for t in names},
            var_aleatoric={t: float(row[f"{t}_var_alea"]) for t in names},
            var_epistemic={t: float(row[f"{t}_var_epi"]) for t in names},
        ))
    return names, records
