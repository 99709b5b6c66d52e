"""Sampling diagnostics: ESS, path-KL, log Z error and lattice observables.

Observable index convention: row/column offsets k run over
{-floor(L/2), ..., floor(L/2)} and address physical row k mod L. For even L
the two ends alias the same row and both are kept, so error sums carry the
same normalisation as the error definitions (2L and L^2).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .lattice import spins


def ess(log_weights) -> float:
    """Normalised effective sample size (sum w)^2 / (M sum w^2), log-domain."""
    w = np.asarray(log_weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight vector")
    return float(np.exp(2 * logsumexp(w) - logsumexp(2 * w) - np.log(w.size)))


def path_kl_estimate(log_weights, log_Z: float) -> float:
    """KL(P^u || P*) ~ log Z - mean(W); may dip below 0 from noise."""
    return float(log_Z - np.mean(log_weights))


def tv_floor(probs, n: int) -> float:
    """Expected TV between pi and the histogram of n exact samples (normal approximation)."""
    p = np.asarray(probs, dtype=np.float64)
    return float(0.5 * np.sqrt(2 * p * (1 - p) / (np.pi * n)).sum())


def offsets(L: int) -> np.ndarray:
    return np.arange(-(L // 2), L // 2 + 1)


@dataclass
class ObservableReport:
    L: int
    kind: str
    mag_site: np.ndarray       # (L, L) per-site magnetization
    mag_row: np.ndarray        # (K,) over offsets
    mag_col: np.ndarray
    corr_row: np.ndarray       # (K, K)
    corr_col: np.ndarray
    corr_vs_distance: np.ndarray   # (L//2 + 1, 2): columns C_row, C_col
    n_samples: int

    def to_dict(self):
        return {
            "L": self.L, "kind": self.kind, "n_samples": self.n_samples,
            "offsets": offsets(self.L).tolist(),
            "mag_site": self.mag_site.tolist(),
            "mag_row": self.mag_row.tolist(), "mag_col": self.mag_col.tolist(),
            "corr_row": self.corr_row.tolist(), "corr_col": self.corr_col.tolist(),
            "corr_vs_distance": self.corr_vs_distance.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    def write_corr_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "C_row", "C_col"])
            for r, (a, b) in enumerate(self.corr_vs_distance):
                w.writerow([r, repr(float(a)), repr(float(b))])


def _aggregate(L, kind, m_site, C):
    """Row/column sums of per-site magnetization and pair correlation C (D x D)."""
    k = offsets(L) % L
    m = m_site.reshape(L, L)
    C4 = C.reshape(L, L, L, L)                         # (row_i, col_i, row_j, col_j)
    cols = np.arange(L)
    # C_row(k, l) = sum over columns c of C((k, c), (l, c))
    same_col = C4[:, cols, :, cols]                    # (c, row_i, row_j)
    rowcorr = same_col.sum(0)
    same_row = C4[cols, :, cols, :]                    # (r, col_i, col_j)
    colcorr = same_row.sum(0)
    dist = np.arange(L // 2 + 1)
    rr = np.arange(L)
    cvd = np.stack([np.array([rowcorr[rr, (rr + r) % L].mean() for r in dist]),
                    np.array([colcorr[rr, (rr + r) % L].mean() for r in dist])], 1)
    return ObservableReport(L, kind, m, m.sum(1)[k], m.sum(0)[k],
                            rowcorr[np.ix_(k, k)], colcorr[np.ix_(k, k)], cvd, 0)


def ising_observables(samples, L: int | None = None) -> ObservableReport:
    x = np.asarray(samples)
    n, D = x.shape
    L = L or int(round(np.sqrt(D)))
    s = spins(x).astype(np.float64)
    m = s.mean(0)
    C = s.T @ s / n - np.outer(m, m)
    rep = _aggregate(L, "ising", m, C)
    rep.n_samples = n
    return rep


def potts_magnetization(x, q: int) -> np.ndarray:
    x = np.asarray(x)
    frac = np.stack([(x == c).mean(0) for c in range(1, q + 1)])
    return (q * frac.max(0) - 1.0) / (q - 1.0)


def potts_observables(samples, q: int, L: int | None = None) -> ObservableReport:
    x = np.asarray(samples)
    n, D = x.shape
    L = L or int(round(np.sqrt(D)))
    m = potts_magnetization(x, q)
    eq = np.zeros((D, D))
    for c in range(1, q + 1):
        ind = (x == c).astype(np.float64)
        eq += ind.T @ ind
    C = eq / n - 1.0 / q
    rep = _aggregate(L, "potts", m, C)
    rep.n_samples = n
    return rep


def observables(samples, spec) -> ObservableReport:
    if spec.kind == "ising":
        return ising_observables(samples, spec.L)
    return potts_observables(samples, spec.N, spec.L)


def observable_errors(report: ObservableReport, truth: ObservableReport) -> dict:
    if report.L != truth.L or report.mag_row.shape != truth.mag_row.shape:
        raise ValueError("reports have different lattice sizes")
    L = report.L
    mag = (np.abs(report.mag_row - truth.mag_row).sum()
           + np.abs(report.mag_col - truth.mag_col).sum()) / (2 * L)
    corr = (np.abs(report.corr_row - truth.corr_row).sum()
            + np.abs(report.corr_col - truth.corr_col).sum()) / L ** 2
    return {"mag_err": float(mag), "corr_err": float(corr)}


def observable_error_band(samples_a, samples_b, spec, n_sigma=3.0) -> dict:
    """n-sigma upper bands for observable_errors between two i.i.d. sample sets.

    Each row/column aggregate is a mean of per-sample statistics, so its
    standard error is estimated from the per-sample values; the band sums the
    per-entry n-sigma bounds with the error formula's normalisation.
    """
    q = spec.N
    pooled = np.concatenate([np.asarray(samples_a), np.asarray(samples_b)])
    if spec.kind == "ising":
        centre = spins(pooled).astype(np.float64).mean(0)
    else:
        frac = np.stack([(pooled == c).mean(0) for c in range(1, q + 1)])
        mode = frac.argmax(0) + 1

    def per_sample_stats(x):
        # first-order influence of each sample on every aggregate entry
        x = np.asarray(x)
        L = spec.L
        k = offsets(L) % L
        if spec.kind == "ising":
            v = spins(x).astype(np.float64)
            m = v
            c = (v - centre).reshape(-1, L, L)
            pair_row = c[:, :, None, :] * c[:, None, :, :]     # (n, ri, rj, col)
            pair_col = c[:, :, :, None] * c[:, :, None, :]     # (n, row, ci, cj)
        else:
            m = (x == mode).astype(np.float64) * q / (q - 1.0)
            v = x.reshape(-1, L, L)
            pair_row = (v[:, :, None, :] == v[:, None, :, :]).astype(np.float64)
            pair_col = (v[:, :, :, None] == v[:, :, None, :]).astype(np.float64)
        m = m.reshape(-1, L, L)
        mr = m.sum(2)[:, k]
        mc = m.sum(1)[:, k]
        cr = pair_row.sum(3)[:, k][:, :, k]
        cc = pair_col.sum(1)[:, k][:, :, k]
        return mr, mc, cr, cc

    def se(a):
        return a.std(0, ddof=1) / np.sqrt(a.shape[0])

    sa = per_sample_stats(samples_a)
    sb = per_sample_stats(samples_b)
    bands = [n_sigma * np.sqrt(se(a) ** 2 + se(b) ** 2) for a, b in zip(sa, sb)]
    L = spec.L
    return {"mag_err": float((bands[0].sum() + bands[1].sum()) / (2 * L)),
            "corr_err": float((bands[2].sum() + bands[3].sum()) / L ** 2)}
