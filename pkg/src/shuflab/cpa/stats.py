"""Pearson correlation, bulk correlation scans over candidate sets, ranking and PGE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import UndefinedCorrelation
from ..leaksim.model import HW_LUT

TIE_EPS = 1e-9


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise UndefinedCorrelation("pearson needs two equal-length vectors of length >= 2")
    d = len(x)
    sx, sy = x.sum(), y.sum()
    num = d * (x * y).sum() - sx * sy
    vx = d * (x * x).sum() - sx * sx
    vy = d * (y * y).sum() - sy * sy
    if vx <= 0 or vy <= 0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip(num / np.sqrt(vx * vy), -1.0, 1.0))


def product_hypotheses(x, cands) -> np.ndarray:
    """HW of the low 16 bits of input_d * candidate_i, shape (D, C)."""
    x = np.asarray(x, dtype=np.int64)
    return HW_LUT[(x[:, None] * np.asarray(cands, dtype=np.int64)[None, :]) & 0xFFFF]


def sum_hypotheses(acc, cands) -> np.ndarray:
    """HW of the low 16 bits of acc_d + candidate_i (bias addition)."""
    acc = np.asarray(acc, dtype=np.int64)
    return HW_LUT[(acc[:, None] + np.asarray(cands, dtype=np.int64)[None, :]) & 0xFFFF]


def rank_key(rho_abs: np.ndarray, cands: np.ndarray) -> np.ndarray:
    """Ordering: |rho| descending, then smaller |value|, then smaller value."""
    r = np.round(rho_abs / TIE_EPS) * TIE_EPS
    return np.lexsort((cands, np.abs(cands), -r))


def _before(r, c, rc, cc) -> np.ndarray:
    """Which (|rho|, value) pairs rank ahead of the reference pair."""
    higher = r > rc + TIE_EPS
    tie = np.abs(r - rc) <= TIE_EPS
    ahead = (np.abs(c) < abs(cc)) | ((np.abs(c) == abs(cc)) & (c < cc))
    return higher | (tie & ahead)


@dataclass
class ScanResult:
    checkpoints: np.ndarray          # (m,)
    rho_max: np.ndarray              # (m, W) max |rho| over candidates
    top_values: np.ndarray           # (W, K) best candidates at the last checkpoint
    top_rho: np.ndarray              # (W, K) signed rho of those
    rho_correct: np.ndarray | None = None   # (m, W)
    pge: np.ndarray | None = None            # (m, W)


LEVEL_TOL = 0.5   # HW units


def _moments_rho(n, sh, shh, st, stt, sht, level=None):
    num = n * sht - sh[:, None] * st[None, :]
    vh = n * shh - sh * sh
    vt = n * stt - st * st
    den = np.sqrt(np.maximum(vh, 0)[:, None] * np.maximum(vt, 0)[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
    rho = np.clip(rho, -1, 1)
    if level is not None:
        # constant hypotheses carry no correlation; score them by whether the
        # mean sample sits at the level they predict
        base, alpha = level
        flat = vh <= 0
        if flat.any():
            pred = base + alpha * sh[flat] / n
            fit = np.abs(st[None, :] / n - pred[:, None]) <= LEVEL_TOL * abs(alpha)
            rho[flat] = fit.astype(np.float64)
    return rho


def _prefix_rho(H: np.ndarray, T: np.ndarray, checkpoints: np.ndarray, level=None) -> np.ndarray:
    """rho for each checkpoint prefix, shape (m, C, W)."""
    out = np.empty((len(checkpoints), H.shape[1], T.shape[1]))
    sh = np.zeros(H.shape[1]); shh = np.zeros(H.shape[1])
    st = np.zeros(T.shape[1]); stt = np.zeros(T.shape[1])
    sht = np.zeros((H.shape[1], T.shape[1]))
    start = 0
    for m, stop in enumerate(checkpoints):
        h, t = H[start:stop], T[start:stop]
        sh += h.sum(0); shh += (h * h).sum(0)
        st += t.sum(0); stt += (t * t).sum(0)
        sht += h.T @ t
        out[m] = _moments_rho(stop, sh, shh, st, stt, sht, level)
        start = stop
    return out


def correlation_scan(operand, T, cands, hypothesis: Callable = product_hypotheses,
                     checkpoints=None, correct=None, top: int = 10, chunk: int = 8192,
                     level: tuple[float, float] | None = None) -> ScanResult:
    """Correlate candidate hypotheses against several sample columns.

    ``operand`` (D,) feeds ``hypothesis(operand, cands)``; ``T`` (D, W) holds the
    measured samples, one column per secret sharing this operand. ``correct``
    (W,) optionally gives the true values so PGE and rho_correct can be tracked.
    ``level`` = (baseline, alpha) lets constant hypotheses compete through the
    mean sample level; without it they score 0.
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    D, W = T.shape
    cands = np.asarray(cands, dtype=np.int64)
    cps = np.asarray([D] if checkpoints is None else checkpoints, dtype=np.int64)
    if np.any(np.diff(cps) <= 0) or cps[-1] > D or cps[0] < 2:
        raise ValueError("checkpoints must be increasing within [2, D]")
    m = len(cps)
    rho_max = np.zeros((m, W))
    rho_corr = pge = None
    if correct is not None:
        correct = np.asarray(correct, dtype=np.int64)
        Hc = np.stack([hypothesis(operand, [c])[:, 0] for c in correct], axis=1).astype(np.float64)
        rc_all = np.stack([_prefix_rho(Hc[:, [w]], T[:, [w]], cps, level)[:, 0, 0] for w in range(W)], axis=1)
        rho_corr = np.abs(rc_all)
        pge = np.zeros((m, W), dtype=np.int64)
    best_v = np.zeros((W, 0), dtype=np.int64)
    best_r = np.zeros((W, 0))
    for s in range(0, len(cands), chunk):
        cc = cands[s:s + chunk]
        H = hypothesis(operand, cc).astype(np.float64)
        R = _prefix_rho(H, T, cps, level)                      # (m, C, W)
        A = np.abs(R)
        rho_max = np.maximum(rho_max, A.max(axis=1))
        if correct is not None:
            for w in range(W):
                for k in range(m):
                    pge[k, w] += int(_before(A[k, :, w], cc, rho_corr[k, w], correct[w]).sum())
        # merge running top-K at the final checkpoint
        vals = np.concatenate([best_v, np.broadcast_to(cc, (W, len(cc)))], axis=1)
        rhos = np.concatenate([best_r, R[-1].T], axis=1)
        keep = np.empty((W, min(top, vals.shape[1])), dtype=np.int64)
        for w in range(W):
            keep[w] = rank_key(np.abs(rhos[w]), vals[w])[:keep.shape[1]]
        best_v = np.take_along_axis(vals, keep, axis=1)
        best_r = np.take_along_axis(rhos, keep, axis=1)
    return ScanResult(cps, rho_max, best_v, best_r, rho_corr, pge)


def rank_candidates(samples, operand, cands, hypothesis: Callable = product_hypotheses,
                    level: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Full ranking of ``cands`` for one sample column: (values, signed rho) best first."""
    H = hypothesis(operand, cands).astype(np.float64)
    rho = _prefix_rho(H, np.asarray(samples, dtype=np.float64)[:, None], np.array([len(samples)]), level)[0, :, 0]
    order = rank_key(np.abs(rho), np.asarray(cands, dtype=np.int64))
    return np.asarray(cands)[order], rho[order]


def pge(ranked_values, correct: int) -> int:
    """Position of the correct value in a ranking (0 = recovered)."""
    hits = np.flatnonzero(np.asarray(ranked_values) == correct)
    if len(hits) == 0:
        raise ValueError(f"{correct} not among the candidates")
    return int(hits[0])
