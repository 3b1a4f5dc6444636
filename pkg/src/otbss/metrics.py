"""Separation quality metrics: SDR and SIR with permutation alignment.

Each estimate is decomposed against the reference signals by projecting
onto spans of time-shifted references (time-invariant FIR projection,
512 taps): the part explained by the matched reference is the target,
the extra part explained by the other references is interference, and
the remainder is artifact. Metrics are reported under the estimate
permutation that maximizes the mean SIR.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

from .audio import TimeSignal

FILTER_LEN = 512
CLAMP_DB = 100.0


@dataclass(frozen=True)
class EvalResult:
    """Per-source dB metrics under the best estimate-to-reference map.

    ``permutation[j]`` is the estimate index assigned to reference j;
    ``sdr[j]`` and ``sir[j]`` score that assignment. Values are clamped
    to ``+-clamp`` dB so perfect or empty components stay finite.
    """

    sdr: np.ndarray
    sir: np.ndarray
    permutation: tuple
    clamp: float = CLAMP_DB


class Improvement(tuple):
    """Per-source (sdr, sir) dB deltas of processed over unprocessed."""

    __slots__ = ()

    def __new__(cls, sdr, sir):
        return super().__new__(cls, (np.asarray(sdr), np.asarray(sir)))

    @property
    def sdr(self):
        return self[0]

    @property
    def sir(self):
        return self[1]


def _as_mono(signals, what: str) -> np.ndarray:
    rows = []
    rate = None
    for sig in signals:
        if isinstance(sig, TimeSignal):
            if sig.channels != 1:
                raise ValueError(f"{what} must be mono")
            if rate is not None and sig.sample_rate != rate:
                raise ValueError(f"{what} sample rates differ")
            rate = sig.sample_rate
            rows.append(sig.samples[0])
        else:
            arr = np.asarray(sig, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"{what} must be one-dimensional")
            rows.append(arr)
    if not rows:
        raise ValueError(f"need at least one {what}")
    length = len(rows[0])
    if any(len(r) != length for r in rows):
        raise ValueError(f"{what} lengths differ")
    return np.asarray(rows, dtype=np.float64)


def _shifted_gram(refs: np.ndarray, n_fft: int, flen: int) -> tuple:
    """Gram matrix of all time-shifted references, assembled per block."""
    n_src = refs.shape[0]
    spectra = np.fft.rfft(refs, n_fft, axis=1)
    gram = np.zeros((n_src * flen, n_src * flen))
    for i in range(n_src):
        for j in range(i, n_src):
            corr = np.fft.irfft(spectra[i] * np.conj(spectra[j]), n_fft)
            block = toeplitz(np.hstack((corr[0], corr[-1 : -flen : -1])), corr[:flen])
            gram[i * flen : (i + 1) * flen, j * flen : (j + 1) * flen] = block
            gram[j * flen : (j + 1) * flen, i * flen : (i + 1) * flen] = block.T
    return gram, spectra


def _cross_corr(spectra: np.ndarray, est: np.ndarray, n_fft: int, flen: int) -> np.ndarray:
    """Stacked correlations of the estimate with each shifted reference."""
    est_spec = np.fft.rfft(est, n_fft)
    out = np.empty((spectra.shape[0], flen))
    for i in range(spectra.shape[0]):
        corr = np.fft.irfft(spectra[i] * np.conj(est_spec), n_fft)
        out[i] = np.hstack((corr[0], corr[-1 : -flen : -1]))
    return out


def _solve_coeffs(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def _filter_sum(
    spectra: np.ndarray, coeffs: np.ndarray, flen: int, out_len: int, n_fft: int
) -> np.ndarray:
    """Sum of FIR-filtered references with the projection coefficients."""
    acc = np.zeros(out_len)
    for i in range(spectra.shape[0]):
        seg = np.fft.irfft(
            spectra[i] * np.fft.rfft(coeffs[i * flen : (i + 1) * flen], n_fft), n_fft
        )
        acc += seg[:out_len]
    return acc


def _db(num: float, den: float, clamp: float) -> float:
    tiny = np.finfo(np.float64).tiny
    if num <= tiny:
        return -clamp
    if den <= tiny:
        return clamp
    return float(np.clip(10.0 * np.log10(num / den), -clamp, clamp))


def sdr_sir(estimates, references, filter_len: int = FILTER_LEN) -> EvalResult:
    """Permutation-aligned SDR and SIR of estimates against references.

    For every (estimate, reference) pair the estimate is split into a
    target part (projection onto the time-shifted matched reference),
    an interference part (extra projection explained by the remaining
    references), and an artifact remainder. The returned metrics use
    the assignment with the largest mean SIR.
    """
    est = _as_mono(estimates, "estimates")
    refs = _as_mono(references, "references")
    if est.shape[0] != refs.shape[0]:
        raise ValueError("estimate and reference counts differ")
    if est.shape[1] != refs.shape[1]:
        raise ValueError("estimate and reference lengths differ")
    energies = np.sum(refs**2, axis=1)
    if np.any(energies == 0):
        raise ValueError("zero-energy reference")
    n_src, n_samples = refs.shape
    flen = int(filter_len)
    out_len = n_samples + flen - 1
    n_fft = 1 << int(np.ceil(np.log2(out_len)))
    gram_all, spectra = _shifted_gram(refs, n_fft, flen)

    sdr = np.empty((n_src, n_src))
    sir = np.empty((n_src, n_src))
    for i in range(n_src):
        rhs = _cross_corr(spectra, est[i], n_fft, flen)
        proj_all = _filter_sum(
            spectra, _solve_coeffs(gram_all, rhs.reshape(-1)), flen, out_len, n_fft
        )
        padded = np.concatenate((est[i], np.zeros(flen - 1)))
        for j in range(n_src):
            block = gram_all[j * flen : (j + 1) * flen, j * flen : (j + 1) * flen]
            coeff = _solve_coeffs(block, rhs[j])
            target = np.fft.irfft(spectra[j] * np.fft.rfft(coeff, n_fft), n_fft)[:out_len]
            interf = proj_all - target
            artif = padded - proj_all
            t_energy = float(np.sum(target**2))
            sdr[i, j] = _db(t_energy, float(np.sum((interf + artif) ** 2)), CLAMP_DB)
            sir[i, j] = _db(t_energy, float(np.sum(interf**2)), CLAMP_DB)

    best_perm = None
    best_mean = -np.inf
    for perm in itertools.permutations(range(n_src)):
        mean_sir = float(np.mean([sir[perm[j], j] for j in range(n_src)]))
        if mean_sir > best_mean:
            best_mean = mean_sir
            best_perm = perm
    return EvalResult(
        sdr=np.array([sdr[best_perm[j], j] for j in range(n_src)]),
        sir=np.array([sir[best_perm[j], j] for j in range(n_src)]),
        permutation=tuple(best_perm),
    )


def improvement(processed: EvalResult, unprocessed: EvalResult) -> Improvement:
    """Per-source dB gains of processed metrics over unprocessed.

    Both results are already permutation-aligned to the same reference
    order, so the difference is elementwise; clamped inputs subtract as
    clamped.
    """
    if len(processed.sdr) != len(unprocessed.sdr):
        raise ValueError("source counts differ")
    return Improvement(
        sdr=processed.sdr - unprocessed.sdr, sir=processed.sir - unprocessed.sir
    )
