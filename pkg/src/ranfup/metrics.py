"""Evaluation metrics: log-spectral distortion, ILD/ITD errors, reports.

LSD is the per-channel RMS of the dB log-ratio between two magnitude
spectra, averaged over the two ears.  ITD errors are reported in
microseconds, ILD errors as full-band RMS level-ratio differences in dB.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import dsp
from .bundle import HrirSet, MeasurementSubset
from .errors import DataError


def lsd(a_star: np.ndarray, a: np.ndarray, floor_ratio: float = dsp.MAG_FLOOR_RATIO) -> float:
    """Log-spectral distortion in dB between ``[F, 2]`` linear magnitudes.

    ``(1/2) * sum_c sqrt((1/F) * sum_f (20 log10(a / a_star))^2)``; both
    inputs are floored per channel before the log so the ratio is finite.
    """
    a_star = np.asarray(a_star, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a_star.shape != a.shape:
        raise DataError(f"magnitude shapes differ: {a_star.shape} vs {a.shape}")
    diff_db = dsp.to_db(a, floor_ratio) - dsp.to_db(a_star, floor_ratio)
    return float(np.mean(np.sqrt(np.mean(diff_db**2, axis=0))))


def lsd_from_db(a_star_db: np.ndarray, a_db: np.ndarray) -> float:
    """LSD when both spectra are already in dB."""
    diff = np.asarray(a_db, dtype=np.float64) - np.asarray(a_star_db, dtype=np.float64)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=0))))


def mae_eps(tau_star: float, tau: float, eps: float) -> float:
    """Epsilon-insensitive absolute error: ``max(|tau_star - tau| - eps, 0)``."""
    if eps < 0:
        raise DataError(f"eps must be non-negative, got {eps}")
    return max(abs(float(tau_star) - float(tau)) - float(eps), 0.0)


def ild(x: np.ndarray) -> float:
    """Interaural level difference in dB: ``20 log10(rms_left / rms_right)``.

    Accepts a time-domain ``[2, L]`` pair or an ``[F, 2]`` one-sided
    magnitude spectrum; both give the same value for matched signals
    (Parseval).  A ``[2, 2]`` input is read as time-domain.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected [2, L] or [F, 2], got shape {x.shape}")
    if x.shape[0] == 2:
        energy = np.sum(x**2, axis=1)
    elif x.shape[1] == 2:
        weights = np.full(x.shape[0], 2.0)
        weights[0] = weights[-1] = 1.0  # DC and Nyquist bins appear once
        energy = weights @ x**2
    else:
        raise DataError(f"expected [2, L] or [F, 2], got shape {x.shape}")
    if np.any(energy <= 0.0):
        raise DataError("cannot compute ILD with a zero-energy channel")
    return float(10.0 * np.log10(energy[0] / energy[1]))


@dataclass
class EvalReport:
    """Per-direction and mean errors over an evaluated direction set."""

    direction_indices: list[int]
    itd_error_us: list[float]
    ild_error_db: list[float]
    lsd_db: list[float]

    def __post_init__(self) -> None:
        n = len(self.direction_indices)
        if not (len(self.itd_error_us) == len(self.ild_error_db) == len(self.lsd_db) == n):
            raise DataError("per-direction metric lists must have equal lengths")
        if any(v < 0 for v in self.itd_error_us + self.ild_error_db + self.lsd_db):
            raise DataError("error metrics must be non-negative")

    @property
    def mean_itd_error_us(self) -> float:
        return float(np.mean(self.itd_error_us))

    @property
    def mean_ild_error_db(self) -> float:
        return float(np.mean(self.ild_error_db))

    @property
    def mean_lsd_db(self) -> float:
        return float(np.mean(self.lsd_db))

    def to_dict(self) -> dict:
        return {
            "direction_indices": list(self.direction_indices),
            "itd_error_us": list(self.itd_error_us),
            "ild_error_db": list(self.ild_error_db),
            "lsd_db": list(self.lsd_db),
            "mean": {
                "itd_error_us": self.mean_itd_error_us,
                "ild_error_db": self.mean_ild_error_db,
                "lsd_db": self.mean_lsd_db,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            direction_indices=list(data["direction_indices"]),
            itd_error_us=list(data["itd_error_us"]),
            ild_error_db=list(data["ild_error_db"]),
            lsd_db=list(data["lsd_db"]),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["direction_index", "itd_error_us", "ild_error_db", "lsd_db"])
        for row in zip(self.direction_indices, self.itd_error_us, self.ild_error_db, self.lsd_db):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        writer.writerow(
            ["mean", repr(self.mean_itd_error_us), repr(self.mean_ild_error_db), repr(self.mean_lsd_db)]
        )
        return buf.getvalue()


def evaluate(
    pred: HrirSet,
    truth: HrirSet,
    measured: MeasurementSubset | None = None,
    exclude_measured: bool = True,
) -> EvalReport:
    """Compare a predicted HRIR set against the ground truth, per direction.

    ITD errors convert sample offsets to microseconds via the truth sample
    rate.  When ``exclude_measured`` is set, directions in ``measured`` are
    left out of the report entirely.
    """
    if pred.num_directions != truth.num_directions:
        raise DataError(
            f"grids differ: {pred.num_directions} vs {truth.num_directions} directions"
        )
    if pred.sample_rate != truth.sample_rate:
        raise DataError(f"sample rates differ: {pred.sample_rate} vs {truth.sample_rate}")
    skip = set(measured.indices) if (measured is not None and exclude_measured) else set()
    indices = [i for i in range(truth.num_directions) if i not in skip]
    us_per_sample = 1e6 / truth.sample_rate

    itd_err, ild_err, lsd_err = [], [], []
    for i in indices:
        p = pred.impulse_responses[i]
        t = truth.impulse_responses[i]
        d_itd = dsp.estimate_itd(p, pred.sample_rate) - dsp.estimate_itd(t, truth.sample_rate)
        itd_err.append(abs(d_itd) * us_per_sample)
        ild_err.append(abs(ild(p) - ild(t)))
        lsd_err.append(lsd(dsp.magnitude_spectrum(t), dsp.magnitude_spectrum(p)))
    return EvalReport(indices, itd_err, ild_err, lsd_err)
