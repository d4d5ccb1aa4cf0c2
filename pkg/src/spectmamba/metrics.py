"""Frame-level melody metrics: voicing recall / false alarm, raw pitch and chroma
accuracy, overall accuracy.

Pitches are compared in cents relative to 10 Hz. An estimate may carry a
pitch on frames it declares unvoiced (negative Hz in contour files); raw pitch
and chroma accuracy score that pitch regardless of the voicing decision.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

CENT_REFERENCE_HZ = 10.0
TOLERANCE_CENTS = 50.0
METRICS = ("vr", "vfa", "rpa", "rca", "oa")


@dataclass
class ContourPair:
    ref_voiced: np.ndarray
    ref_cents: np.ndarray
    est_voiced: np.ndarray
    est_cents: np.ndarray  # NaN where the estimate has no pitch

    def __post_init__(self):
        self.ref_voiced = np.asarray(self.ref_voiced, dtype=bool)
        self.est_voiced = np.asarray(self.est_voiced, dtype=bool)
        self.ref_cents = np.asarray(self.ref_cents, dtype=np.float64)
        self.est_cents = np.asarray(self.est_cents, dtype=np.float64)
        n = self.ref_voiced.size
        if n == 0:
            raise ValidationError("contour pair is empty")
        if not (self.ref_cents.size == self.est_voiced.size == self.est_cents.size == n):
            raise ValidationError("reference and estimate contours differ in length")


@dataclass
class EvalReport:
    vr: float | None
    vfa: float | None
    rpa: float | None
    rca: float | None
    oa: float | None
    frames: int
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {m: (None if getattr(self, m) is None else round(float(getattr(self, m)), 2))
               for m in METRICS}
        out["frames"] = int(self.frames)
        return out


def hz_to_cents(f_hz) -> np.ndarray:
    """Cents above 10 Hz of ``|f|``; NaN where f is 0."""
    f = np.abs(np.asarray(f_hz, dtype=np.float64))
    out = np.full(f.shape, np.nan)
    nz = f > 0
    out[nz] = 1200.0 * np.log2(f[nz] / CENT_REFERENCE_HZ)
    return out


def pair_from_hz(ref_times, ref_hz, est_times, est_hz) -> ContourPair:
    """Resample the estimate onto the reference time base by nearest neighbor.

    Reference frames with f > 0 are voiced. Estimate frames with f > 0 are
    voiced; f < 0 marks an unvoiced frame that still carries pitch ``|f|``.
    """
    ref_times = np.asarray(ref_times, dtype=np.float64)
    ref_hz = np.asarray(ref_hz, dtype=np.float64)
    est_times = np.asarray(est_times, dtype=np.float64)
    est_hz = np.asarray(est_hz, dtype=np.float64)
    if est_times.size == 0 or ref_times.size == 0:
        raise ValidationError("contours must be nonempty")
    if est_times.shape != ref_times.shape or not np.allclose(est_times, ref_times):
        right = np.clip(np.searchsorted(est_times, ref_times), 0, est_times.size - 1)
        left = np.clip(right - 1, 0, est_times.size - 1)
        use_left = np.abs(ref_times - est_times[left]) <= np.abs(est_times[right] - ref_times)
        est_hz = est_hz[np.where(use_left, left, right)]
    return ContourPair(ref_hz > 0, hz_to_cents(np.maximum(ref_hz, 0)), est_hz > 0,
                       hz_to_cents(est_hz))


def _pct(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def evaluate(pair: ContourPair, tolerance_cents: float = TOLERANCE_CENTS) -> EvalReport:
    ref_v, est_v = pair.ref_voiced, pair.est_voiced
    has_pitch = np.isfinite(pair.est_cents) & ref_v
    diff = np.where(has_pitch, pair.est_cents - np.nan_to_num(pair.ref_cents), 0.0)
    pitch_ok = has_pitch & (np.abs(diff) <= tolerance_cents)
    folded = diff - 1200.0 * np.round(diff / 1200.0)
    chroma_ok = has_pitch & (np.abs(folded) <= tolerance_cents)

    n_voiced = int(ref_v.sum())
    n_unvoiced = int((~ref_v).sum())
    counts = {
        "ref_voiced": n_voiced,
        "ref_unvoiced": n_unvoiced,
        "voiced_hits": int((ref_v & est_v).sum()),
        "false_alarms": int((~ref_v & est_v).sum()),
        "pitch_correct": int(pitch_ok.sum()),
        "chroma_correct": int(chroma_ok.sum()),
        "overall_correct": int((pitch_ok & est_v).sum() + (~ref_v & ~est_v).sum()),
    }
    return EvalReport(
        vr=_pct(counts["voiced_hits"], n_voiced),
        vfa=_pct(counts["false_alarms"], n_unvoiced),
        rpa=_pct(counts["pitch_correct"], n_voiced),
        rca=_pct(counts["chroma_correct"], n_voiced),
        oa=_pct(counts["overall_correct"], ref_v.size),
        frames=ref_v.size,
        counts=counts,
    )


def aggregate(reports: list[EvalReport], weights=None) -> EvalReport:
    """Frame-weighted mean of per-clip reports; absent metrics are skipped."""
    if not reports:
        raise ValidationError("nothing to aggregate")
    w = np.asarray([r.frames for r in reports] if weights is None else weights, dtype=np.float64)
    values = {}
    for m in METRICS:
        pairs = [(getattr(r, m), wi) for r, wi in zip(reports, w) if getattr(r, m) is not None]
        total = sum(wi for _, wi in pairs)
        values[m] = None if not pairs or total == 0 else sum(v * wi for v, wi in pairs) / total
    counts: dict = {}
    for r in reports:
        for key, v in r.counts.items():
            counts[key] = counts.get(key, 0) + v
    return EvalReport(frames=int(sum(r.frames for r in reports)), counts=counts, **values)


def write_report_json(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)


def write_report_csv(path, named_reports: list[tuple[str, EvalReport]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip", *METRICS, "frames"])
        for name, rep in named_reports:
            row = rep.to_json()
            writer.writerow([name, *("" if row[m] is None else f"{row[m]:.2f}" for m in METRICS),
                             row["frames"]])
