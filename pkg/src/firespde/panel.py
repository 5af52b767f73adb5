"""Observation panels of burnt area (BA) and fire counts (CNT).

Every value array travels with a boolean ``*_obs`` mask; values under a
``False`` mask are meaningless and never read.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import DataIntegrityError

__all__ = [
    "ObservationPanel",
    "IndicatorPanel",
    "propagate_zeros",
    "build_indicator",
    "read_panel_csv",
    "write_panel_csv",
    "default_period_labels",
]


def default_period_labels(T, first_year=1993, months=range(3, 10)):
    months = list(months)
    return [(first_year + t // len(months), months[t % len(months)]) for t in range(T)]


@dataclass(frozen=True, eq=False)
class ObservationPanel:
    """N pixels by T periods of BA (reals) and CNT (integers)."""

    locations: np.ndarray
    ba: np.ndarray
    ba_obs: np.ndarray
    cnt: np.ndarray
    cnt_obs: np.ndarray
    period_labels: tuple = ()
    pixel_ids: tuple = ()

    def __post_init__(self):
        N, T = self.ba.shape
        for name in ("ba_obs", "cnt", "cnt_obs"):
            if getattr(self, name).shape != (N, T):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(N, T)}")
        if self.locations.shape != (N, 2):
            raise ValueError("locations must be (N, 2)")
        if not self.period_labels:
            object.__setattr__(self, "period_labels", tuple(default_period_labels(T)))
        if not self.pixel_ids:
            object.__setattr__(self, "pixel_ids", tuple(range(N)))
        if len(self.period_labels) != T or len(self.pixel_ids) != N:
            raise ValueError("label lengths do not match panel dimensions")
        if np.any(self.ba[self.ba_obs] < 0) or np.any(self.cnt[self.cnt_obs] < 0):
            raise DataIntegrityError("negative BA or CNT values")

    @property
    def N(self) -> int:
        return self.ba.shape[0]

    @property
    def T(self) -> int:
        return self.ba.shape[1]

    @property
    def months(self) -> np.ndarray:
        return np.array([m for _, m in self.period_labels])

    def inconsistent_cells(self) -> np.ndarray:
        both = self.ba_obs & self.cnt_obs
        return both & ((self.ba == 0) != (self.cnt == 0))

    def check_consistency(self):
        bad = self.inconsistent_cells()
        if bad.any():
            i, t = np.argwhere(bad)[0]
            raise DataIntegrityError(
                f"{int(bad.sum())} cells have one variable zero and the other positive, "
                f"first at pixel {self.pixel_ids[i]}, period {self.period_labels[t]}"
            )

    def masked(self, ba_hide=None, cnt_hide=None) -> ObservationPanel:
        """Copy with extra cells hidden."""
        ba_obs = self.ba_obs.copy() if ba_hide is None else self.ba_obs & ~ba_hide
        cnt_obs = self.cnt_obs.copy() if cnt_hide is None else self.cnt_obs & ~cnt_hide
        return replace(self, ba_obs=ba_obs, cnt_obs=cnt_obs)


@dataclass(frozen=True, eq=False)
class IndicatorPanel:
    """Occurrence indicator with its own observation mask."""

    z: np.ndarray
    observed: np.ndarray
    locations: np.ndarray | None = None

    @property
    def shape(self):
        return self.z.shape


def propagate_zeros(panel: ObservationPanel) -> ObservationPanel:
    """Fill a missing variable with zero where the other one is observed zero."""
    panel.check_consistency()
    ba_zero = panel.ba_obs & (panel.ba == 0)
    cnt_zero = panel.cnt_obs & (panel.cnt == 0)
    fill_cnt = ba_zero & ~panel.cnt_obs
    fill_ba = cnt_zero & ~panel.ba_obs
    ba = np.where(fill_ba, 0.0, panel.ba)
    cnt = np.where(fill_cnt, 0, panel.cnt)
    return replace(panel, ba=ba, cnt=cnt, ba_obs=panel.ba_obs | fill_ba, cnt_obs=panel.cnt_obs | fill_cnt)


def build_indicator(panel: ObservationPanel) -> IndicatorPanel:
    """Occurrence indicator: 1 if either variable is observed positive,
    0 if either is observed zero, missing if both are missing."""
    panel.check_consistency()
    pos = (panel.ba_obs & (panel.ba > 0)) | (panel.cnt_obs & (panel.cnt > 0))
    observed = panel.ba_obs | panel.cnt_obs
    return IndicatorPanel(z=pos.astype(np.int8), observed=observed, locations=panel.locations)


def _fmt(v, obs, integer=False):
    if not obs:
        return "NA"
    return str(int(v)) if integer else repr(float(v))


def write_panel_csv(panel: ObservationPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pixel_id", "lon", "lat", "year", "month", "cnt", "ba"])
        for i in range(panel.N):
            lon, lat = panel.locations[i]
            for t, (year, month) in enumerate(panel.period_labels):
                w.writerow([
                    panel.pixel_ids[i], repr(float(lon)), repr(float(lat)), year, month,
                    _fmt(panel.cnt[i, t], panel.cnt_obs[i, t], integer=True),
                    _fmt(panel.ba[i, t], panel.ba_obs[i, t]),
                ])


def read_panel_csv(path) -> ObservationPanel:
    """Load a rectangular panel; every pixel must appear in every period."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataIntegrityError(f"{path} has no rows")
    pixel_ids = list(dict.fromkeys(_parse_id(r["pixel_id"]) for r in rows))
    periods = sorted({(int(r["year"]), int(r["month"])) for r in rows})
    pix_index = {p: i for i, p in enumerate(pixel_ids)}
    per_index = {p: t for t, p in enumerate(periods)}
    N, T = len(pixel_ids), len(periods)
    if len(rows) != N * T:
        raise DataIntegrityError(f"panel is not rectangular: {len(rows)} rows for {N} pixels x {T} periods")
    locations = np.zeros((N, 2))
    ba = np.zeros((N, T))
    cnt = np.zeros((N, T), dtype=np.int64)
    ba_obs = np.zeros((N, T), dtype=bool)
    cnt_obs = np.zeros((N, T), dtype=bool)
    seen = np.zeros((N, T), dtype=bool)
    for r in rows:
        i = pix_index[_parse_id(r["pixel_id"])]
        t = per_index[(int(r["year"]), int(r["month"]))]
        if seen[i, t]:
            raise DataIntegrityError(f"duplicate row for pixel {pixel_ids[i]}, period {periods[t]}")
        seen[i, t] = True
        locations[i] = float(r["lon"]), float(r["lat"])
        if r["cnt"] != "NA":
            cnt[i, t] = int(float(r["cnt"]))
            cnt_obs[i, t] = True
        if r["ba"] != "NA":
            ba[i, t] = float(r["ba"])
            ba_obs[i, t] = True
    if not seen.all():
        raise DataIntegrityError("panel is not rectangular")
    return ObservationPanel(locations, ba, ba_obs, cnt, cnt_obs, tuple(periods), tuple(pixel_ids))


def _parse_id(s):
    try:
        return int(s)
    except ValueError:
        return s
