"""Flood-awareness measure: an exponentially decaying count of past regional
flood events.

Awareness in region r on day t is sum over recorded events at day d <= t of
2^(-(t - d) / tau), where tau is the half-life in days. Each event bumps
awareness by one and the bump halves every tau days. Day counts are exact
calendar-day differences; the event record starts at 2000-01-01.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

T0 = pd.Timestamp("2000-01-01")

# half-life presets in days (365.25 d/y, rounded)
TAU_PRESETS = {"7y": 2557, "10y": 3652, "17y": 6209}
DEFAULT_TAU = TAU_PRESETS["10y"]

TERCILE_LABELS = ("low", "medium", "high")


class AwarenessError(ValueError):
    pass


def load_events(source) -> pd.DataFrame:
    """Read a flood-event CSV (region_id, event_start, source) into the
    canonical record: duplicates collapsed, dates validated against t0."""
    df = pd.read_csv(source, comment="#", dtype={"region_id": str})
    if "region_id" not in df.columns or "event_start" not in df.columns:
        raise AwarenessError("event file needs region_id and event_start columns")
    df["event_start"] = pd.to_datetime(df["event_start"])
    if "source" not in df.columns:
        df["source"] = "custom"
    return normalize_events(df)


def normalize_events(events: pd.DataFrame) -> pd.DataFrame:
    events = events.copy()
    events["event_start"] = pd.to_datetime(events["event_start"])
    if (events["event_start"] < T0).any():
        raise AwarenessError(f"events before {T0.date()} are not usable")
    events = events.drop_duplicates(subset=["region_id", "event_start"])
    return events.sort_values(["region_id", "event_start"]).reset_index(drop=True)


def _event_days(events: pd.DataFrame) -> dict:
    """Map region -> sorted int day offsets (from t0) of its events."""
    days = (events["event_start"] - T0).dt.days.to_numpy()
    out = {}
    for region, idx in events.groupby("region_id").indices.items():
        out[region] = np.sort(days[idx])
    return out


def awareness_at(region: str, t, events: pd.DataFrame, tau_days: int = DEFAULT_TAU) -> float:
    """Awareness for one region and date; errors on an unknown region."""
    if tau_days <= 0:
        raise AwarenessError("tau_days must be positive")
    t = pd.Timestamp(t)
    if t < T0:
        raise AwarenessError(f"t must be on or after {T0.date()}")
    by_region = _event_days(normalize_events(events))
    if region not in by_region:
        raise AwarenessError(f"unknown region {region!r} in event record")
    day = (t - T0).days
    deltas = day - by_region[region]
    deltas = deltas[deltas >= 0]
    return float(np.sum(2.0 ** (-deltas / float(tau_days))))


def _awareness_many(day_numbers: np.ndarray, event_days: np.ndarray,
                    tau_days: float, chunk: int = 200_000) -> np.ndarray:
    out = np.zeros(len(day_numbers))
    if len(event_days) == 0:
        return out
    for start in range(0, len(day_numbers), chunk):
        block = day_numbers[start:start + chunk]
        deltas = block[:, None] - event_days[None, :]
        contrib = np.where(deltas >= 0, 2.0 ** (-deltas / tau_days), 0.0)
        out[start:start + chunk] = contrib.sum(axis=1)
    return out


def attach_awareness(tx: pd.DataFrame, events: pd.DataFrame,
                     tau_days: int = DEFAULT_TAU) -> pd.DataFrame:
    """Add awareness_at_sale to a region-assigned transaction table.

    Regions absent from the event record get awareness 0 with a warning
    (absence of events, not missing data).
    """
    if tau_days <= 0:
        raise AwarenessError("tau_days must be positive")
    if "region_id" not in tx.columns:
        raise AwarenessError("transactions must be region-assigned first")
    by_region = _event_days(normalize_events(events))
    out = tx.copy()
    day_numbers = (pd.to_datetime(out["issuance_date"]) - T0).dt.days.to_numpy()
    values = np.zeros(len(out))
    missing_regions = []
    for region, idx in out.groupby("region_id").indices.items():
        event_days = by_region.get(region)
        if event_days is None:
            missing_regions.append(region)
            continue
        values[idx] = _awareness_many(day_numbers[idx], event_days, float(tau_days))
    if missing_regions:
        warnings.warn(
            f"attach_awareness: no recorded events for region(s) "
            f"{sorted(missing_regions)[:5]}; awareness set to 0",
            RuntimeWarning, stacklevel=2,
        )
    out["awareness_at_sale"] = values
    return out


def awareness_series(region: str, events: pd.DataFrame, start, end,
                     tau_days: int = DEFAULT_TAU) -> pd.DataFrame:
    """Daily awareness values for one region over [start, end] (plot export)."""
    dates = pd.date_range(start, end, freq="D")
    by_region = _event_days(normalize_events(events))
    if region not in by_region:
        raise AwarenessError(f"unknown region {region!r} in event record")
    days = (dates - T0).days.to_numpy()
    values = _awareness_many(days, by_region[region], float(tau_days))
    return pd.DataFrame({"region_id": region, "date": dates, "value": values})


@dataclass
class TercileBounds:
    q_low: float
    q_high: float


def awareness_terciles(values) -> tuple:
    """Label each value low/medium/high by the 1/3 and 2/3 sample quantiles.

    Values equal to a boundary go to the lower tercile. Labels come back as a
    pandas Categorical with 'low' first (the reference level).
    """
    arr = np.asarray(values, dtype=float)
    if np.unique(arr).size < 3:
        raise AwarenessError("terciles need at least 3 distinct awareness values")
    q_low, q_high = np.quantile(arr, [1 / 3, 2 / 3], method="linear")
    labels = np.where(arr <= q_low, "low", np.where(arr <= q_high, "medium", "high"))
    cats = pd.Categorical(labels, categories=list(TERCILE_LABELS), ordered=True)
    return cats, TercileBounds(float(q_low), float(q_high))


def attach_terciles(tx: pd.DataFrame, column: str = "awareness_at_sale") -> pd.DataFrame:
    """Add the awareness_tercile column, computed over the whole sample."""
    if column not in tx.columns:
        raise AwarenessError(f"column {column} missing; attach awareness first")
    out = tx.copy()
    cats, bounds = awareness_terciles(out[column].to_numpy())
    out["awareness_tercile"] = cats
    out.attrs["awareness_tercile_bounds"] = (bounds.q_low, bounds.q_high)
    return out


def write_series_csv(frame: pd.DataFrame, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        frame.to_csv(fh, index=False, date_format="%Y-%m-%d", lineterminator="\n")
