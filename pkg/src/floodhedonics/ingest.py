"""Parse raw contract and cadastral records into a canonical transaction table.

Two CSV inputs (contracts, cadastral units) are merged into one row per
mortgage contract: floor areas of the residential units are summed, flags are
derived from garage/annex units, and the paper-style cleaning rules (purchase
only, issued, non-auction, non-juridical, inside Italy, valid price/income)
are applied with a per-reason rejection report.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

RESIDENTIAL_CODES = tuple(f"A{i:02d}" for i in range(1, 12))
GARAGE_CODE = "C06"
ANNEX_CODE = "C02"

# best first; used to pick the representative unit when floor areas tie
ENERGY_ORDER = ["A4", "A3", "A2", "A1", "A", "B", "C", "D", "E", "F", "G"]
_ENERGY_RANK = {c: i for i, c in enumerate(ENERGY_ORDER)}

GROUND_FLOOR_SYNONYMS = {
    "T", "TERRA", "PIANO TERRA", "RIALZATO", "PIANO RIALZATO", "RIALZAT", "T-S1",
}

CONSTRUCTION_YEAR_BINS = [
    ("<1955", None, 1955),
    ("1955-1960", 1955, 1960),
    ("1960-1965", 1960, 1965),
    ("1965-1970", 1965, 1970),
    ("1970-1975", 1970, 1975),
    ("1975-1985", 1975, 1985),
    ("1985-1995", 1985, 1995),
    ("1995-2005", 1995, 2005),
    ("2005-2015", 2005, 2015),
    ("2015-2025", 2015, None),
]

CONTRACT_COLUMNS = [
    "contract_id", "applicant_type", "status", "purpose", "auction_flag",
    "young_buyer_flag", "issuance_date", "construction_year", "price",
    "applicant_income", "latitude", "longitude",
]
CADASTER_COLUMNS = [
    "contract_id", "cadastral_code", "floor_area", "energy_class",
    "air_conditioned_area", "floor_text",
]

TRANSACTION_COLUMNS = [
    "id", "price", "log_price", "issuance_date", "monthly_income", "log_income",
    "surface_m2", "log_surface", "floor_min", "multi_floor_flag", "garage_flag",
    "annex_flag", "aircon_flag", "energy_class", "cadastral_code",
    "construction_year", "construction_year_bin", "young_buyer_flag",
    "lat", "lon",
]


class IngestError(ValueError):
    pass


@dataclass
class FilterPolicy:
    """Row-retention rules applied by filter_transactions."""

    lon_range: tuple = (6.0, 19.0)
    lat_range: tuple = (35.0, 47.5)
    date_min: str = "2016-01-01"
    date_max: str = "2024-08-31"


@dataclass
class RejectionReport:
    counts: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)

    def add(self, record_id, reason: str):
        self.counts[reason] = self.counts.get(reason, 0) + 1
        self.rejected.append((record_id, reason))

    def merge(self, other: "RejectionReport"):
        for reason, count in other.counts.items():
            self.counts[reason] = self.counts.get(reason, 0) + count
        self.rejected.extend(other.rejected)

    def to_json(self, **extra) -> str:
        payload = {"counts": dict(sorted(self.counts.items())),
                   "n_rejected": len(self.rejected)}
        payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def read_contracts(path, delimiter: str = ",") -> pd.DataFrame:
    df = pd.read_csv(
        path, sep=delimiter, comment="#",
        dtype={"contract_id": str, "applicant_type": str, "status": str,
               "purpose": str},
        parse_dates=["issuance_date"],
    )
    missing = set(CONTRACT_COLUMNS) - set(df.columns)
    if missing:
        raise IngestError(f"contracts file lacks columns: {sorted(missing)}")
    for col in ("auction_flag", "young_buyer_flag"):
        df[col] = _parse_bool(df[col])
    return df


def read_cadaster(path, delimiter: str = ",") -> pd.DataFrame:
    df = pd.read_csv(
        path, sep=delimiter, comment="#",
        dtype={"contract_id": str, "cadastral_code": str, "energy_class": str,
               "floor_text": str},
    )
    missing = set(CADASTER_COLUMNS) - set(df.columns)
    if missing:
        raise IngestError(f"cadaster file lacks columns: {sorted(missing)}")
    return df


def _parse_bool(series: pd.Series) -> pd.Series:
    if series.dtype == bool:
        return series.astype("boolean")
    mapping = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}
    out = series.astype("string").str.strip().str.lower().map(mapping)
    return out.astype("boolean")


def normalize_floor(floor_text):
    """Map raw floor text to (minimum floor, multi-floor flag).

    Ground-floor synonyms map to 0; hyphenated multi-floor strings map to
    their minimum component with the flag set; anything unparseable becomes
    (None, None) with a log entry. Total: never raises.
    """
    if floor_text is None or (isinstance(floor_text, float) and np.isnan(floor_text)):
        return None, None
    text = str(floor_text).strip().upper()
    if not text:
        return None, None
    if text in GROUND_FLOOR_SYNONYMS:
        return 0, False
    try:
        return int(text), False
    except ValueError:
        pass
    parts = text.split("-")
    if len(parts) >= 2:
        values = []
        for part in parts:
            part = part.strip()
            if part in GROUND_FLOOR_SYNONYMS:
                values.append(0)
            else:
                try:
                    values.append(int(part))
                except ValueError:
                    values = None
                    break
        if values:
            return min(values), True
    log.info("unparseable floor text %r treated as missing", floor_text)
    return None, None


def construction_year_bin(year) -> str:
    if year is None or (isinstance(year, float) and np.isnan(year)):
        return "Missing"
    year = int(year)
    for label, lo, hi in CONSTRUCTION_YEAR_BINS:
        if (lo is None or year >= lo) and (hi is None or year < hi):
            return label
    return "Missing"


def merge_contract_cadaster(contracts: pd.DataFrame, units: pd.DataFrame):
    """Collapse cadastral units into one transaction row per contract.

    Surface is the sum of residential floor areas (zero treated as missing);
    the representative unit for energy class and floor is the residential
    unit with the largest floor area, ties broken by best energy class.
    Contracts with no residential collateral (or no usable surface) are
    rejected. Returns ``(transactions, RejectionReport)``.
    """
    report = RejectionReport()
    units = units.copy()
    units["floor_area"] = units["floor_area"].where(units["floor_area"] != 0)
    residential = units["cadastral_code"].isin(RESIDENTIAL_CODES)

    by_contract = units.groupby("contract_id", sort=False)
    res_units = units[residential]
    surface = res_units.groupby("contract_id")["floor_area"].sum(min_count=1)
    n_residential = residential.groupby(units["contract_id"]).sum()
    garage = (units["cadastral_code"] == GARAGE_CODE).groupby(units["contract_id"]).any()
    annex = (units["cadastral_code"] == ANNEX_CODE).groupby(units["contract_id"]).any()
    aircon_known = by_contract["air_conditioned_area"].count() > 0
    aircon_any = (units["air_conditioned_area"] > 0).groupby(units["contract_id"]).any()

    # representative residential unit: largest floor area, ties by best energy
    rep = res_units.assign(
        _area_key=res_units["floor_area"].fillna(-1.0),
        _energy_rank=res_units["energy_class"].map(_ENERGY_RANK).fillna(len(ENERGY_ORDER)),
    ).sort_values(
        ["contract_id", "_area_key", "_energy_rank"],
        ascending=[True, False, True], kind="stable",
    ).drop_duplicates("contract_id", keep="first").set_index("contract_id")

    tx = contracts.rename(columns={
        "contract_id": "id",
        "applicant_income": "monthly_income",
        "latitude": "lat",
        "longitude": "lon",
    }).copy()
    cid = tx["id"]
    tx["surface_m2"] = cid.map(surface).astype(float)
    tx["garage_flag"] = cid.map(garage).fillna(False).astype(bool)
    tx["annex_flag"] = cid.map(annex).fillna(False).astype(bool)
    aircon = cid.map(aircon_any).astype("boolean")
    aircon[~cid.map(aircon_known).fillna(False).astype(bool)] = pd.NA
    tx["aircon_flag"] = aircon
    tx["energy_class"] = cid.map(rep["energy_class"])
    tx["cadastral_code"] = cid.map(rep["cadastral_code"])

    floor_lookup = {
        text: normalize_floor(text)
        for text in rep["floor_text"].dropna().unique()
    }
    floor_pairs = cid.map(rep["floor_text"]).map(
        lambda t: floor_lookup.get(t, (None, None)) if pd.notna(t) else (None, None)
    )
    tx["floor_min"] = pd.array([p[0] for p in floor_pairs], dtype="Int64")
    tx["multi_floor_flag"] = pd.array([p[1] for p in floor_pairs], dtype="boolean")

    tx["price"] = tx["price"].where(tx["price"] != 0)
    tx["construction_year_bin"] = tx["construction_year"].map(construction_year_bin)
    tx["young_buyer_flag"] = tx["young_buyer_flag"].astype("boolean")

    no_res = ~cid.isin(n_residential.index[n_residential > 0])
    bad_surface = ~no_res & (tx["surface_m2"].isna() | (tx["surface_m2"] <= 0))
    for rid in tx.loc[no_res, "id"]:
        report.add(rid, "no_residential_unit")
    for rid in tx.loc[bad_surface, "id"]:
        report.add(rid, "missing_surface")
    tx = tx[~(no_res | bad_surface)].reset_index(drop=True)
    return tx, report


def filter_transactions(tx: pd.DataFrame, policy: FilterPolicy | None = None):
    """Keep purchase-purpose, issued, non-auction, non-juridical rows with
    usable price/income and coordinates inside the Italy bounding region.

    Adds log_price / log_income / log_surface to the kept rows. Idempotent.
    Returns ``(kept, RejectionReport)``.
    """
    policy = policy or FilterPolicy()
    report = RejectionReport()
    if tx.empty:
        return tx.copy(), report

    reasons = pd.Series("", index=tx.index, dtype=object)

    def mark(mask, reason):
        fresh = mask & (reasons == "")
        reasons[fresh] = reason

    if "status" in tx.columns:
        mark(tx["status"] != "issued", "not_issued")
    if "purpose" in tx.columns:
        mark(tx["purpose"] == "construction_resale", "construction_resale")
        mark(tx["purpose"] != "purchase", "not_purchase")
    if "applicant_type" in tx.columns:
        mark(tx["applicant_type"] == "juridical", "juridical")
    if "auction_flag" in tx.columns:
        mark(tx["auction_flag"].fillna(False).astype(bool), "auction")
    mark(tx["price"].isna() | (tx["price"] <= 0), "missing_price")
    mark(tx["monthly_income"].isna() | (tx["monthly_income"] <= 0), "missing_income")
    mark(tx["lat"].isna() | tx["lon"].isna(), "missing_coordinates")
    lon_ok = tx["lon"].between(*policy.lon_range)
    lat_ok = tx["lat"].between(*policy.lat_range)
    mark(~(lon_ok & lat_ok) & tx["lat"].notna() & tx["lon"].notna(), "outside_italy")
    dates = pd.to_datetime(tx["issuance_date"])
    mark(
        dates.isna() | (dates < pd.Timestamp(policy.date_min))
        | (dates > pd.Timestamp(policy.date_max)),
        "date_out_of_range",
    )

    for rid, reason in zip(tx.loc[reasons != "", "id"], reasons[reasons != ""]):
        report.add(rid, reason)

    kept = tx[reasons == ""].copy()
    kept["log_price"] = np.log(kept["price"].astype(float))
    kept["log_income"] = np.log(kept["monthly_income"].astype(float))
    kept["log_surface"] = np.log(kept["surface_m2"].astype(float))
    return kept, report


def joint_income_adjust(income: float, applicant_type: str) -> float:
    """Halve household income for joint applications (representativity use only)."""
    if income < 0:
        raise IngestError("income must be nonnegative")
    if applicant_type == "juridical":
        raise IngestError("juridical applicants should have been filtered out")
    return income / 2.0 if applicant_type == "joint" else income


TRIM_VARS = ("price", "surface_m2", "monthly_income")


def trim_outliers(tx: pd.DataFrame, variables=TRIM_VARS, fraction: float = 0.001):
    """Drop rows strictly outside the [fraction, 1-fraction] quantiles of any
    listed variable (inclusive linear-interpolation quantiles)."""
    if not 0 < fraction < 0.5:
        raise IngestError("fraction must be in (0, 0.5)")
    if len(tx) < 1.0 / fraction:
        warnings.warn(
            f"trim_outliers: fewer than {1 / fraction:.0f} rows, no-op",
            RuntimeWarning, stacklevel=2,
        )
        return tx.copy()
    drop = np.zeros(len(tx), dtype=bool)
    for var in variables:
        if var not in tx.columns:
            continue
        values = tx[var].to_numpy(dtype=float)
        lo, hi = np.quantile(values, [fraction, 1.0 - fraction], method="linear")
        drop |= (values < lo) | (values > hi)
    return tx.loc[~drop].copy()


# ---------------------------------------------------------------------------
# canonical table serialization: CSV plus a compact versioned binary cache

_CACHE_MAGIC = b"FHTX"
_CACHE_VERSION = 1

_BOOL_NA = 255


def write_transactions_csv(tx: pd.DataFrame, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        tx.to_csv(fh, index=False, date_format="%Y-%m-%d", lineterminator="\n")


def read_transactions_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, comment="#", dtype={"id": str})
    for col in ("issuance_date",):
        if col in df.columns:
            df[col] = pd.to_datetime(df[col])
    for col in ("multi_floor_flag", "garage_flag", "annex_flag", "aircon_flag",
                "young_buyer_flag", "auction_flag", "risk_flag"):
        if col in df.columns:
            df[col] = _parse_bool(df[col])
    if "floor_min" in df.columns:
        df["floor_min"] = df["floor_min"].astype("Int64")
    return df


def write_cache(tx: pd.DataFrame, path, meta: dict | None = None):
    """Compact binary cache: magic, version, JSON header, raw column buffers."""
    columns = []
    buffers = []
    for name in tx.columns:
        series = tx[name]
        if pd.api.types.is_datetime64_any_dtype(series):
            kind = "date"
            buf = series.astype("int64").to_numpy().tobytes()
        elif isinstance(series.dtype, pd.BooleanDtype):
            kind = "boolnull"
            arr = series.to_numpy(dtype=object)
            enc = np.array(
                [_BOOL_NA if v is pd.NA or v is None else int(bool(v)) for v in arr],
                dtype=np.uint8,
            )
            buf = enc.tobytes()
        elif isinstance(series.dtype, pd.Int64Dtype):
            kind = "intnull"
            buf = series.to_numpy(dtype="float64", na_value=np.nan).tobytes()
        elif pd.api.types.is_float_dtype(series) or pd.api.types.is_integer_dtype(series):
            kind = "float"
            buf = series.to_numpy(dtype="float64").tobytes()
        else:
            kind = "str"
            arr = np.asarray(series.fillna("").astype(str), dtype="U")
            width = max(arr.dtype.itemsize // 4, 1)
            arr = arr.astype(f"U{width}")
            buf = arr.tobytes()
            columns.append({"name": name, "kind": kind, "width": width,
                            "nbytes": len(buf)})
            buffers.append(buf)
            continue
        columns.append({"name": name, "kind": kind, "nbytes": len(buf)})
        buffers.append(buf)

    header = json.dumps(
        {"version": _CACHE_VERSION, "n_rows": len(tx), "columns": columns,
         "meta": meta or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<II", _CACHE_VERSION, len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def read_cache(path) -> pd.DataFrame:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise IngestError("not a transaction cache file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _CACHE_VERSION:
            raise IngestError(f"unsupported cache version {version}")
        header = json.loads(fh.read(header_len))
        data = {}
        n = header["n_rows"]
        for col in header["columns"]:
            raw = fh.read(col["nbytes"])
            kind = col["kind"]
            if kind == "date":
                data[col["name"]] = pd.to_datetime(np.frombuffer(raw, dtype="int64"))
            elif kind == "boolnull":
                enc = np.frombuffer(raw, dtype=np.uint8)
                series = pd.Series(enc).map(
                    {0: False, 1: True, _BOOL_NA: pd.NA}
                ).astype("boolean")
                data[col["name"]] = series
            elif kind == "intnull":
                values = np.frombuffer(raw, dtype="float64")
                data[col["name"]] = pd.array(
                    [pd.NA if np.isnan(v) else int(v) for v in values], dtype="Int64"
                )
            elif kind == "float":
                data[col["name"]] = np.frombuffer(raw, dtype="float64")
            else:
                arr = np.frombuffer(raw, dtype=f"U{col['width']}")
                series = pd.Series(arr, dtype=object)
                data[col["name"]] = series.where(series != "", None)
    df = pd.DataFrame(data)
    df.attrs["cache_meta"] = header.get("meta", {})
    return df
