"""Spatial tagging: polygon layers, point-in-polygon queries, admin
assignment, flood-hit classification, and queen contiguity weights.

Geometry is planar on WGS84 lon-lat (no projection): at the municipal scales
involved, containment topology is unaffected. Points on a boundary count as
inside for risk/extent layers; admin partitions resolve boundary points to the
lexicographically smallest unit id.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse

from ._core import points_in_rings

UNASSIGNED = "unassigned"
RISK_LEVELS = ("none", "low", "medium", "high")
_SEVERITY = {level: i for i, level in enumerate(RISK_LEVELS)}

ADMIN_LEVELS = ("municipality", "omi_zone", "census_tract", "province", "region")

HIT_CLASSES = ("HitRisk", "NoHitRisk", "HitNoRisk", "Outside")


class GeoError(ValueError):
    pass


@dataclass
class Feature:
    """One polygon/multipolygon with attributes.

    ``parts`` is a list of (coords, ring_offsets) pairs, one per polygon part;
    coords is a (V, 2) float64 array of closed rings laid end to end.
    """

    parts: list
    attributes: dict
    envelope: tuple = None

    def __post_init__(self):
        if self.envelope is None:
            xs = np.concatenate([c[:, 0] for c, _ in self.parts])
            ys = np.concatenate([c[:, 1] for c, _ in self.parts])
            self.envelope = (xs.min(), ys.min(), xs.max(), ys.max())

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(pts, dtype=float)
        out = np.zeros(len(pts), dtype=bool)
        for coords, offsets in self.parts:
            out |= points_in_rings(pts, coords, offsets).astype(bool)
        return out

    def contains_point(self, lon: float, lat: float) -> bool:
        return bool(self.contains(np.array([[lon, lat]]))[0])

    def boundary_segments(self):
        for coords, offsets in self.parts:
            for r in range(len(offsets) - 1):
                ring = coords[offsets[r]:offsets[r + 1]]
                for s in range(len(ring) - 1):
                    yield ring[s], ring[s + 1]

    def vertices(self) -> np.ndarray:
        return np.vstack([c for c, _ in self.parts])


def _close_and_validate_ring(ring, feature_name):
    arr = np.asarray(ring, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
        raise GeoError(f"feature {feature_name}: ring needs >= 4 vertices")
    if not np.array_equal(arr[0], arr[-1]):
        raise GeoError(f"feature {feature_name}: ring not closed (first != last)")
    return arr


def _feature_from_rings(parts_rings, attributes, name):
    parts = []
    for rings in parts_rings:
        coords = []
        offsets = [0]
        for ring in rings:
            arr = _close_and_validate_ring(ring, name)
            coords.append(arr)
            offsets.append(offsets[-1] + len(arr))
        parts.append((np.ascontiguousarray(np.vstack(coords)),
                      np.asarray(offsets, dtype=np.int64)))
    return Feature(parts=parts, attributes=dict(attributes))


def rectangle(x0, y0, x1, y1, **attributes) -> Feature:
    ring = [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
    return _feature_from_rings([[ring]], attributes, attributes.get("id", "rect"))


@dataclass
class PolygonLayer:
    """A named set of polygon features; kind is risk / admin / flood_extent."""

    name: str
    kind: str
    features: list

    def __len__(self):
        return len(self.features)

    @classmethod
    def from_geojson(cls, source, name=None, kind="admin") -> "PolygonLayer":
        if isinstance(source, (str,)) or hasattr(source, "read"):
            if hasattr(source, "read"):
                doc = json.load(source)
            else:
                with open(source) as fh:
                    doc = json.load(fh)
        else:
            doc = source
        if doc.get("type") != "FeatureCollection":
            raise GeoError("expected a GeoJSON FeatureCollection")
        features = []
        for i, feat in enumerate(doc.get("features", [])):
            geom = feat.get("geometry") or {}
            props = feat.get("properties") or {}
            label = props.get("id", f"#{i}")
            gtype = geom.get("type")
            if gtype == "Polygon":
                parts_rings = [geom["coordinates"]]
            elif gtype == "MultiPolygon":
                parts_rings = geom["coordinates"]
            else:
                raise GeoError(f"feature {label}: unsupported geometry {gtype}")
            features.append(_feature_from_rings(parts_rings, props, label))
        return cls(name=name or doc.get("name", "layer"),
                   kind=doc.get("kind", kind), features=features)

    def to_geojson(self) -> dict:
        feats = []
        for f in self.features:
            polys = []
            for coords, offsets in f.parts:
                rings = [coords[offsets[r]:offsets[r + 1]].tolist()
                         for r in range(len(offsets) - 1)]
                polys.append(rings)
            geometry = (
                {"type": "Polygon", "coordinates": polys[0]}
                if len(polys) == 1
                else {"type": "MultiPolygon", "coordinates": polys}
            )
            feats.append({"type": "Feature", "geometry": geometry,
                          "properties": f.attributes})
        return {"type": "FeatureCollection", "name": self.name,
                "kind": self.kind, "features": feats}


class SpatialIndex:
    """Uniform grid over feature envelopes; queries return envelope hits,
    a superset of the true containing features."""

    def __init__(self, layer: PolygonLayer):
        if not layer.features:
            raise GeoError(f"layer {layer.name}: empty layer")
        self.layer = layer
        envs = np.array([f.envelope for f in layer.features])
        self.x0, self.y0 = envs[:, 0].min(), envs[:, 1].min()
        x1, y1 = envs[:, 2].max(), envs[:, 3].max()
        n = len(layer.features)
        side = max(1, int(np.sqrt(n)))
        self.nx = self.ny = side
        self.dx = max((x1 - self.x0) / side, 1e-12)
        self.dy = max((y1 - self.y0) / side, 1e-12)
        self.cells = {}
        for idx, (ex0, ey0, ex1, ey1) in enumerate(envs):
            ix0, iy0 = self._cell(ex0, ey0)
            ix1, iy1 = self._cell(ex1, ey1)
            for ix in range(ix0, ix1 + 1):
                for iy in range(iy0, iy1 + 1):
                    self.cells.setdefault((ix, iy), []).append(idx)
        self.envelopes = envs

    def _cell(self, x, y):
        ix = int(np.clip((x - self.x0) / self.dx, 0, self.nx - 1))
        iy = int(np.clip((y - self.y0) / self.dy, 0, self.ny - 1))
        return ix, iy

    def query(self, lon: float, lat: float) -> list:
        """Indices of features whose envelope contains the point."""
        out = []
        for idx in self.cells.get(self._cell(lon, lat), ()):
            ex0, ey0, ex1, ey1 = self.envelopes[idx]
            if ex0 <= lon <= ex1 and ey0 <= lat <= ey1:
                out.append(idx)
        return out

    def query_envelope(self, env) -> list:
        """Indices of features whose envelope overlaps the given envelope."""
        ex0, ey0, ex1, ey1 = env
        ix0, iy0 = self._cell(ex0, ey0)
        ix1, iy1 = self._cell(ex1, ey1)
        seen = set()
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                seen.update(self.cells.get((ix, iy), ()))
        out = []
        for idx in sorted(seen):
            fx0, fy0, fx1, fy1 = self.envelopes[idx]
            if fx0 <= ex1 and ex0 <= fx1 and fy0 <= ey1 and ey0 <= fy1:
                out.append(idx)
        return out

    def group_candidates(self, pts: np.ndarray) -> dict:
        """Map feature index -> array of point indices with envelope hits."""
        pts = np.asarray(pts, dtype=float)
        if len(pts) == 0:
            return {}
        ix = np.clip(((pts[:, 0] - self.x0) / self.dx).astype(int), 0, self.nx - 1)
        iy = np.clip(((pts[:, 1] - self.y0) / self.dy).astype(int), 0, self.ny - 1)
        cell_key = ix * self.ny + iy
        order = np.argsort(cell_key, kind="stable")
        out = {}
        sorted_keys = cell_key[order]
        boundaries = np.flatnonzero(np.diff(sorted_keys)) + 1
        groups = np.split(order, boundaries)
        for group in groups:
            key = (int(cell_key[group[0]]) // self.ny, int(cell_key[group[0]]) % self.ny)
            for idx in self.cells.get(key, ()):
                ex0, ey0, ex1, ey1 = self.envelopes[idx]
                px, py = pts[group, 0], pts[group, 1]
                hit = group[(px >= ex0) & (px <= ex1) & (py >= ey0) & (py <= ey1)]
                if hit.size:
                    out.setdefault(idx, []).append(hit)
        return {idx: np.concatenate(lists) for idx, lists in out.items()}


def build_index(layer: PolygonLayer) -> SpatialIndex:
    """Validate the layer and build its grid index."""
    for i, f in enumerate(layer.features):
        for coords, offsets in f.parts:
            for r in range(len(offsets) - 1):
                ring = coords[offsets[r]:offsets[r + 1]]
                _close_and_validate_ring(ring, f.attributes.get("id", f"#{i}"))
    return SpatialIndex(layer)


def features_containing(index: SpatialIndex, lon: float, lat: float) -> list:
    """Exact containment (candidates from the index, then the even-odd test)."""
    return [
        idx for idx in index.query(lon, lat)
        if index.layer.features[idx].contains_point(lon, lat)
    ]


def tag_risk(lon: float, lat: float, risk_index: SpatialIndex) -> str:
    """Maximum-severity risk level among containing polygons, 'none' outside."""
    if not (np.isfinite(lon) and np.isfinite(lat)):
        return "none"
    best = 0
    for idx in features_containing(risk_index, lon, lat):
        level = risk_index.layer.features[idx].attributes.get("level", "low")
        best = max(best, _SEVERITY[level])
    return RISK_LEVELS[best]


def tag_risk_batch(pts: np.ndarray, risk_index: SpatialIndex) -> np.ndarray:
    """Vectorized tag_risk over an (n, 2) lon-lat array."""
    pts = np.asarray(pts, dtype=float)
    severity = np.zeros(len(pts), dtype=np.int8)
    for idx, point_idx in risk_index.group_candidates(pts).items():
        feat = risk_index.layer.features[idx]
        level = _SEVERITY[feat.attributes.get("level", "low")]
        inside = feat.contains(pts[point_idx])
        sel = point_idx[inside]
        severity[sel] = np.maximum(severity[sel], level)
    return np.array(RISK_LEVELS, dtype=object)[severity]


@dataclass
class AdminLayers:
    """Municipality / OMI zone / census tract partitions with their indexes.

    Province and region ids are carried as municipality attributes.
    """

    municipality: PolygonLayer
    omi_zone: PolygonLayer
    census_tract: PolygonLayer
    indexes: dict = field(default_factory=dict)

    def __post_init__(self):
        for level in ("municipality", "omi_zone", "census_tract"):
            layer = getattr(self, level)
            if level not in self.indexes:
                self.indexes[level] = build_index(layer)

    @classmethod
    def from_dir(cls, directory):
        from pathlib import Path

        d = Path(directory)
        return cls(
            municipality=PolygonLayer.from_geojson(d / "municipality.geojson"),
            omi_zone=PolygonLayer.from_geojson(d / "omi_zone.geojson"),
            census_tract=PolygonLayer.from_geojson(d / "census_tract.geojson"),
        )


def _resolve_partition_unit(layer, index, lon, lat, id_key):
    hits = features_containing(index, lon, lat)
    if not hits:
        return None
    if len(hits) == 1:
        return layer.features[hits[0]]
    on_boundary = all(
        _point_on_feature_boundary(layer.features[idx], lon, lat) for idx in hits
    )
    if not on_boundary:
        ids = sorted(layer.features[idx].attributes.get(id_key, "?") for idx in hits)
        raise GeoError(
            f"layer {layer.name}: point ({lon}, {lat}) inside multiple units {ids}; "
            "admin layers must partition"
        )
    return min(
        (layer.features[idx] for idx in hits),
        key=lambda f: f.attributes.get(id_key, ""),
    )


def _point_on_feature_boundary(feature, lon, lat) -> bool:
    for a, b in feature.boundary_segments():
        cross = (b[0] - a[0]) * (lat - a[1]) - (b[1] - a[1]) * (lon - a[0])
        if cross == 0.0 and min(a[0], b[0]) <= lon <= max(a[0], b[0]) \
                and min(a[1], b[1]) <= lat <= max(a[1], b[1]):
            return True
    return False


def assign_admin(lon: float, lat: float, admin: AdminLayers) -> dict:
    """Assign the five admin ids by containment; unmatched levels get the
    'unassigned' sentinel."""
    out = dict.fromkeys(
        ("municipality_id", "omi_zone_id", "census_tract_id", "province_id",
         "region_id"), UNASSIGNED,
    )
    mun = _resolve_partition_unit(
        admin.municipality, admin.indexes["municipality"], lon, lat, "id"
    )
    if mun is not None:
        out["municipality_id"] = mun.attributes["id"]
        out["province_id"] = mun.attributes.get("province_id", UNASSIGNED)
        out["region_id"] = mun.attributes.get("region_id", UNASSIGNED)
    zone = _resolve_partition_unit(admin.omi_zone, admin.indexes["omi_zone"], lon, lat, "id")
    if zone is not None:
        out["omi_zone_id"] = zone.attributes["id"]
    tract = _resolve_partition_unit(
        admin.census_tract, admin.indexes["census_tract"], lon, lat, "id"
    )
    if tract is not None:
        out["census_tract_id"] = tract.attributes["id"]
    return out


def assign_admin_batch(pts: np.ndarray, admin: AdminLayers) -> pd.DataFrame:
    """Vectorized assign_admin over an (n, 2) lon-lat array."""
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    out = {}
    for level, id_key in (("municipality", "id"), ("omi_zone", "id"),
                          ("census_tract", "id")):
        layer = getattr(admin, level)
        index = admin.indexes[level]
        ids = np.full(n, UNASSIGNED, dtype=object)
        hits = np.zeros(n, dtype=np.int32)
        for idx, point_idx in index.group_candidates(pts).items():
            feat = layer.features[idx]
            inside = feat.contains(pts[point_idx])
            sel = point_idx[inside]
            if not sel.size:
                continue
            fid = feat.attributes[id_key]
            fresh = sel[hits[sel] == 0]
            ids[fresh] = fid
            # double containment is legal only on shared boundaries, where the
            # lexicographically smallest id wins
            for p in sel[hits[sel] > 0]:
                prev = _feature_by_id(layer, ids[p], id_key)
                if not (_point_on_feature_boundary(feat, *pts[p])
                        and _point_on_feature_boundary(prev, *pts[p])):
                    raise GeoError(
                        f"layer {layer.name}: point {tuple(pts[p])} inside "
                        f"multiple units; admin layers must partition"
                    )
                if fid < ids[p]:
                    ids[p] = fid
            hits[sel] += 1
        out[f"{level}_id"] = ids

    mun_attr = {f.attributes["id"]: f.attributes for f in admin.municipality.features}
    out["province_id"] = np.array(
        [mun_attr.get(m, {}).get("province_id", UNASSIGNED) if m != UNASSIGNED
         else UNASSIGNED for m in out["municipality_id"]], dtype=object,
    )
    out["region_id"] = np.array(
        [mun_attr.get(m, {}).get("region_id", UNASSIGNED) if m != UNASSIGNED
         else UNASSIGNED for m in out["municipality_id"]], dtype=object,
    )
    return pd.DataFrame(out)


def _feature_by_id(layer, fid, id_key):
    for f in layer.features:
        if f.attributes.get(id_key) == fid:
            return f
    raise GeoError(f"layer {layer.name}: no feature with id {fid}")


def tag_transactions(tx: pd.DataFrame, risk_layer: PolygonLayer,
                     admin: AdminLayers) -> pd.DataFrame:
    """Attach risk level/flag and the five admin ids to a transaction table."""
    pts = tx[["lon", "lat"]].to_numpy(dtype=float)
    out = tx.copy()
    risk_index = build_index(risk_layer)
    levels = tag_risk_batch(pts, risk_index)
    out["risk_level"] = levels
    out["risk_flag"] = levels != "none"
    admin_df = assign_admin_batch(pts, admin)
    for col in admin_df.columns:
        out[col] = admin_df[col].to_numpy()
    return out


# ---------------------------------------------------------------------------
# flood-hit classification

def classify_hit(tx: pd.DataFrame, flood_extent: PolygonLayer,
                 municipality_layer: PolygonLayer, event_code: str = "") -> pd.DataFrame:
    """Split risk-tagged, municipality-assigned transactions into
    HitRisk / NoHitRisk / HitNoRisk / Outside.

    Affected municipalities are those with at least one hit transaction or
    whose polygon intersects the extent geometry.
    """
    if not flood_extent.features:
        raise GeoError("flood extent layer is empty")
    for col in ("risk_flag", "municipality_id"):
        if col not in tx.columns:
            raise GeoError(f"classify_hit requires column {col}; run tagging first")

    pts = tx[["lon", "lat"]].to_numpy(dtype=float)
    extent_index = build_index(flood_extent)
    hit = np.zeros(len(tx), dtype=bool)
    for idx, point_idx in extent_index.group_candidates(pts).items():
        feat = flood_extent.features[idx]
        hit[point_idx[feat.contains(pts[point_idx])]] = True

    affected = set(tx.loc[hit, "municipality_id"]) - {UNASSIGNED}
    for mun in municipality_layer.features:
        mid = mun.attributes["id"]
        if mid in affected:
            continue
        if any(polygons_intersect(mun, ext) for ext in flood_extent.features):
            affected.add(mid)

    in_affected = tx["municipality_id"].isin(affected).to_numpy()
    risk = tx["risk_flag"].to_numpy(dtype=bool)
    classes = np.full(len(tx), "Outside", dtype=object)
    classes[hit & risk] = "HitRisk"
    classes[hit & ~risk] = "HitNoRisk"
    classes[~hit & risk & in_affected] = "NoHitRisk"
    return pd.DataFrame({
        "hit_class": classes,
        "affected_municipality_flag": in_affected,
        "event_code": event_code,
    }, index=tx.index)


# ---------------------------------------------------------------------------
# polygon-polygon predicates (used for affected municipalities and queen
# contiguity; scales are small so plain pairwise tests suffice)

def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py):
    return (min(ax, bx) <= px <= max(ax, bx)) and (min(ay, by) <= py <= max(ay, by))


def segments_intersect(a, b, c, d) -> bool:
    """Inclusive segment intersection (touching endpoints and collinear
    overlap count)."""
    d1 = _orient(c[0], c[1], d[0], d[1], a[0], a[1])
    d2 = _orient(c[0], c[1], d[0], d[1], b[0], b[1])
    d3 = _orient(a[0], a[1], b[0], b[1], c[0], c[1])
    d4 = _orient(a[0], a[1], b[0], b[1], d[0], d[1])
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 \
            and d3 != 0 and d4 != 0:
        return True
    if d1 == 0 and _on_segment(c[0], c[1], d[0], d[1], a[0], a[1]):
        return True
    if d2 == 0 and _on_segment(c[0], c[1], d[0], d[1], b[0], b[1]):
        return True
    if d3 == 0 and _on_segment(a[0], a[1], b[0], b[1], c[0], c[1]):
        return True
    if d4 == 0 and _on_segment(a[0], a[1], b[0], b[1], d[0], d[1]):
        return True
    return False


def _envelopes_overlap(e1, e2) -> bool:
    return e1[0] <= e2[2] and e2[0] <= e1[2] and e1[1] <= e2[3] and e2[1] <= e1[3]


def boundaries_share_point(f1: Feature, f2: Feature) -> bool:
    """True when the two polygon boundaries share at least one point."""
    if not _envelopes_overlap(f1.envelope, f2.envelope):
        return False
    v1 = {tuple(v) for v in f1.vertices()}
    if any(tuple(v) in v1 for v in f2.vertices()):
        return True
    segs1 = list(f1.boundary_segments())
    for c, d in f2.boundary_segments():
        for a, b in segs1:
            if segments_intersect(a, b, c, d):
                return True
    return False


def polygons_intersect(f1: Feature, f2: Feature) -> bool:
    """True when the two polygons share any point (boundary or interior)."""
    if not _envelopes_overlap(f1.envelope, f2.envelope):
        return False
    if boundaries_share_point(f1, f2):
        return True
    return f1.contains_point(*f2.vertices()[0]) or f2.contains_point(*f1.vertices()[0])


# ---------------------------------------------------------------------------
# queen contiguity

@dataclass
class ContiguityMatrix:
    """Row-normalized spatial weights over an ordered unit id list.

    ``binary`` keeps the symmetric 0/1 adjacency the weights came from;
    islands have all-zero rows in both.
    """

    ids: list
    weights: scipy.sparse.csr_matrix
    binary: scipy.sparse.csr_matrix

    @property
    def n(self) -> int:
        return len(self.ids)

    def islands(self) -> list:
        row_sums = np.asarray(self.binary.sum(axis=1)).ravel()
        return [self.ids[i] for i in np.flatnonzero(row_sums == 0)]

    def to_triplet_frame(self) -> pd.DataFrame:
        coo = self.weights.tocoo()
        return pd.DataFrame({
            "row_id": [self.ids[i] for i in coo.row],
            "col_id": [self.ids[j] for j in coo.col],
            "weight": coo.data,
        }).sort_values(["row_id", "col_id"]).reset_index(drop=True)


def queen_contiguity(layer: PolygonLayer, id_key: str = "id") -> ContiguityMatrix:
    """Queen adjacency (any shared boundary point, vertex or edge),
    row-normalized. Islands keep an all-zero row with a warning."""
    n = len(layer.features)
    if n < 2:
        raise GeoError("queen contiguity needs at least two features")
    index = SpatialIndex(layer)
    ids = [f.attributes.get(id_key, str(i)) for i, f in enumerate(layer.features)]
    rows, cols = [], []
    for i, f in enumerate(layer.features):
        for j in index.query_envelope(f.envelope):
            if j <= i:
                continue
            if boundaries_share_point(f, layer.features[j]):
                rows.extend((i, j))
                cols.extend((j, i))
    binary = scipy.sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n, n)
    )
    degree = np.asarray(binary.sum(axis=1)).ravel()
    if (degree == 0).any():
        lonely = [ids[i] for i in np.flatnonzero(degree == 0)]
        warnings.warn(
            f"queen_contiguity: {len(lonely)} island unit(s) with no neighbours: "
            f"{lonely[:5]}", RuntimeWarning, stacklevel=2,
        )
    inv = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    weights = scipy.sparse.diags(inv) @ binary
    return ContiguityMatrix(ids=ids, weights=weights.tocsr(), binary=binary)
