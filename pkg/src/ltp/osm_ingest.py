"""OSM extract parsing and canonical per-road metadata text.

Roads come in as an XML subset (``node`` + ``way`` elements). Each way
carrying a ``highway`` tag becomes a :class:`RoadSegment`; its retained
tags plus the road-name suffix are flattened into one deterministic
string that downstream stages embed.
"""

from __future__ import annotations

import io
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from xml.etree.ElementTree import ParseError

from .errors import MalformedXml

logger = logging.getLogger(__name__)

# Tag keys that never make it into the metadata record: identity, name
# (mined for its suffix instead) and the two fields the road-graph
# encoder already consumes.
EXCLUDED_KEYS = frozenset({"osmid", "name", "geometry", "highway"})

# Road-type suffixes recognized at the end of a road name, in canonical
# capitalization. Extend via a one-suffix-per-line text file.
DEFAULT_SUFFIX_VOCABULARY = (
    "Street",
    "Avenue",
    "Boulevard",
    "Circle",
    "Court",
    "Drive",
    "Expressway",
    "Freeway",
    "Highway",
    "Lane",
    "Parkway",
    "Place",
    "Road",
    "Way",
)


@dataclass(frozen=True)
class RoadSegment:
    """One OSM way: id, (lon, lat) polyline in WGS84 degrees, raw tags."""

    way_id: int
    polyline: tuple[tuple[float, float], ...]
    tags: dict[str, str]
    name: str | None = None

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise ValueError(f"way {self.way_id}: polyline needs >= 2 points")
        for p, q in zip(self.polyline, self.polyline[1:]):
            if p == q:
                raise ValueError(f"way {self.way_id}: consecutive duplicate point {p}")


@dataclass(frozen=True)
class MetadataRecord:
    """Retained tag fields plus the optional road-type suffix for one road."""

    way_id: int
    fields: dict[str, str] = field(default_factory=dict)
    suffix: str | None = None


def load_suffix_vocabulary(path: str | Path) -> tuple[str, ...]:
    """Read a suffix vocabulary file: one canonical suffix per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    vocab = tuple(s.strip() for s in lines if s.strip())
    if not vocab:
        raise ValueError(f"suffix vocabulary file {path} is empty")
    return vocab


def road_suffix(name: str, vocabulary: tuple[str, ...] | None = None) -> str | None:
    """Return the road-type suffix of ``name``, if its last token is one.

    Matching is case-insensitive; the canonical capitalization from the
    vocabulary is returned. Names whose last token is not in the
    vocabulary (including single-token names like "Broadway") yield None.
    """
    vocab = DEFAULT_SUFFIX_VOCABULARY if vocabulary is None else vocabulary
    tokens = name.split()
    if not tokens:
        return None
    last = tokens[-1].lower()
    for canonical in vocab:
        if canonical.lower() == last:
            return canonical
    return None


def extract_metadata(
    segment: RoadSegment, vocabulary: tuple[str, ...] | None = None
) -> MetadataRecord:
    """Retained tags (exclusion set removed) plus the name suffix."""
    fields = {k: v for k, v in segment.tags.items() if k not in EXCLUDED_KEYS}
    suffix = road_suffix(segment.name, vocabulary) if segment.name else None
    return MetadataRecord(way_id=segment.way_id, fields=fields, suffix=suffix)


def serialize_metadata(record: MetadataRecord) -> str:
    """Canonical text form of a record.

    Fields are rendered as ``key=value`` sorted ascending by key and
    joined with ``"; "``; ``suffix=<S>`` is appended last when present.
    Sorting makes the string (and hence its embedding) reproducible.
    An empty record serializes to "".
    """
    parts = [f"{k}={record.fields[k]}" for k in sorted(record.fields)]
    if record.suffix is not None:
        parts.append(f"suffix={record.suffix}")
    return "; ".join(parts)


def parse_metadata_string(way_id: int, text: str) -> MetadataRecord:
    """Best-effort inverse of :func:`serialize_metadata`.

    Tokens without ``=`` are re-joined to the previous value, so values
    containing ``"; "`` survive the round trip. A trailing ``suffix``
    pair is restored as the record suffix.
    """
    fields: dict[str, str] = {}
    order: list[str] = []
    for token in text.split("; ") if text else []:
        if "=" in token:
            k, v = token.split("=", 1)
            fields[k] = v
            order.append(k)
        elif order:
            fields[order[-1]] += "; " + token
    suffix = None
    if order and order[-1] == "suffix":
        suffix = fields.pop("suffix")
    return MetadataRecord(way_id=way_id, fields=fields, suffix=suffix)


def _read_source(extract) -> bytes:
    if isinstance(extract, bytes):
        return extract
    if isinstance(extract, (str, Path)):
        return Path(extract).read_bytes()
    return extract.read()


def parse_osm(extract) -> list[RoadSegment]:
    """Parse an OSM XML extract into road segments.

    ``extract`` may be bytes, a path, or a binary file-like object. One
    segment is produced per way carrying a ``highway`` tag, in document
    order; ways tagged ``area=yes`` are not roads and are dropped. Ways
    with dangling node refs or fewer than two resolvable points are
    skipped with a warning rather than failing the parse.
    """
    data = _read_source(extract)
    try:
        root = ET.parse(io.BytesIO(data)).getroot()
    except ParseError as exc:
        raise MalformedXml(str(exc)) from exc

    nodes: dict[int, tuple[float, float]] = {}
    for node in root.iter("node"):
        try:
            nodes[int(node.attrib["id"])] = (
                float(node.attrib["lon"]),
                float(node.attrib["lat"]),
            )
        except (KeyError, ValueError) as exc:
            raise MalformedXml(f"bad node element: {exc}") from exc

    segments: list[RoadSegment] = []
    for way in root.iter("way"):
        way_id = int(way.attrib["id"])
        tags = {t.attrib["k"]: t.attrib.get("v", "") for t in way.findall("tag")}
        if "highway" not in tags or tags.get("area") == "yes":
            continue
        polyline: list[tuple[float, float]] = []
        dangling = 0
        for nd in way.findall("nd"):
            ref = int(nd.attrib["ref"])
            if ref not in nodes:
                dangling += 1
                continue
            point = nodes[ref]
            if polyline and polyline[-1] == point:
                continue
            polyline.append(point)
        if dangling:
            logger.warning(
                "way %d references %d undeclared node(s)", way_id, dangling
            )
        if len(polyline) < 2:
            logger.warning(
                "skipping way %d: only %d resolvable point(s)", way_id, len(polyline)
            )
            continue
        segments.append(
            RoadSegment(
                way_id=way_id,
                polyline=tuple(polyline),
                tags=tags,
                name=tags.get("name"),
            )
        )
    return segments


def emit_osm_xml(segments: list[RoadSegment]) -> bytes:
    """Re-emit segments as the supported OSM XML subset.

    Node ids are synthesized; coordinates are written with ``repr`` so a
    re-parse reproduces the segment list exactly.
    """
    root = ET.Element("osm", {"version": "0.6"})
    next_node_id = 1
    way_nodes: list[tuple[RoadSegment, list[int]]] = []
    for seg in segments:
        refs = []
        for lon, lat in seg.polyline:
            ET.SubElement(
                root,
                "node",
                {"id": str(next_node_id), "lat": repr(lat), "lon": repr(lon)},
            )
            refs.append(next_node_id)
            next_node_id += 1
        way_nodes.append((seg, refs))
    for seg, refs in way_nodes:
        way = ET.SubElement(root, "way", {"id": str(seg.way_id)})
        for ref in refs:
            ET.SubElement(way, "nd", {"ref": str(ref)})
        for k, v in seg.tags.items():
            ET.SubElement(way, "tag", {"k": k, "v": v})
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)
