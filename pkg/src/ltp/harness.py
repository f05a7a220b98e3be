"""Pipeline wiring: file formats and the stage commands behind the CLI.

Stages communicate through flat files so every step is restartable and
offline runs are byte-reproducible: a tab-separated metadata file, a
tab-separated lane-width file (plus a sidecar of failed roads), a binary
fused-embedding file, and JSON scenario / metric-report files.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fusion, manual_rag, metrics, osm_ingest
from .errors import FrameMismatch, LtpError, MissingLaneWidths, SchemaError, WidthNotFound, WidthOutOfRange
from .text_embed import EmbedBackend, embed_text

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0

_FUSED_MAGIC = b"LTPE"
_FUSED_HEADER = struct.Struct("<4sHII")  # magic, version, d_map, count
_FUSED_VERSION = 1


def write_atomic_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        os.write(fd, payload)
    finally:
        os.close(fd)
    os.replace(tmp, path)


def write_atomic_text(path: str | Path, text: str) -> None:
    write_atomic_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# scenario files


@dataclass
class Frame:
    frame_id: int
    ego_pose: tuple[float, float, float]  # x, y, yaw
    topology: metrics.TopologySet


@dataclass
class Scenario:
    city: str
    frames: list[Frame] = field(default_factory=list)

    def frame_ids(self) -> set[int]:
        return {f.frame_id for f in self.frames}


def _topology_from_json(obj: dict, where: str) -> metrics.TopologySet:
    try:
        lanes = [
            metrics.LaneCenterline(
                points=np.asarray(lane["points"], dtype=np.float64),
                confidence=float(lane.get("confidence", 1.0)),
            )
            for lane in obj.get("lanes", [])
        ]
        elements = [
            metrics.TrafficElement(
                bbox=tuple(float(v) for v in te["bbox"]),
                attribute=te["attribute"],
                confidence=float(te.get("confidence", 1.0)),
            )
            for te in obj.get("traffic_elements", [])
        ]
        adjacency = [(int(i), int(j), float(c)) for i, j, c in obj.get("lane_adjacency", [])]
        assoc = [(int(i), int(j), float(c)) for i, j, c in obj.get("lane_te", [])]
        return metrics.TopologySet(
            lanes=lanes,
            elements=elements,
            lane_adjacency=adjacency,
            lane_te_assoc=assoc,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _topology_to_json(ts: metrics.TopologySet) -> dict:
    return {
        "lanes": [
            {"points": lane.points.tolist(), "confidence": lane.confidence}
            for lane in ts.lanes
        ],
        "traffic_elements": [
            {"bbox": list(te.bbox), "attribute": te.attribute, "confidence": te.confidence}
            for te in ts.elements
        ],
        "lane_adjacency": [[i, j, c] for i, j, c in ts.lane_adjacency],
        "lane_te": [[i, j, c] for i, j, c in ts.lane_te_assoc],
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict) or "frames" not in obj:
        raise SchemaError(f"{path}: expected an object with a 'frames' list")
    frames = []
    seen = set()
    for k, fobj in enumerate(obj["frames"]):
        where = f"{path}: frame[{k}]"
        try:
            frame_id = int(fobj["frame_id"])
            pose = fobj.get("ego_pose", {})
            ego = (float(pose.get("x", 0.0)), float(pose.get("y", 0.0)), float(pose.get("yaw", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        if frame_id in seen:
            raise SchemaError(f"{where}: duplicate frame_id {frame_id}")
        seen.add(frame_id)
        frames.append(
            Frame(frame_id=frame_id, ego_pose=ego, topology=_topology_from_json(fobj, where))
        )
    return Scenario(city=str(obj.get("city", "")), frames=frames)


def save_scenario(path: str | Path, scenario: Scenario) -> None:
    obj = {
        "city": scenario.city,
        "frames": [
            {
                "frame_id": f.frame_id,
                "ego_pose": {"x": f.ego_pose[0], "y": f.ego_pose[1], "yaw": f.ego_pose[2]},
                **_topology_to_json(f.topology),
            }
            for f in scenario.frames
        ],
    }
    write_atomic_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# metric reports


@dataclass
class MetricReport:
    label: str
    det_l: float
    det_t: float
    top_ll: float
    top_lt: float
    ols: float
    n_frames: int = 0
    frames: list[dict] = field(default_factory=list)

    def as_json(self) -> dict:
        return {
            "label": self.label,
            "det_l": self.det_l,
            "det_t": self.det_t,
            "top_ll": self.top_ll,
            "top_lt": self.top_lt,
            "ols": self.ols,
            "n_frames": self.n_frames,
            "frames": self.frames,
        }


REPORT_COLUMNS = ("DET_l", "DET_t", "TOP_ll", "TOP_lt", "OLS")
_REPORT_KEYS = ("det_l", "det_t", "top_ll", "top_lt", "ols")


def save_report(path: str | Path, report: MetricReport) -> None:
    write_atomic_text(path, json.dumps(report.as_json(), sort_keys=True, indent=2) + "\n")


def load_report(path: str | Path) -> MetricReport:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return MetricReport(
            label=obj["label"],
            det_l=float(obj["det_l"]),
            det_t=float(obj["det_t"]),
            top_ll=float(obj["top_ll"]),
            top_lt=float(obj["top_lt"]),
            ols=float(obj["ols"]),
            n_frames=int(obj.get("n_frames", 0)),
            frames=obj.get("frames", []),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def format_report_table(reports: list[MetricReport], flag_best: bool = False) -> str:
    """Render reports as the comparison table.

    With ``flag_best``, the best value per metric column is marked with
    ``*`` and the second-best distinct value with ``_`` (ties share the
    mark).
    """
    rows = []
    for report in reports:
        rows.append([report.label] + [f"{getattr(report, k):.4f}" for k in _REPORT_KEYS])
    if flag_best and len(reports) > 1:
        for col, key in enumerate(_REPORT_KEYS, start=1):
            values = [getattr(r, key) for r in reports]
            distinct = sorted(set(values), reverse=True)
            best = distinct[0]
            second = distinct[1] if len(distinct) > 1 else None
            for ri, v in enumerate(values):
                if v == best:
                    rows[ri][col] += "*"
                elif second is not None and v == second:
                    rows[ri][col] += "_"
    header = ["label", *REPORT_COLUMNS]
    widths = [max(len(header[c]), *(len(r[c]) for r in rows)) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# stage: metadata extraction


def run_extract_metadata(
    osm_path: str | Path,
    out_path: str | Path,
    suffix_vocab_path: str | Path | None = None,
) -> int:
    """OSM extract -> metadata file, one ``way_id<TAB>canonical`` line per road."""
    vocab = (
        osm_ingest.load_suffix_vocabulary(suffix_vocab_path)
        if suffix_vocab_path
        else None
    )
    segments = osm_ingest.parse_osm(Path(osm_path))
    records = [osm_ingest.extract_metadata(seg, vocab) for seg in segments]
    records.sort(key=lambda r: r.way_id)
    lines = [f"{r.way_id}\t{osm_ingest.serialize_metadata(r)}" for r in records]
    write_atomic_text(out_path, "".join(line + "\n" for line in lines))
    return len(records)


def load_metadata_file(path: str | Path) -> list[osm_ingest.MetadataRecord]:
    records = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line:
            continue
        way_id, _, canonical = line.partition("\t")
        try:
            records.append(osm_ingest.parse_metadata_string(int(way_id), canonical))
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# stage: lane widths


def run_lanewidths(
    metadata_path: str | Path,
    manual_path: str | Path,
    llm: manual_rag.LlmClient,
    out_path: str | Path,
    backend: EmbedBackend,
    k: int = manual_rag.DEFAULT_TOP_K,
    chunk_chars: int = 1000,
    overlap_chars: int = 200,
    max_workers: int = 1,
) -> tuple[int, int]:
    """Query a lane width for every road in the metadata file.

    Answers land in ``out_path`` as ``way_id<TAB>width_m<TAB>chunk_ids``;
    roads whose response cannot be parsed (or is out of range) are listed
    in a ``<out_path>.errors`` sidecar instead. Returns (ok, failed).
    """
    records = load_metadata_file(metadata_path)
    manual_text = Path(manual_path).read_text(encoding="utf-8")
    chunks = manual_rag.chunk_manual(manual_text, chunk_chars, overlap_chars)
    if not chunks:
        raise LtpError(f"manual {manual_path} is empty")
    store = manual_rag.build_store(chunks, backend)

    def one(record):
        try:
            return manual_rag.query_lane_width(record, store, llm, backend, k), None
        except (WidthNotFound, WidthOutOfRange) as exc:
            return None, (record.way_id, type(exc).__name__, str(exc))

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(one, records))
    else:
        outcomes = [one(r) for r in records]

    ok_lines = []
    err_lines = []
    for answer, err in outcomes:
        if answer is not None:
            ids = ",".join(str(cid) for cid in answer.retrieved_chunk_ids)
            ok_lines.append(f"{answer.way_id}\t{answer.width_m}\t{ids}")
        else:
            way_id, kind, message = err
            err_lines.append(f"{way_id}\t{kind}\t{message}")
    write_atomic_text(out_path, "".join(line + "\n" for line in ok_lines))
    sidecar = Path(str(out_path) + ".errors")
    if err_lines:
        write_atomic_text(sidecar, "".join(line + "\n" for line in err_lines))
    elif sidecar.exists():
        sidecar.unlink()
    return len(ok_lines), len(err_lines)


def load_lanewidth_file(path: str | Path) -> dict[int, float]:
    widths = {}
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line:
            continue
        parts = line.split("\t")
        try:
            widths[int(parts[0])] = float(parts[1])
        except (IndexError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return widths


# ---------------------------------------------------------------------------
# stage: fusion


def project_local_meters(
    polyline: tuple[tuple[float, float], ...], origin: tuple[float, float]
) -> list[tuple[float, float]]:
    """Equirectangular (lon, lat) degrees -> local meters around ``origin``."""
    lon0, lat0 = origin
    cos_lat = math.cos(math.radians(lat0))
    return [
        (
            EARTH_RADIUS_M * math.radians(lon - lon0) * cos_lat,
            EARTH_RADIUS_M * math.radians(lat - lat0),
        )
        for lon, lat in polyline
    ]


def _projection_origin(segments) -> tuple[float, float]:
    pts = [p for seg in segments for p in seg.polyline]
    lon = sum(p[0] for p in pts) / len(pts)
    lat = sum(p[1] for p in pts) / len(pts)
    return (lon, lat)


def write_fused_file(path: str | Path, d_map: int, rows: list[tuple[int, np.ndarray]]) -> None:
    parts = [_FUSED_HEADER.pack(_FUSED_MAGIC, _FUSED_VERSION, d_map, len(rows))]
    for way_id, vec in rows:
        parts.append(struct.pack("<q", way_id))
        parts.append(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    write_atomic_bytes(path, b"".join(parts))


def read_fused_file(path: str | Path) -> tuple[int, list[tuple[int, np.ndarray]]]:
    raw = Path(path).read_bytes()
    magic, version, d_map, count = _FUSED_HEADER.unpack_from(raw)
    if magic != _FUSED_MAGIC or version != _FUSED_VERSION:
        raise SchemaError(f"{path}: not a fused-embedding file")
    rows = []
    offset = _FUSED_HEADER.size
    for _ in range(count):
        (way_id,) = struct.unpack_from("<q", raw, offset)
        offset += 8
        vec = np.frombuffer(raw, dtype="<f4", count=d_map, offset=offset).astype(np.float64)
        offset += 4 * d_map
        rows.append((way_id, vec))
    return d_map, rows


FUSE_VARIANTS = ("eq1", "eq2", "eq3", "graph")


def run_fuse(
    osm_path: str | Path,
    metadata_path: str | Path,
    variant: str,
    out_path: str | Path,
    backend: EmbedBackend,
    lanewidths_path: str | Path | None = None,
    params_path: str | Path | None = None,
    seed: int = 0,
    d_map: int = fusion.DEFAULT_D_MAP,
    hidden: int | None = None,
    lam: float | None = None,
    save_params_path: str | Path | None = None,
) -> int:
    """Produce per-road fused embeddings under the selected variant.

    ``eq1`` uses the metadata embedding alone as the text side; ``eq2``
    additionally scales the projected text embedding by the lambda
    weight; ``eq3`` sums metadata and lane-width embeddings first.
    ``graph`` emits the raw polyline encodings (no text), which is what
    ``eq2`` degenerates to at lambda = 0.
    """
    if variant not in FUSE_VARIANTS:
        raise LtpError(f"unknown fusion variant {variant!r}")
    records = load_metadata_file(metadata_path)
    segments = {seg.way_id: seg for seg in osm_ingest.parse_osm(Path(osm_path))}
    missing = [r.way_id for r in records if r.way_id not in segments]
    if missing:
        raise LtpError(f"metadata roads absent from OSM extract: {missing[:5]}")

    widths: dict[int, float] = {}
    if variant == "eq3":
        if lanewidths_path is None:
            raise MissingLaneWidths("variant eq3 needs a lane-width file")
        widths = load_lanewidth_file(lanewidths_path)

    if params_path is not None:
        fparams, _ = fusion.load_params(params_path)
        if fparams.mlp.d_map != d_map:
            d_map = fparams.mlp.d_map
    elif variant != "graph":
        fparams = fusion.init_fusion_params(
            backend.dimension, hidden or d_map, d_map, seed
        )
    else:
        fparams = None
    if fparams is not None and variant != "graph":
        if fparams.mlp.d_text != backend.dimension:
            raise LtpError(
                f"params expect text dim {fparams.mlp.d_text}, "
                f"embedder produces {backend.dimension}"
            )
    if lam is not None and fparams is not None:
        fparams.lam = lam

    used = [segments[r.way_id] for r in records]
    origin = _projection_origin(used)
    rows = []
    for record in records:
        seg = segments[record.way_id]
        g = fusion.graph_embed_polyline(project_local_meters(seg.polyline, origin), d_map)
        if variant == "graph":
            rows.append((record.way_id, g))
            continue
        o = embed_text(backend, osm_ingest.serialize_metadata(record))
        if variant == "eq3":
            if record.way_id not in widths:
                logger.warning("way %d has no lane width; skipped", record.way_id)
                continue
            lane_vec = embed_text(
                backend, manual_rag.lane_width_string(widths[record.way_id])
            )
            t = fusion.combine_text(o, lane_vec)
        else:
            t = o
        if variant == "eq2":
            e = fusion.fuse_weighted(g, t, fparams)
        else:
            e = fusion.fuse_additive(g, t, fparams.mlp)
        rows.append((record.way_id, e))

    if save_params_path is not None and fparams is not None:
        fusion.save_params(save_params_path, fparams, seed)
    write_fused_file(out_path, d_map, rows)
    return len(rows)


# ---------------------------------------------------------------------------
# stage: evaluation


def evaluate_scenarios(
    gt: Scenario,
    pred: Scenario,
    label: str,
    lane_thresholds: tuple[float, ...] = metrics.LANE_THRESHOLDS_M,
    te_iou_threshold: float = metrics.TE_IOU_THRESHOLD,
    top_lane_threshold: float = metrics.TOP_LANE_THRESHOLD_M,
    max_workers: int = 1,
) -> MetricReport:
    """Per-frame metrics averaged across frames, aggregate recomputed last."""
    if gt.frame_ids() != pred.frame_ids():
        raise FrameMismatch(
            f"frame ids differ: gt has {sorted(gt.frame_ids())}, "
            f"pred has {sorted(pred.frame_ids())}"
        )
    if not gt.frames:
        raise SchemaError("scenario has no frames")
    gt_by_id = {f.frame_id: f for f in gt.frames}
    pred_by_id = {f.frame_id: f for f in pred.frames}
    ids = sorted(gt_by_id)

    def one(frame_id: int) -> metrics.FrameMetrics:
        return metrics.evaluate_frame(
            pred_by_id[frame_id].topology,
            gt_by_id[frame_id].topology,
            lane_thresholds,
            te_iou_threshold,
            top_lane_threshold,
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_frame = list(pool.map(one, ids))
    else:
        per_frame = [one(fid) for fid in ids]

    mean = lambda key: sum(getattr(fm, key) for fm in per_frame) / len(per_frame)
    det_l = mean("det_l")
    det_t = mean("det_t")
    top_ll = mean("top_ll")
    top_lt = mean("top_lt")
    frames = [
        {
            "frame_id": fid,
            "det_l": fm.det_l,
            "det_t": fm.det_t,
            "top_ll": fm.top_ll,
            "top_lt": fm.top_lt,
            "ols": fm.ols,
            "det_l_per_threshold": {str(k): v for k, v in fm.det_l_per_threshold.items()},
            "det_t_per_class": fm.det_t_per_class,
            "lane_pairs": sorted(fm.lane_pairs.items()),
            "te_pairs": sorted(fm.te_pairs.items()),
        }
        for fid, fm in zip(ids, per_frame)
    ]
    return MetricReport(
        label=label,
        det_l=det_l,
        det_t=det_t,
        top_ll=top_ll,
        top_lt=top_lt,
        ols=metrics.ols(det_l, det_t, top_ll, top_lt),
        n_frames=len(ids),
        frames=frames,
    )


def report_from_values(
    label: str, det_l: float, det_t: float, top_ll: float, top_lt: float
) -> MetricReport:
    """Build a report from the four metric columns directly."""
    return MetricReport(
        label=label,
        det_l=det_l,
        det_t=det_t,
        top_ll=top_ll,
        top_lt=top_lt,
        ols=metrics.ols(det_l, det_t, top_ll, top_lt),
    )


def run_evaluate(
    gt_path: str | Path,
    pred_path: str | Path,
    label: str,
    out_path: str | Path | None = None,
    lane_thresholds: tuple[float, ...] = metrics.LANE_THRESHOLDS_M,
    te_iou_threshold: float = metrics.TE_IOU_THRESHOLD,
    top_lane_threshold: float = metrics.TOP_LANE_THRESHOLD_M,
    max_workers: int = 1,
) -> MetricReport:
    report = evaluate_scenarios(
        load_scenario(gt_path),
        load_scenario(pred_path),
        label,
        lane_thresholds,
        te_iou_threshold,
        top_lane_threshold,
        max_workers,
    )
    if out_path is not None:
        save_report(out_path, report)
    return report
