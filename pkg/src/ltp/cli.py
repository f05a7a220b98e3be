"""Command-line interface for the lane-topology prior pipeline.

Subcommands mirror the pipeline stages:

    ltp extract-metadata --osm map.osm --out metadata.tsv
    ltp lanewidths --metadata metadata.tsv --manual manual.txt \
        --llm table:widths.json --out widths.tsv
    ltp fuse --variant eq3 --osm map.osm --metadata metadata.tsv \
        --lanewidths widths.tsv --out fused.bin --seed 7
    ltp evaluate --gt gt.json --pred pred.json --label "NF" --out report.json
    ltp report report1.json report2.json

A flat TOML config (``--config``) supplies defaults; explicit flags win.
Exit codes: 0 success, 1 fatal input error, 2 completed with sidecar errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, harness, manual_rag, metrics, osm_ingest
from .errors import LtpError
from .frechet import backend_name
from .text_embed import DEFAULT_DIMENSION, HashingEmbedder, RemoteEmbedder

logger = logging.getLogger(__name__)

DEFAULT_CHAT_MODEL = "llama3.3"


def _build_embedder(spec: str, dimension: int, cache_dir: str | None):
    if spec == "offline":
        return HashingEmbedder(dimension)
    if spec.startswith("remote:"):
        return RemoteEmbedder(spec.split(":", 1)[1], dimension, cache_dir=cache_dir)
    if spec == "remote":
        return RemoteEmbedder("text-embedding-3-small", dimension, cache_dir=cache_dir)
    raise LtpError(f"unknown embed backend {spec!r} (use offline or remote[:<model>])")


def _build_llm(spec: str, osm_path: str | None):
    if spec == "remote" or spec.startswith("remote:"):
        _, _, model = spec.partition(":")
        return manual_rag.RemoteChatClient(model or DEFAULT_CHAT_MODEL)
    if spec.startswith("scripted:"):
        return manual_rag.ScriptedLlmClient.from_file(spec.split(":", 1)[1])
    if spec.startswith("table:"):
        classes = {}
        if osm_path:
            classes = {
                str(seg.way_id): seg.tags["highway"]
                for seg in osm_ingest.parse_osm(Path(osm_path))
            }
        return manual_rag.TableLlmClient.from_file(spec.split(":", 1)[1], classes)
    raise LtpError(
        f"unknown llm backend {spec!r} (use remote[:<model>], scripted:<path> or table:<path>)"
    )


def _parse_thresholds(text: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in text.split(",") if v.strip())
    if not values:
        raise LtpError(f"no thresholds in {text!r}")
    return values


def _load_config(argv: list[str]) -> dict:
    path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltp", description="Language priors for lane-topology prediction"
    )
    parser.add_argument("--config", help="flat TOML config; flags override it")
    parser.add_argument(
        "--version", action="version", version=f"ltp {__version__} ({backend_name()} kernel)"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-metadata", help="OSM extract -> canonical metadata file")
    p.add_argument("--osm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--suffixes", help="suffix vocabulary file, one per line")

    p = sub.add_parser("lanewidths", help="query a lane width for every road")
    p.add_argument("--metadata", required=True)
    p.add_argument("--manual", required=True, help="manual as plain UTF-8 text")
    p.add_argument("--llm", required=True, help="remote[:<model>] | scripted:<path> | table:<path>")
    p.add_argument("--out", required=True)
    p.add_argument("--osm", help="OSM extract; gives table mode its road classes")
    p.add_argument("--k", type=int, default=manual_rag.DEFAULT_TOP_K)
    p.add_argument("--chunk-chars", type=int, default=1000)
    p.add_argument("--overlap-chars", type=int, default=200)
    p.add_argument("--embed", default="offline", help="offline | remote[:<model>]")
    p.add_argument("--embed-dim", type=int, default=DEFAULT_DIMENSION)
    p.add_argument("--cache-dir")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("fuse", help="emit fused per-road embeddings")
    p.add_argument("--variant", required=True, choices=harness.FUSE_VARIANTS)
    p.add_argument("--osm", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--lanewidths")
    p.add_argument("--params", help="load projection parameters from this file")
    p.add_argument("--save-params", help="persist the parameters used")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, help="override the lambda weight")
    p.add_argument("--dmap", type=int, default=64)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed", default="offline")
    p.add_argument("--embed-dim", type=int, default=DEFAULT_DIMENSION)
    p.add_argument("--cache-dir")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--gt")
    p.add_argument("--pred")
    p.add_argument("--label", required=True)
    p.add_argument("--out")
    p.add_argument(
        "--metrics-from-values",
        metavar="DETL,DETT,TOPLL,TOPLT",
        help="skip scenario files and aggregate these four values",
    )
    p.add_argument("--lane-thresholds", default="1.0,1.5,2.0,3.0")
    p.add_argument("--te-iou", type=float, default=metrics.TE_IOU_THRESHOLD)
    p.add_argument("--top-threshold", type=float, default=metrics.TOP_LANE_THRESHOLD_M)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="merge metric reports into one table")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", help="also write the table to this file")

    return parser


def _cmd_extract_metadata(args) -> int:
    n = harness.run_extract_metadata(args.osm, args.out, args.suffixes)
    print(f"wrote {n} metadata record(s) to {args.out}")
    return 0


def _cmd_lanewidths(args) -> int:
    backend = _build_embedder(args.embed, args.embed_dim, args.cache_dir)
    llm = _build_llm(args.llm, args.osm)
    ok, failed = harness.run_lanewidths(
        args.metadata,
        args.manual,
        llm,
        args.out,
        backend,
        k=args.k,
        chunk_chars=args.chunk_chars,
        overlap_chars=args.overlap_chars,
        max_workers=args.workers,
    )
    print(f"wrote {ok} lane width(s) to {args.out}" + (f"; {failed} failed" if failed else ""))
    return 2 if failed else 0


def _cmd_fuse(args) -> int:
    backend = _build_embedder(args.embed, args.embed_dim, args.cache_dir)
    n = harness.run_fuse(
        args.osm,
        args.metadata,
        args.variant,
        args.out,
        backend,
        lanewidths_path=args.lanewidths,
        params_path=args.params,
        seed=args.seed,
        d_map=args.dmap,
        hidden=args.hidden,
        lam=args.lam,
        save_params_path=args.save_params,
    )
    print(f"wrote {n} fused embedding(s) to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    if args.metrics_from_values:
        parts = [float(v) for v in args.metrics_from_values.split(",")]
        if len(parts) != 4:
            raise LtpError("--metrics-from-values needs DETL,DETT,TOPLL,TOPLT")
        report = harness.report_from_values(args.label, *parts)
        if args.out:
            harness.save_report(args.out, report)
    else:
        if not args.gt or not args.pred:
            raise LtpError("evaluate needs --gt and --pred (or --metrics-from-values)")
        report = harness.run_evaluate(
            args.gt,
            args.pred,
            args.label,
            args.out,
            lane_thresholds=_parse_thresholds(args.lane_thresholds),
            te_iou_threshold=args.te_iou,
            top_lane_threshold=args.top_threshold,
            max_workers=args.workers,
        )
    print(harness.format_report_table([report]))
    return 0


def _cmd_report(args) -> int:
    reports = [harness.load_report(path) for path in args.files]
    table = harness.format_report_table(reports, flag_best=True)
    print(table)
    if args.out:
        harness.write_atomic_text(args.out, table + "\n")
    return 0


_HANDLERS = {
    "extract-metadata": _cmd_extract_metadata,
    "lanewidths": _cmd_lanewidths,
    "fuse": _cmd_fuse,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config = _load_config(argv)
    if config:
        parser.set_defaults(**config)
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _HANDLERS[args.command](args)
    except LtpError as exc:
        print(f"ltp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
