"""Retrieval-augmented lane-width extraction from a road design manual.

The manual (pre-extracted plain text) is split into overlapping chunks,
embedded into an in-memory vector store, and queried per road: the top-k
chunks plus the road's metadata string form a prompt whose answer must
carry a ``WIDTH_M: <number>`` line. Three LLM clients implement the same
interface: a remote chat-completion client, a scripted replay client,
and a constant table keyed by road class.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .errors import (
    EmptyStore,
    InvalidChunking,
    ServiceUnavailable,
    WidthNotFound,
    WidthOutOfRange,
)
from .osm_ingest import MetadataRecord, serialize_metadata
from .text_embed import EmbedBackend, cosine_similarity, embed_many, embed_text

logger = logging.getLogger(__name__)

LLM_API_KEY_VAR = "LTP_LLM_API_KEY"
METERS_PER_FOOT = 0.3048

# Per-lane widths outside this band (meters) are treated as extraction
# failures rather than silently clamped.
WIDTH_SANITY_BAND = (2.0, 6.0)

DEFAULT_TOP_K = 4


@dataclass(frozen=True)
class ManualChunk:
    chunk_id: int
    text: str
    span: tuple[int, int]
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class VectorStore:
    chunks: tuple[ManualChunk, ...]
    dimension: int


@dataclass(frozen=True)
class LaneWidthAnswer:
    way_id: int
    width_m: float
    raw_response: str
    retrieved_chunk_ids: tuple[int, ...]


def chunk_manual(text: str, chunk_chars: int, overlap_chars: int) -> list[ManualChunk]:
    """Split ``text`` into fixed-size chunks with a fixed overlap.

    Chunks start at multiples of ``chunk_chars - overlap_chars``; the
    final chunk is truncated at the document end and generation stops
    once the end is covered. Empty text yields no chunks.
    """
    if chunk_chars <= 0 or overlap_chars < 0 or overlap_chars >= chunk_chars:
        raise InvalidChunking(
            f"need chunk_chars > overlap_chars >= 0, got {chunk_chars}/{overlap_chars}"
        )
    if not text:
        return []
    stride = chunk_chars - overlap_chars
    chunks: list[ManualChunk] = []
    start = 0
    while True:
        end = min(start + chunk_chars, len(text))
        chunks.append(
            ManualChunk(chunk_id=len(chunks), text=text[start:end], span=(start, end))
        )
        if end == len(text):
            break
        start += stride
    return chunks


def build_store(chunks: list[ManualChunk], backend: EmbedBackend) -> VectorStore:
    """Embed every chunk and freeze the result into a store."""
    vecs = embed_many(backend, [c.text for c in chunks])
    embedded = tuple(
        ManualChunk(chunk_id=c.chunk_id, text=c.text, span=c.span, embedding=v)
        for c, v in zip(chunks, vecs)
    )
    return VectorStore(chunks=embedded, dimension=backend.dimension)


def retrieve(
    store: VectorStore, query: str, k: int, backend: EmbedBackend
) -> list[tuple[int, float]]:
    """Top-k chunks by cosine similarity to the embedded query.

    Returns (chunk_id, score) pairs in descending score order, ties
    broken by ascending chunk id; at most ``min(k, len(store))`` items.
    """
    if not store.chunks:
        raise EmptyStore("cannot retrieve from an empty store")
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = embed_text(backend, query)
    scores = [cosine_similarity(qvec, c.embedding) for c in store.chunks]
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(store.chunks[i].chunk_id, scores[i]) for i in ranked[:k]]


PROMPT_HEADER = (
    "You are a road design assistant. Using only the manual excerpts "
    "below, determine the per-lane width in meters for the road described."
)
PROMPT_FOOTER = (
    "Answer with a single line in exactly this format:\nWIDTH_M: <number>"
)


def build_prompt(road_info: MetadataRecord, retrieved: list[ManualChunk]) -> str:
    """Deterministic prompt: road metadata + ranked excerpts + format rule."""
    if not retrieved:
        raise ValueError("retrieved chunk list must be nonempty")
    return build_prompt_text(
        road_info.way_id, serialize_metadata(road_info), [c.text for c in retrieved]
    )


def build_prompt_text(way_id: int, info_string: str, chunk_texts: list[str]) -> str:
    lines = [PROMPT_HEADER, "", f"basic_road_info: way_id={way_id}; {info_string}", ""]
    lines.append("Manual excerpts:")
    for rank, text in enumerate(chunk_texts, start=1):
        lines.append(f"--- excerpt {rank} ---")
        lines.append(text)
    lines.append("--- end of excerpts ---")
    lines.append("")
    lines.append(PROMPT_FOOTER)
    return "\n".join(lines)


_WIDTH_TAG_RE = re.compile(r"WIDTH_M:\s*([-+]?\d+(?:\.\d+)?)")
_NUMBER = r"([-+]?\d+(?:\.\d+)?)"
_METERS_RE = re.compile(_NUMBER + r"\s*(?:m|meters?|metres?)\b", re.IGNORECASE)
_FEET_RE = re.compile(_NUMBER + r"\s*(?:ft|feet|foot)\b", re.IGNORECASE)


def parse_width_response(text: str) -> float:
    """Extract a lane width in meters from a model response.

    The number after the last ``WIDTH_M:`` tag wins; failing that, the
    first number followed by a meters unit; failing that, the first
    number followed by a feet unit, converted at 0.3048 m/ft.
    """
    tags = _WIDTH_TAG_RE.findall(text)
    if tags:
        return float(tags[-1])
    meters = _METERS_RE.search(text)
    if meters:
        return float(meters.group(1))
    feet = _FEET_RE.search(text)
    if feet:
        return float(feet.group(1)) * METERS_PER_FOOT
    raise WidthNotFound(f"no lane width found in response: {text[:80]!r}")


class LlmClient(Protocol):
    """prompt -> response text; ``context`` carries per-road routing keys."""

    def complete(self, prompt: str, context: Mapping[str, str] | None = None) -> str: ...


class ScriptedLlmClient:
    """Replay client: responses keyed by way id, for tests and offline runs.

    A missing entry yields a deliberately unparseable reply so the road
    lands in the sidecar error file instead of aborting the run.
    """

    MISSING = "no scripted response available"

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLlmClient":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, prompt: str, context: Mapping[str, str] | None = None) -> str:
        key = (context or {}).get("way_id", "")
        return self.responses.get(key, self.responses.get("default", self.MISSING))


class TableLlmClient:
    """Constant-table client: road class -> per-lane width in meters.

    ``classes`` maps way id (as string) to a road class; the table maps
    road class to width, with an optional ``"default"`` entry. Unmatched
    roads get an unparseable reply and end up in the sidecar.
    """

    MISSING = "no table entry for this road"

    def __init__(
        self,
        table: Mapping[str, float],
        classes: Mapping[str, str] | None = None,
    ):
        self.table = dict(table)
        self.classes = dict(classes or {})

    @classmethod
    def from_file(
        cls, path: str | Path, classes: Mapping[str, str] | None = None
    ) -> "TableLlmClient":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), classes)

    def complete(self, prompt: str, context: Mapping[str, str] | None = None) -> str:
        way_id = (context or {}).get("way_id", "")
        road_class = (context or {}).get("road_class") or self.classes.get(way_id)
        width = self.table.get(road_class) if road_class else None
        if width is None:
            width = self.table.get("default")
        if width is None:
            return self.MISSING
        return f"WIDTH_M: {float(width)}"


class RemoteChatClient:
    """Chat-completion client: POST {model, messages:[{role, content}]}."""

    def __init__(
        self,
        model: str,
        base_url: str = "https://api.openai.com/v1/chat/completions",
        api_key: str | None = None,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        timeout_s: float = 60.0,
    ):
        self.model = model
        self.base_url = base_url
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_API_KEY_VAR)
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s

    def complete(self, prompt: str, context: Mapping[str, str] | None = None) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    self.base_url, json=body, headers=headers, timeout=self.timeout_s
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                logger.warning("chat request failed (try %d): %s", attempt + 1, exc)
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_s * (attempt + 1))
        raise ServiceUnavailable(
            f"chat service unreachable after {self.max_retries} tries: {last_error}"
        )


def query_lane_width(
    road: MetadataRecord,
    store: VectorStore,
    llm: LlmClient,
    backend: EmbedBackend,
    k: int = DEFAULT_TOP_K,
) -> LaneWidthAnswer:
    """Retrieve manual context for one road and ask the LLM for its width."""
    ranked = retrieve(store, serialize_metadata(road), k, backend)
    chunk_ids = tuple(cid for cid, _ in ranked)
    by_id = {c.chunk_id: c for c in store.chunks}
    prompt = build_prompt(road, [by_id[cid] for cid in chunk_ids])
    raw = llm.complete(prompt, context={"way_id": str(road.way_id)})
    width = parse_width_response(raw)
    lo, hi = WIDTH_SANITY_BAND
    if not lo <= width <= hi:
        raise WidthOutOfRange(
            f"way {road.way_id}: width {width} m outside [{lo}, {hi}]"
        )
    return LaneWidthAnswer(
        way_id=road.way_id,
        width_m=width,
        raw_response=raw,
        retrieved_chunk_ids=chunk_ids,
    )


def lane_width_string(width_m: float) -> str:
    """Render a width answer as the text that gets embedded."""
    return f"lane_width_m={width_m}"
