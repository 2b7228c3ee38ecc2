"""Deterministic simulated multimodal corpus and search engine.

Searchable units are text documents, images, and 1-minute video clips;
images and videos are indexed by their caption text.  Embeddings are hashed
bags of tokens (seeded, so identical across runs and platforms), similarity
is cosine over unit vectors, and retrieval is an exhaustive scan, plenty at
desk scale, and the embedding sits behind a tiny interface so a real model
client can replace it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .canon import canonical_dumps
from .energy import ItemModality, VisualItem
from .errors import DomainError

log = logging.getLogger(__name__)

EMBED_DIM_DEFAULT = 256
EMBED_SEED_DEFAULT = 9157
CLIP_LEN_DEFAULT = 60.0
FRAMES_PER_CLIP_DEFAULT = 8
SCORE_DECIMALS = 12  # ranking quantization, keeps near-ties platform-stable

CORPUS_SCHEMA = "corpus/1"
MANIFEST_SCHEMA = "corpus-manifest/1"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class RetrievalError(DomainError):
    code = "RetrievalError"


class DuplicateItemId(RetrievalError):
    code = "DuplicateItemId"


class BadClipLength(RetrievalError):
    code = "BadClipLength"


class EmptyIndex(RetrievalError):
    code = "EmptyIndex"


class BadManifest(RetrievalError):
    code = "BadManifest"


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    VIDEO = "video"


@dataclass(frozen=True)
class CorpusItem:
    """One store entry.  ``content`` is the text body for text items and the
    caption used for indexing otherwise.  ``asset_ref`` is an opaque pointer
    to the underlying asset; no pixels are stored here."""

    id: str
    modality: Modality
    content: str
    duration_s: float | None = None
    asset_ref: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("corpus item id must be non-empty")
        if self.modality is Modality.VIDEO:
            if self.duration_s is None or self.duration_s <= 0:
                raise ValueError(f"video {self.id!r} needs duration_s > 0")
        elif self.duration_s is not None:
            raise ValueError(f"non-video {self.id!r} must not carry a duration")

    def to_dict(self) -> dict:
        record = {
            "id": self.id,
            "modality": self.modality.value,
            "content": self.content,
            "asset_ref": self.asset_ref,
        }
        if self.duration_s is not None:
            record["duration_s"] = self.duration_s
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "CorpusItem":
        return cls(
            id=record["id"],
            modality=Modality(record["modality"]),
            content=record["content"],
            duration_s=record.get("duration_s"),
            asset_ref=record.get("asset_ref", ""),
        )


@dataclass(frozen=True)
class Clip:
    source_id: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class SearchUnit:
    """One row of the index: a text doc, an image, or a video clip."""

    item_pos: int
    clip_pos: int | None = None  # set for video clips


@dataclass
class Corpus:
    items: list[CorpusItem]
    clips: list[Clip]
    units: list[SearchUnit]
    index: np.ndarray
    embed_dim: int
    embed_seed: int
    clip_len_s: float


@dataclass(frozen=True)
class Observation:
    """One search hit as offered to the policy.  ``id`` is dense per modality
    within the result list ("Text 1", "Video 2", ...); video hits carry their
    clip bounds and uniformly pre-sampled frames."""

    id: str
    source_id: str
    modality: Modality
    score: float
    content: str
    asset_ref: str = ""
    clip_start_s: float | None = None
    clip_end_s: float | None = None
    frames: tuple[tuple[float, str], ...] = ()

    def to_dict(self) -> dict:
        record = {
            "id": self.id,
            "source_id": self.source_id,
            "modality": self.modality.value,
            "score": self.score,
            "content": self.content,
            "asset_ref": self.asset_ref,
        }
        if self.clip_start_s is not None:
            record["clip_start_s"] = self.clip_start_s
            record["clip_end_s"] = self.clip_end_s
            record["frames"] = [[ts, ref] for ts, ref in self.frames]
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "Observation":
        return cls(
            id=record["id"],
            source_id=record["source_id"],
            modality=Modality(record["modality"]),
            score=record["score"],
            content=record["content"],
            asset_ref=record.get("asset_ref", ""),
            clip_start_s=record.get("clip_start_s"),
            clip_end_s=record.get("clip_end_s"),
            frames=tuple((ts, ref) for ts, ref in record.get("frames", [])),
        )


def _bucket(token: str, dim: int, seed: int) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "big")
    ).digest()
    return int.from_bytes(digest, "big") % dim


def embed(text: str, dim: int = EMBED_DIM_DEFAULT, seed: int = EMBED_SEED_DEFAULT) -> np.ndarray:
    """Hashed bag-of-tokens embedding: case-fold, split on non-alphanumerics,
    hash each token into one of ``dim`` buckets, count, L2-normalize.

    Text with no tokens embeds to the zero vector, which is unsearchable:
    it scores 0 against everything.
    """
    counts = np.zeros(dim, dtype=np.float64)
    for token in _TOKEN_RE.findall(text.casefold()):
        counts[_bucket(token, dim, seed)] += 1.0
    norm = float(np.linalg.norm(counts))
    if norm == 0.0:
        return counts
    return counts / norm


def is_searchable(vector: np.ndarray) -> bool:
    return bool(vector.any())


def segment_video(duration_s: float, clip_len_s: float) -> list[tuple[float, float]]:
    """Split [0, duration) into consecutive clips of at most ``clip_len_s``
    seconds; the last clip may be shorter."""
    if clip_len_s <= 0:
        raise BadClipLength(f"clip length must be > 0, got {clip_len_s!r}")
    bounds = []
    start = 0.0
    while start < duration_s:
        end = min(start + clip_len_s, duration_s)
        bounds.append((start, end))
        start = end
    return bounds


def build_corpus(
    items: Iterable[CorpusItem],
    clip_len_s: float = CLIP_LEN_DEFAULT,
    *,
    embed_dim: int = EMBED_DIM_DEFAULT,
    embed_seed: int = EMBED_SEED_DEFAULT,
) -> Corpus:
    """Segment videos into clips and embed every searchable unit.
    Deterministic given the inputs."""
    items = list(items)
    seen: set[str] = set()
    for item in items:
        if item.id in seen:
            raise DuplicateItemId(f"duplicate corpus item id {item.id!r}")
        seen.add(item.id)
    if clip_len_s <= 0:
        raise BadClipLength(f"clip length must be > 0, got {clip_len_s!r}")

    clips: list[Clip] = []
    units: list[SearchUnit] = []
    vectors: list[np.ndarray] = []
    for pos, item in enumerate(items):
        if item.modality is Modality.VIDEO:
            for start, end in segment_video(item.duration_s, clip_len_s):
                clips.append(Clip(item.id, start, end))
                units.append(SearchUnit(item_pos=pos, clip_pos=len(clips) - 1))
                vectors.append(embed(item.content, embed_dim, embed_seed))
        else:
            units.append(SearchUnit(item_pos=pos))
            vectors.append(embed(item.content, embed_dim, embed_seed))
    index = (
        np.stack(vectors, axis=0) if vectors else np.zeros((0, embed_dim), dtype=np.float64)
    )
    return Corpus(
        items=items,
        clips=clips,
        units=units,
        index=index,
        embed_dim=embed_dim,
        embed_seed=embed_seed,
        clip_len_s=clip_len_s,
    )


def frame_ref(source_id: str, timestamp_s: float) -> str:
    return f"frame://{source_id}?t={timestamp_s:.3f}"


def sample_frames(clip: Clip, n: int) -> list[tuple[float, str]]:
    """``n`` uniformly spaced frames over [start, end), first at start.
    Timestamps are stored at the canonical 6-decimal precision."""
    if n < 1:
        raise ValueError(f"frame count must be >= 1, got {n!r}")
    span = clip.end_s - clip.start_s
    out = []
    for i in range(n):
        ts = round(clip.start_s + span * i / n, 6)
        out.append((ts, frame_ref(clip.source_id, ts)))
    return out


_MODALITY_LABEL = {Modality.TEXT: "Text", Modality.IMAGE: "Image", Modality.VIDEO: "Video"}


def search(
    corpus: Corpus,
    query: str,
    k: int,
    *,
    n_frames: int = FRAMES_PER_CLIP_DEFAULT,
) -> list[Observation]:
    """Top-k searchable units by cosine similarity, ties broken by insertion
    order.  Scores are quantized to 12 decimal places before ranking so that
    near-ties order identically on every platform, and stored on the
    observations at the canonical 6-decimal precision."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k!r}")
    if not corpus.units:
        raise EmptyIndex("corpus has no searchable units")
    query_vec = embed(query, corpus.embed_dim, corpus.embed_seed)
    scores = np.round(corpus.index @ query_vec, SCORE_DECIMALS)
    order = sorted(range(len(corpus.units)), key=lambda i: (-scores[i], i))[:k]

    observations: list[Observation] = []
    counters = {Modality.TEXT: 0, Modality.IMAGE: 0, Modality.VIDEO: 0}
    for unit_pos in order:
        unit = corpus.units[unit_pos]
        item = corpus.items[unit.item_pos]
        counters[item.modality] += 1
        obs_id = f"{_MODALITY_LABEL[item.modality]} {counters[item.modality]}"
        if unit.clip_pos is not None:
            clip = corpus.clips[unit.clip_pos]
            observations.append(
                Observation(
                    id=obs_id,
                    source_id=item.id,
                    modality=item.modality,
                    score=round(float(scores[unit_pos]), 6),
                    content=item.content,
                    asset_ref=item.asset_ref,
                    clip_start_s=clip.start_s,
                    clip_end_s=clip.end_s,
                    frames=tuple(sample_frames(clip, n_frames)),
                )
            )
        else:
            observations.append(
                Observation(
                    id=obs_id,
                    source_id=item.id,
                    modality=item.modality,
                    score=round(float(scores[unit_pos]), 6),
                    content=item.content,
                    asset_ref=item.asset_ref,
                )
            )
    return observations


def resolve_keyframes(
    observation: Observation, key_timestamps_s: Sequence[float]
) -> list[VisualItem]:
    """Snap each requested timestamp to the nearest pre-sampled frame of the
    clip (earlier frame wins on exact ties) and yield item seeds for the
    memory bank.  Requests outside the clip are dropped with a warning.

    Seeds carry modality, payload_ref, and source_timestamp_s; the identity
    fields (ordinal / owner_node / slot) are -1 until the runtime attaches
    them to a node.
    """
    if observation.modality is not Modality.VIDEO or not observation.frames:
        raise RetrievalError("keyframes can only be resolved on video clip observations")
    seeds: list[VisualItem] = []
    for requested in key_timestamps_s:
        if not observation.clip_start_s <= requested < observation.clip_end_s:
            log.warning(
                "keyframe request %.1fs outside clip [%.1f, %.1f) of %s; dropped",
                requested,
                observation.clip_start_s,
                observation.clip_end_s,
                observation.source_id,
            )
            continue
        ts, ref = min(observation.frames, key=lambda fr: (abs(fr[0] - requested), fr[0]))
        seeds.append(
            VisualItem(
                ordinal=-1,
                owner_node=-1,
                slot=-1,
                modality=ItemModality.VIDEO_FRAME,
                payload_ref=ref,
                source_timestamp_s=ts,
            )
        )
    return seeds


# -- manifests and corpus files -------------------------------------------


def _items_from_record(record: dict, origin: str) -> list[CorpusItem]:
    if not isinstance(record, dict) or "items" not in record:
        raise BadManifest(f"{origin}: expected an object with an 'items' list")
    try:
        return [CorpusItem.from_dict(entry) for entry in record["items"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise BadManifest(f"{origin}: {exc}") from exc


def load_manifest(path: str | Path) -> list[CorpusItem]:
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BadManifest(f"{path}: not valid JSON: {exc}") from exc
    if isinstance(record, dict) and record.get("schema") not in (None, MANIFEST_SCHEMA):
        raise BadManifest(f"{path}: unsupported manifest schema {record.get('schema')!r}")
    return _items_from_record(record, str(path))


def load_manifest_dir(directory: str | Path) -> list[CorpusItem]:
    """All items from every ``*.json`` manifest in the directory, in sorted
    filename order."""
    directory = Path(directory)
    items: list[CorpusItem] = []
    for path in sorted(directory.glob("*.json")):
        items.extend(load_manifest(path))
    return items


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus description.  Embeddings are not stored; they are
    deterministic and get rebuilt on load, so unchanged inputs always produce
    byte-identical files."""
    record = {
        "schema": CORPUS_SCHEMA,
        "clip_len_s": corpus.clip_len_s,
        "embed_dim": corpus.embed_dim,
        "embed_seed": corpus.embed_seed,
        "items": [item.to_dict() for item in corpus.items],
    }
    Path(path).write_text(canonical_dumps(record) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BadManifest(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(record, dict) or record.get("schema") != CORPUS_SCHEMA:
        raise BadManifest(f"{path}: expected a {CORPUS_SCHEMA!r} file")
    items = _items_from_record(record, str(path))
    return build_corpus(
        items,
        clip_len_s=record["clip_len_s"],
        embed_dim=record["embed_dim"],
        embed_seed=record["embed_seed"],
    )
