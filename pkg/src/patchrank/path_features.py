"""Path-overlap features bridging CVE descriptions and commit file paths.

Identifier-like entities are pulled from the description with deterministic
rules (an LLM-backed extractor can be plugged in instead), expanded to
matching repository paths by substring search, and compared against each
commit's touched paths by Jaccard overlap and embedded-text cosine.
"""

from __future__ import annotations

import re
from typing import Callable, Iterable

import numpy as np

from .corpus import CommitRecord, Corpus
from .embedding import PromptKind, embed_batch, render_prompt

DEFAULT_PER_ENTITY_CAP = 10

# Identifier shapes worth searching for: paths, dotted names, filenames,
# camelCase / snake_case tokens, and letter+digit tokens such as "NIO2".
_ENTITY_PATTERNS = (
    re.compile(r"[\w.\-]+(?:/[\w.\-]+)+"),
    re.compile(r"\b[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)+\b"),
    re.compile(r"\b[\w\-]+\.[A-Za-z]{1,6}\b"),
    re.compile(r"\b[A-Za-z\d]*[a-z][A-Za-z\d]*[A-Z][A-Za-z\d]*\b"),
    re.compile(r"\b[A-Za-z\d]*[A-Z]{2,}[a-z][A-Za-z\d]*\b"),
    re.compile(r"\b\w+_\w+\b"),
    re.compile(r"\b(?=[A-Za-z0-9]*[A-Za-z])(?=[A-Za-z0-9]*\d)[A-Za-z0-9]+\b"),
)


class EntityExtractionError(RuntimeError):
    """A pluggable entity extractor failed."""


def rule_based_entities(description: str) -> list[str]:
    entities: list[str] = []
    for pattern in _ENTITY_PATTERNS:
        entities.extend(m.group(0) for m in pattern.finditer(description))
    return entities


def extract_entities(
    description: str,
    extractor: Callable[[str], Iterable[str]] | None = None,
) -> set[str]:
    """Identifier entities from a CVE description, deduplicated
    case-insensitively (first occurrence's casing wins)."""
    if extractor is None:
        raw = rule_based_entities(description)
    else:
        try:
            raw = list(extractor(description))
        except Exception as exc:
            raise EntityExtractionError(f"entity extractor failed: {exc}") from exc
    seen: dict[str, str] = {}
    for entity in raw:
        entity = entity.strip()
        if entity and entity.lower() not in seen:
            seen[entity.lower()] = entity
    return set(seen.values())


def normalize_path(path: str) -> str:
    p = path.strip().lower()
    if p.startswith(("a/", "b/")):
        p = p[2:]
    return p


def path_set(paths: Iterable[str]) -> set[str]:
    return {normalize_path(p) for p in paths if p.strip()}


def commit_paths(commit: CommitRecord) -> set[str]:
    return path_set(fd.path for fd in commit.file_diffs)


def path_universe(corpus: Corpus) -> set[str]:
    """Every path ever touched by any commit of the corpus, normalized."""
    universe: set[str] = set()
    for commit in corpus.commits:
        universe |= commit_paths(commit)
    return universe


def search_paths(
    path_universe: set[str],
    entities: set[str],
    per_entity_cap: int = DEFAULT_PER_ENTITY_CAP,
) -> set[str]:
    """Expand entities to repository paths by case-insensitive substring
    match, keeping the shortest ``per_entity_cap`` paths per entity."""
    if per_entity_cap < 1:
        raise ValueError(f"per_entity_cap must be >= 1, got {per_entity_cap}")
    universe = sorted(path_universe)
    matches: set[str] = set()
    for entity in sorted(entities, key=str.lower):
        needle = entity.lower()
        hits = sorted((p for p in universe if needle in p), key=lambda p: (len(p), p))
        matches.update(hits[:per_entity_cap])
    return matches


def feature_jaccard(ner_paths: set[str], commit_paths: set[str]) -> float:
    """|A ∩ B| / |A ∪ B|; two empty sets score 0."""
    union = ner_paths | commit_paths
    if not union:
        return 0.0
    return len(ner_paths & commit_paths) / len(union)


def _joined(paths: set[str]) -> str:
    return "\n".join(sorted(paths))


def feature_path_cosine(provider, ner_paths: set[str], commit_paths: set[str]) -> float:
    """Cosine between the two path sets embedded as newline-joined text."""
    if not ner_paths or not commit_paths:
        return 0.0
    texts = [
        render_prompt(PromptKind.PATH_DOC, text=_joined(ner_paths)),
        render_prompt(PromptKind.PATH_DOC, text=_joined(commit_paths)),
    ]
    vec_a, vec_b = embed_batch(provider, texts)
    return float(np.dot(vec_a, vec_b))


class CachingEmbedder:
    """Provider wrapper memoizing raw vectors by input text.

    Path texts repeat heavily across (CVE, commit) pairs; this keeps
    feature assembly from re-embedding them.
    """

    def __init__(self, provider):
        self._provider = provider
        self._cache: dict[str, list[float]] = {}

    def embed(self, texts: list[str]) -> list[list[float]]:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for text, vector in zip(missing, self._provider.embed(missing)):
                self._cache[text] = vector
        return [self._cache[t] for t in texts]
