"""Commit and CVE corpus handling.

Loads line-delimited JSON dumps of commit histories and CVE records,
splits raw unified diffs into per-file units, and provides the
tokenizer used everywhere else (indexing, embedding, truncation).
"""

from __future__ import annotations

import json
import re
from bisect import bisect_left
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path


class DumpFormatError(ValueError):
    """A commit or CVE dump line violates the expected JSONL schema."""


_COMMIT_ID_RE = re.compile(r"^[0-9a-f]{40}$")
_DIFF_HEADER_RE = re.compile(r"^diff --git .*$", re.MULTILINE)
_BINARY_SECTION_RE = re.compile(r"^(?:Binary files .* differ|GIT binary patch)", re.MULTILINE)
_WORD_RUN_RE = re.compile(r"\w+")
_SUBTOKEN_RE = re.compile(r"[A-Z]+(?![a-z])|[A-Z][a-z]+|[a-z]+|[0-9]+")

COMMIT_DUMP_KEYS = frozenset({"commit_id", "repo_id", "author_time", "message", "diff"})
CVE_DUMP_KEYS = frozenset(
    {"cve_id", "description", "reserve_time", "publish_time", "repo_id", "known_patch_ids"}
)


@dataclass(frozen=True)
class FileDiff:
    """One file's portion of a unified diff.

    ``path`` is the new-side path with the ``a/``/``b/`` prefix stripped;
    ``header`` is the ``diff --git`` line without its newline; ``body`` is
    the raw remainder of the file section, so ``header + body`` reproduces
    the original text exactly.
    """

    path: str
    header: str
    body: str


@dataclass(frozen=True)
class CommitRecord:
    commit_id: str
    repo_id: str
    author_time: int
    message: str
    file_diffs: tuple[FileDiff, ...] = ()

    def __post_init__(self) -> None:
        if not _COMMIT_ID_RE.match(self.commit_id):
            raise ValueError(f"commit_id must be 40 lowercase hex chars: {self.commit_id!r}")
        if self.author_time < 0:
            raise ValueError(f"author_time must be >= 0, got {self.author_time}")

    def diff_text(self) -> str:
        """Reconstruct the unified diff from the first header onward."""
        return "".join(fd.header + fd.body for fd in self.file_diffs)

    def file_texts(self) -> dict[str, str]:
        """Per-path diff text, merging repeated paths in order of appearance."""
        texts: dict[str, str] = {}
        for fd in self.file_diffs:
            texts[fd.path] = texts.get(fd.path, "") + fd.header + fd.body
        return texts


@dataclass(frozen=True)
class CveRecord:
    cve_id: str
    description: str
    reserve_time: int | None
    publish_time: int | None
    repo_id: str
    known_patch_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if (
            self.reserve_time is not None
            and self.publish_time is not None
            and self.reserve_time > self.publish_time
        ):
            raise ValueError(f"{self.cve_id}: reserve_time after publish_time")


@dataclass
class Corpus:
    """All commits of one repository, sorted by (author_time, commit_id)."""

    repo_id: str
    commits: list[CommitRecord]
    time_index: list[int] = field(default_factory=list)
    _positions: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.time_index:
            self.time_index = [c.author_time for c in self.commits]
        if not self._positions:
            self._positions = {c.commit_id: i for i, c in enumerate(self.commits)}

    def __len__(self) -> int:
        return len(self.commits)

    def __contains__(self, commit_id: str) -> bool:
        return commit_id in self._positions

    @property
    def commit_ids(self) -> list[str]:
        return [c.commit_id for c in self.commits]

    def position_of(self, commit_id: str) -> int:
        try:
            return self._positions[commit_id]
        except KeyError:
            raise KeyError(f"unknown commit {commit_id!r} in repo {self.repo_id!r}") from None

    def get(self, commit_id: str) -> CommitRecord:
        return self.commits[self.position_of(commit_id)]

    def insertion_position(self, timestamp: int) -> int:
        return bisect_left(self.time_index, timestamp)

    def is_sorted(self) -> bool:
        """O(n) check of the (author_time, commit_id) sort invariant."""
        keys = [(c.author_time, c.commit_id) for c in self.commits]
        return all(keys[i] <= keys[i + 1] for i in range(len(keys) - 1)) and self.time_index == [
            c.author_time for c in self.commits
        ]


def split_diff_by_file(diff_text: str) -> list[FileDiff]:
    """Split a raw unified diff into per-file sections.

    Anything before the first ``diff --git`` header is dropped.
    Concatenating ``header + body`` over the result reconstructs the
    input from the first header onward, except that binary-file sections
    keep an empty body: their paths still count for path features, but
    they contribute no text.
    """
    headers = list(_DIFF_HEADER_RE.finditer(diff_text))
    diffs: list[FileDiff] = []
    for i, m in enumerate(headers):
        end = headers[i + 1].start() if i + 1 < len(headers) else len(diff_text)
        header = m.group(0)
        body = diff_text[m.start() + len(header) : end]
        if _BINARY_SECTION_RE.search(body):
            body = ""
        diffs.append(FileDiff(path=_path_from_header(header), header=header, body=body))
    return diffs


def _path_from_header(header: str) -> str:
    rest = header[len("diff --git ") :].strip()
    if " b/" in rest:
        path = rest.rsplit(" b/", 1)[1]
    else:
        path = rest.split()[-1] if rest.split() else rest
        if path.startswith(("a/", "b/")):
            path = path[2:]
    return path.strip().strip('"')


@lru_cache(maxsize=65536)
def _split_run(run: str) -> tuple[str, ...]:
    compound = run.lower()
    subs = [m.group(0).lower() for part in run.split("_") for m in _SUBTOKEN_RE.finditer(part)]
    if subs == [compound]:
        return (compound,)
    return (compound, *subs)


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on non-alphanumerics.

    camelCase, snake_case and letter/digit compounds additionally yield
    their subtokens while the full compound token is retained, so
    ``OpenSSLEngine.java`` gives ``opensslengine, open, ssl, engine, java``.
    """
    tokens: list[str] = []
    for m in _WORD_RUN_RE.finditer(text):
        tokens.extend(_split_run(m.group(0)))
    return tokens


def token_count(text: str) -> int:
    return sum(len(_split_run(m.group(0))) for m in _WORD_RUN_RE.finditer(text))


def truncate_to_tokens(text: str, budget: int) -> str:
    """Longest prefix of ``text`` holding at most ``budget`` tokens.

    Never cuts inside a token; under-budget text is returned unchanged.
    """
    if budget < 1:
        raise ValueError(f"token budget must be >= 1, got {budget}")
    used = 0
    last_end = 0
    for m in _WORD_RUN_RE.finditer(text):
        run_tokens = len(_split_run(m.group(0)))
        if used + run_tokens > budget:
            return text[:last_end]
        used += run_tokens
        last_end = m.end()
    return text


def _parse_commit_line(line: str, lineno: int) -> CommitRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DumpFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict) or set(obj) != COMMIT_DUMP_KEYS:
        raise DumpFormatError(
            f"line {lineno}: expected keys {sorted(COMMIT_DUMP_KEYS)}, "
            f"got {sorted(obj) if isinstance(obj, dict) else type(obj).__name__}"
        )
    try:
        return CommitRecord(
            commit_id=obj["commit_id"],
            repo_id=obj["repo_id"],
            author_time=int(obj["author_time"]),
            message=obj["message"],
            file_diffs=tuple(split_diff_by_file(obj["diff"])),
        )
    except (TypeError, ValueError) as exc:
        raise DumpFormatError(f"line {lineno}: {exc}") from exc


def _read_commit_records(path: str | Path) -> list[CommitRecord]:
    records: list[CommitRecord] = []
    seen: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = _parse_commit_line(line, lineno)
            key = (record.repo_id, record.commit_id)
            if key in seen:
                raise DumpFormatError(
                    f"line {lineno}: duplicate commit_id {record.commit_id} "
                    f"(first seen on line {seen[key]})"
                )
            seen[key] = lineno
            records.append(record)
    return records


def build_corpus(repo_id: str, records: list[CommitRecord]) -> Corpus:
    ordered = sorted(records, key=lambda c: (c.author_time, c.commit_id))
    return Corpus(repo_id=repo_id, commits=ordered)


def ingest_commit_dump(path: str | Path) -> Corpus:
    """Load a single-repository commit dump (JSONL, one commit per line)."""
    records = _read_commit_records(path)
    repo_ids = sorted({r.repo_id for r in records})
    if len(repo_ids) > 1:
        raise DumpFormatError(f"dump mixes repositories {repo_ids}; expected exactly one")
    repo_id = repo_ids[0] if repo_ids else ""
    return build_corpus(repo_id, records)


def ingest_multi_repo_dump(path: str | Path) -> dict[str, Corpus]:
    """Load a commit dump holding one or more repositories, keyed by repo."""
    by_repo: dict[str, list[CommitRecord]] = {}
    for record in _read_commit_records(path):
        by_repo.setdefault(record.repo_id, []).append(record)
    return {repo: build_corpus(repo, records) for repo, records in sorted(by_repo.items())}


def serialize_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back to dump format; re-ingesting yields an equal corpus."""
    with open(path, "w", encoding="utf-8") as fh:
        for commit in corpus.commits:
            fh.write(
                json.dumps(
                    {
                        "commit_id": commit.commit_id,
                        "repo_id": commit.repo_id,
                        "author_time": commit.author_time,
                        "message": commit.message,
                        "diff": commit.diff_text(),
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_cve_dump(path: str | Path) -> list[CveRecord]:
    """Load CVE records (JSONL); null timestamps are allowed."""
    records: list[CveRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or set(obj) != CVE_DUMP_KEYS:
                raise DumpFormatError(
                    f"line {lineno}: expected keys {sorted(CVE_DUMP_KEYS)}, "
                    f"got {sorted(obj) if isinstance(obj, dict) else type(obj).__name__}"
                )
            try:
                records.append(
                    CveRecord(
                        cve_id=obj["cve_id"],
                        description=obj["description"],
                        reserve_time=None if obj["reserve_time"] is None else int(obj["reserve_time"]),
                        publish_time=None if obj["publish_time"] is None else int(obj["publish_time"]),
                        repo_id=obj["repo_id"],
                        known_patch_ids=frozenset(obj["known_patch_ids"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise DumpFormatError(f"line {lineno}: {exc}") from exc
    return records


def serialize_cves(cves: list[CveRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cve in cves:
            fh.write(
                json.dumps(
                    {
                        "cve_id": cve.cve_id,
                        "description": cve.description,
                        "reserve_time": cve.reserve_time,
                        "publish_time": cve.publish_time,
                        "repo_id": cve.repo_id,
                        "known_patch_ids": sorted(cve.known_patch_ids),
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )
