"""Video-derived behavior descriptions: client interface, parsing, and cache.

A pluggable multimodal LLM client produces free-text descriptions of the
speaker's facial expression, body language, and posture for one utterance.
Parsed annotations are cached to JSONL so downstream tuning never re-queries
the (expensive) client.
"""

from __future__ import annotations

import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Protocol

import requests

from .corpus import Conversation, CorpusManifest, Utterance, history_window

if TYPE_CHECKING:
    from .prompting import StructuredTemplate

BEHAVIOR_SECTIONS = ("facial expression", "body language", "posture")


class BehaviorParseError(ValueError):
    """Raised when a client response lacks one of the behavior sections.

    Carries the offending raw response so failure records can preserve it.
    """

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class TransportError(RuntimeError):
    """Raised when the client fails after exhausting retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class CacheError(OSError):
    """Raised on behavior-cache I/O failures."""


@dataclass(frozen=True)
class BehaviorAnnotation:
    utterance_id: str
    facial_expression: str
    body_language: str
    posture: str
    source_model: str
    created_at: str
    raw_response: str = ""

    def __post_init__(self) -> None:
        for name in ("facial_expression", "body_language", "posture"):
            if not getattr(self, name).strip():
                raise ValueError(f"behavior annotation has empty {name}")


@dataclass(frozen=True)
class MllmRequest:
    prompt_text: str
    media_refs: tuple[str, ...] = ()
    generation_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")


class MllmClient(Protocol):
    """Completion interface for a hosted (or mocked) multimodal model."""

    name: str

    def complete(self, request: MllmRequest) -> str: ...


class HttpMllmClient:
    """Client for an external HTTP completion service.

    POSTs {"prompt", "media_refs", "params"} as JSON and expects
    {"text": ...} back. The auth token is read from an environment
    variable so it never lands in config snapshots.
    """

    def __init__(
        self,
        endpoint: str,
        name: str = "http-mllm",
        auth_env: str | None = None,
        timeout_seconds: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.name = name
        self.auth_env = auth_env
        self.timeout_seconds = timeout_seconds
        self._session = session or requests.Session()

    def complete(self, request: MllmRequest) -> str:
        headers = {}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        payload = {
            "prompt": request.prompt_text,
            "media_refs": list(request.media_refs),
            "params": request.generation_params,
        }
        resp = self._session.post(
            self.endpoint, json=payload, headers=headers, timeout=self.timeout_seconds
        )
        resp.raise_for_status()
        return resp.json()["text"]


_SECTION_RE = re.compile(
    r"(facial expression|body language|posture)\s*:", re.IGNORECASE
)


def parse_behavior_response(raw: str) -> dict[str, str]:
    """Split a client response into its three behavior sections.

    Headers may appear in any order and any case; each value runs up to the
    next header or the end of the text.
    """
    if not raw:
        raise ValueError("raw response must be non-empty")
    matches = list(_SECTION_RE.finditer(raw))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        key = m.group(1).lower()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        sections[key] = raw[m.end():end].strip()
    for name in BEHAVIOR_SECTIONS:
        if name not in sections:
            raise BehaviorParseError(
                f"response is missing the {name!r} section", raw=raw
            )
        if not sections[name]:
            raise BehaviorParseError(
                f"response has an empty {name!r} section", raw=raw
            )
    return {
        "facial_expression": sections["facial expression"],
        "body_language": sections["body language"],
        "posture": sections["posture"],
    }


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def generate_behavior(
    client: MllmClient,
    utt: Utterance,
    conv: Conversation,
    template: StructuredTemplate,
    generation_params: dict | None = None,
    max_retries: int = 3,
    backoff_seconds: float = 0.5,
    include_history: bool = False,
    max_history_turns: int = 10,
    sleep: Callable[[float], None] = time.sleep,
) -> BehaviorAnnotation:
    """Query the client for one utterance and parse the behavior triple.

    Transport failures are retried with exponential backoff; the raw response
    is kept on the annotation for audit. By default only the target clip and
    text are sent; include_history adds preceding turns to the prompt.
    """
    from .prompting import build_behavior_prompt

    if not any(u.id == utt.id for u in conv.utterances):
        raise ValueError(f"utterance {utt.id!r} does not belong to conversation {conv.id!r}")
    history = (
        history_window(conv, utt.index_in_conversation, max_history_turns)
        if include_history
        else []
    )
    prompt = build_behavior_prompt(template, utt, history)
    request = MllmRequest(
        prompt_text=prompt.text,
        media_refs=tuple(r for r in (utt.video_ref, utt.audio_ref) if r),
        generation_params=generation_params or {},
    )
    raw = _complete_with_retries(client, request, max_retries, backoff_seconds, sleep)
    fields = parse_behavior_response(raw)
    return BehaviorAnnotation(
        utterance_id=utt.id,
        source_model=client.name,
        created_at=_utc_now(),
        raw_response=raw,
        **fields,
    )


def _complete_with_retries(
    client: MllmClient,
    request: MllmRequest,
    max_retries: int,
    backoff_seconds: float,
    sleep: Callable[[float], None],
) -> str:
    last_error: Exception | None = None
    for attempt in range(max_retries + 1):
        try:
            return client.complete(request)
        except Exception as exc:  # transport layer owns the failure taxonomy
            last_error = exc
            if attempt < max_retries:
                sleep(backoff_seconds * (2**attempt))
    raise TransportError(
        f"client {client.name!r} failed after {max_retries + 1} attempts: {last_error}",
        attempts=max_retries + 1,
    )


@dataclass(frozen=True)
class FailureRecord:
    utterance_id: str
    source_model: str
    error: str
    raw_response: str
    created_at: str


class BehaviorCache:
    """JSONL-backed store of annotations keyed by (utterance_id, source_model).

    Puts are idempotent per key; the newest record wins on reload. Parse
    failures are recorded in a sibling file so coverage is auditable.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.failures_path = self.path.with_suffix(".failures.jsonl")
        self._records: dict[tuple[str, str], BehaviorAnnotation] = {}
        self._order: dict[str, list[str]] = {}
        self._failures: dict[tuple[str, str], FailureRecord] = {}
        if self.path.exists():
            self._load()
        if self.failures_path.exists():
            self._load_failures()

    def _load(self) -> None:
        try:
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    ann = BehaviorAnnotation(**rec)
                    self._remember(ann)
        except OSError as exc:
            raise CacheError(f"cannot read behavior cache {self.path}: {exc}") from exc

    def _load_failures(self) -> None:
        with self.failures_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = FailureRecord(**json.loads(line))
                self._failures[(rec.utterance_id, rec.source_model)] = rec

    def _remember(self, ann: BehaviorAnnotation) -> None:
        key = (ann.utterance_id, ann.source_model)
        if key not in self._records:
            self._order.setdefault(ann.utterance_id, []).append(ann.source_model)
        else:
            models = self._order[ann.utterance_id]
            models.remove(ann.source_model)
            models.append(ann.source_model)
        self._records[key] = ann

    def put(self, annotation: BehaviorAnnotation) -> None:
        key = (annotation.utterance_id, annotation.source_model)
        if self._records.get(key) == annotation:
            return
        self._remember(annotation)
        try:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(annotation.__dict__, ensure_ascii=False) + "\n")
        except OSError as exc:
            raise CacheError(f"cannot write behavior cache {self.path}: {exc}") from exc

    def get(
        self, utterance_id: str, source_model: str | None = None
    ) -> BehaviorAnnotation | None:
        if source_model is not None:
            return self._records.get((utterance_id, source_model))
        models = self._order.get(utterance_id)
        if not models:
            return None
        return self._records[(utterance_id, models[-1])]

    def put_failure(self, record: FailureRecord) -> None:
        self._failures[(record.utterance_id, record.source_model)] = record
        try:
            with self.failures_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.__dict__, ensure_ascii=False) + "\n")
        except OSError as exc:
            raise CacheError(f"cannot write failure log {self.failures_path}: {exc}") from exc

    def failure_for(
        self, utterance_id: str, source_model: str | None = None
    ) -> FailureRecord | None:
        if source_model is not None:
            return self._failures.get((utterance_id, source_model))
        for (uid, _model), rec in reversed(self._failures.items()):
            if uid == utterance_id:
                return rec
        return None

    def __len__(self) -> int:
        return len(self._records)


@dataclass
class AnnotationRunSummary:
    total: int
    annotated: int
    failed: int
    skipped: int

    @property
    def coverage(self) -> float:
        return self.annotated / self.total if self.total else 0.0

    @property
    def failure_rate(self) -> float:
        return self.failed / self.total if self.total else 0.0


def annotate_corpus(
    client: MllmClient,
    corpus: CorpusManifest,
    template: StructuredTemplate,
    cache: BehaviorCache,
    generation_params: dict | None = None,
    max_retries: int = 3,
    backoff_seconds: float = 0.5,
    include_history: bool = False,
    max_history_turns: int = 10,
    max_concurrency: int = 1,
    sleep: Callable[[float], None] = time.sleep,
) -> AnnotationRunSummary:
    """Populate the cache for every utterance in the corpus.

    Utterances already cached for this client are skipped. Parse and
    transport failures become failure records; the run continues. Cache
    writes stay on the caller thread, only client calls fan out.
    """
    pending: list[tuple[Conversation, Utterance]] = []
    skipped = 0
    for conv, utt in corpus.iter_utterances():
        if cache.get(utt.id, client.name) is not None:
            skipped += 1
        else:
            pending.append((conv, utt))

    def attempt(item: tuple[Conversation, Utterance]):
        conv, utt = item
        try:
            ann = generate_behavior(
                client,
                utt,
                conv,
                template,
                generation_params=generation_params,
                max_retries=max_retries,
                backoff_seconds=backoff_seconds,
                include_history=include_history,
                max_history_turns=max_history_turns,
                sleep=sleep,
            )
            return utt.id, ann, None
        except (BehaviorParseError, TransportError) as exc:
            failure = FailureRecord(
                utterance_id=utt.id,
                source_model=client.name,
                error=str(exc),
                raw_response=getattr(exc, "raw", ""),
                created_at=_utc_now(),
            )
            return utt.id, None, failure

    annotated = failed = 0
    if max_concurrency > 1 and pending:
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            results = list(pool.map(attempt, pending))
    else:
        results = [attempt(item) for item in pending]
    for _utt_id, ann, failure in results:
        if ann is not None:
            cache.put(ann)
            annotated += 1
        else:
            cache.put_failure(failure)
            failed += 1
    total = skipped + len(pending)
    return AnnotationRunSummary(
        total=total, annotated=annotated + skipped, failed=failed, skipped=skipped
    )


def coverage_gaps(corpus: CorpusManifest, cache: BehaviorCache) -> list[str]:
    """Utterance ids with neither an annotation nor a recorded failure."""
    gaps = []
    for _conv, utt in corpus.iter_utterances():
        if cache.get(utt.id) is None and cache.failure_for(utt.id) is None:
            gaps.append(utt.id)
    return gaps
