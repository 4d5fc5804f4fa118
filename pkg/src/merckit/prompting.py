"""Structured prompt construction for behavior generation and emotion tuning.

All prompts share one fixed skeleton (title, context, objective, constraint)
so that equal inputs always produce byte-identical text. Modality placeholder
tokens are reserved strings that must never occur in corpus text; they mark
the positions that multimodal assembly later fills with feature embeddings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

from .corpus import EmotionLabelSet, Utterance

if TYPE_CHECKING:
    from .behavior import BehaviorAnnotation

VIDEO_TOKEN = "<VID>"
AUDIO_TOKEN = "<AUD>"


class TemplateError(ValueError):
    """Raised for invalid templates or template files."""


class PromptBuildError(ValueError):
    """Raised when a prompt cannot be built, e.g. placeholder collisions."""


@dataclass(frozen=True)
class PlaceholderSpec:
    video_token: str = VIDEO_TOKEN
    audio_token: str = AUDIO_TOKEN
    n_video_slots: int = 64
    n_audio_slots: int = 16

    def __post_init__(self) -> None:
        if not self.video_token or not self.audio_token:
            raise TemplateError("placeholder tokens must be non-empty")
        if self.video_token == self.audio_token:
            raise TemplateError("video and audio placeholder tokens must differ")
        if self.n_video_slots < 0 or self.n_audio_slots < 0:
            raise TemplateError("placeholder slot counts must be >= 0")

    def with_counts(self, n_video: int, n_audio: int) -> PlaceholderSpec:
        return replace(self, n_video_slots=n_video, n_audio_slots=n_audio)


@dataclass(frozen=True)
class BehaviorFlags:
    facial: bool = True
    body: bool = True
    posture: bool = True

    def any(self) -> bool:
        return self.facial or self.body or self.posture

    def enabled(self) -> tuple[str, ...]:
        out = []
        if self.facial:
            out.append("facial")
        if self.body:
            out.append("body")
        if self.posture:
            out.append("posture")
        return tuple(out)

    @classmethod
    def none(cls) -> BehaviorFlags:
        return cls(facial=False, body=False, posture=False)

    @classmethod
    def parse(cls, spec: str) -> BehaviorFlags:
        """Parse a comma-separated flag list like "facial,posture"."""
        wanted = {part.strip() for part in spec.split(",") if part.strip()}
        unknown = wanted - {"facial", "body", "posture", "none"}
        if unknown:
            raise ValueError(f"unknown behavior flags: {sorted(unknown)}")
        if "none" in wanted and len(wanted) > 1:
            raise ValueError("'none' cannot be combined with other behavior flags")
        return cls(
            facial="facial" in wanted,
            body="body" in wanted,
            posture="posture" in wanted,
        )


@dataclass(frozen=True)
class StructuredTemplate:
    title: str
    context_header: str
    objective: str
    constraint: str
    placeholder_spec: PlaceholderSpec = field(default_factory=PlaceholderSpec)
    name: str = "template"

    def __post_init__(self) -> None:
        for section in ("title", "context_header", "objective", "constraint"):
            if not getattr(self, section).strip():
                raise TemplateError(f"template section {section!r} must be non-empty")


@dataclass(frozen=True)
class PromptInstance:
    text: str
    placeholder_positions: dict[str, tuple[int, ...]]
    target_text: str | None
    target_label: str | None
    behavior_flags: BehaviorFlags
    placeholder_spec: PlaceholderSpec
    utterance_id: str | None = None


def count_placeholders(p: PromptInstance) -> dict[str, int]:
    """Exact occurrence counts of the placeholder tokens in the prompt text."""
    return {
        "video": p.text.count(p.placeholder_spec.video_token),
        "audio": p.text.count(p.placeholder_spec.audio_token),
    }


def _check_collisions(spec: PlaceholderSpec, fragments: list[str]) -> None:
    for frag in fragments:
        for token in (spec.video_token, spec.audio_token):
            if token in frag:
                raise PromptBuildError(
                    f"placeholder token {token!r} occurs in corpus text {frag!r}"
                )


def _speaker_line(utt: Utterance) -> str:
    return f"{utt.speaker}: {utt.text}"


def _behavior_lines(
    annotation: BehaviorAnnotation | None, flags: BehaviorFlags
) -> list[str]:
    if annotation is None:
        return []
    lines = []
    if flags.facial:
        lines.append(f"Facial expression: {annotation.facial_expression}")
    if flags.body:
        lines.append(f"Body language: {annotation.body_language}")
    if flags.posture:
        lines.append(f"Posture: {annotation.posture}")
    return lines


def _media_lines(spec: PlaceholderSpec) -> list[str]:
    lines = []
    if spec.n_video_slots > 0:
        lines.append("video: " + spec.video_token * spec.n_video_slots)
    if spec.n_audio_slots > 0:
        lines.append("audio: " + spec.audio_token * spec.n_audio_slots)
    return lines


def _find_offsets(text: str, token: str) -> tuple[int, ...]:
    offsets = []
    start = 0
    while True:
        pos = text.find(token, start)
        if pos < 0:
            return tuple(offsets)
        offsets.append(pos)
        start = pos + len(token)


def _render(
    template: StructuredTemplate,
    context_lines: list[str],
    constraint: str | None = None,
) -> str:
    body = "\n".join(context_lines)
    return (
        f"{template.title}\n\n"
        f"{template.context_header}\n{body}\n\n"
        f"Objective: {template.objective}\n"
        f"Constraint: {constraint if constraint is not None else template.constraint}"
    )


def _instance(
    template: StructuredTemplate,
    spec: PlaceholderSpec,
    context_lines: list[str],
    target_text: str | None,
    target_label: str | None,
    flags: BehaviorFlags,
    utterance_id: str | None,
    constraint: str | None = None,
) -> PromptInstance:
    text = _render(template, context_lines, constraint)
    counts = {
        "video": text.count(spec.video_token),
        "audio": text.count(spec.audio_token),
    }
    if counts["video"] != spec.n_video_slots or counts["audio"] != spec.n_audio_slots:
        raise PromptBuildError(
            f"placeholder counts {counts} do not match spec "
            f"({spec.n_video_slots} video, {spec.n_audio_slots} audio)"
        )
    return PromptInstance(
        text=text,
        placeholder_positions={
            "video": _find_offsets(text, spec.video_token),
            "audio": _find_offsets(text, spec.audio_token),
        },
        target_text=target_text,
        target_label=target_label,
        behavior_flags=flags,
        placeholder_spec=spec,
        utterance_id=utterance_id,
    )


def build_behavior_prompt(
    template: StructuredTemplate, utt: Utterance, history: list[Utterance]
) -> PromptInstance:
    """Prompt asking the heavyweight client to describe the speaker's behavior.

    Media travels out of band as attachments, so the text carries no
    placeholder tokens.
    """
    spec = template.placeholder_spec.with_counts(0, 0)
    fragments = [u.text for u in history] + [utt.text]
    _check_collisions(spec, fragments)
    context_lines = [_speaker_line(u) for u in history] + [_speaker_line(utt)]
    return _instance(
        template,
        spec,
        context_lines,
        target_text=None,
        target_label=None,
        flags=BehaviorFlags.none(),
        utterance_id=utt.id,
    )


def build_alignment_prompt(
    template: StructuredTemplate,
    utt: Utterance,
    history: list[Utterance],
    annotation: BehaviorAnnotation,
    flags: BehaviorFlags,
    placeholder_spec: PlaceholderSpec | None = None,
) -> PromptInstance:
    """Stage-A instance: text plus placeholders in, behavior description out.

    The target concatenates the flag-selected behavior sections in fixed
    order (facial, body, posture).
    """
    if not flags.any():
        raise ValueError("stage A needs at least one behavior type")
    spec = placeholder_spec or template.placeholder_spec
    fragments = [u.text for u in history] + [utt.text]
    _check_collisions(spec, fragments)
    context_lines = (
        [_speaker_line(u) for u in history]
        + [_speaker_line(utt)]
        + _media_lines(spec)
    )
    target_text = " ".join(_behavior_lines(annotation, flags))
    return _instance(
        template,
        spec,
        context_lines,
        target_text=target_text,
        target_label=None,
        flags=flags,
        utterance_id=utt.id,
    )


def build_merc_prompt(
    template: StructuredTemplate,
    utt: Utterance,
    history: list[Utterance],
    label_set: EmotionLabelSet,
    annotation: BehaviorAnnotation | None,
    flags: BehaviorFlags,
    placeholder_spec: PlaceholderSpec | None = None,
) -> PromptInstance:
    """Stage-B instance: multimodal context in, one emotion label out.

    The constraint enumerates the label set verbatim. Behavior lines are
    inserted next to the target utterance when an annotation is supplied and
    at least one flag is on; with no annotation the prompt is the plain
    instruction-tuning baseline.
    """
    if utt.label is not None and utt.label not in label_set:
        raise ValueError(
            f"utterance {utt.id!r} label {utt.label!r} is outside the label set"
        )
    spec = placeholder_spec or template.placeholder_spec
    behavior_lines = _behavior_lines(annotation, flags)
    fragments = [u.text for u in history] + [utt.text] + behavior_lines
    _check_collisions(spec, fragments)
    labels_text = ", ".join(label_set.labels)
    if "{labels}" in template.constraint:
        constraint = template.constraint.replace("{labels}", labels_text)
    else:
        constraint = template.constraint + f" Answer with exactly one of: {labels_text}."
    context_lines = (
        [_speaker_line(u) for u in history]
        + [_speaker_line(utt)]
        + behavior_lines
        + _media_lines(spec)
    )
    return _instance(
        template,
        spec,
        context_lines,
        target_text=utt.label,
        target_label=utt.label,
        flags=flags if annotation is not None else BehaviorFlags.none(),
        utterance_id=utt.id,
        constraint=constraint,
    )


_TEMPLATE_SECTIONS = ("title", "context", "objective", "constraint")


def load_template(
    path: str | Path,
    placeholder_spec: PlaceholderSpec | None = None,
    name: str | None = None,
) -> StructuredTemplate:
    """Load a template from a file with [title]/[context]/[objective]/[constraint] markers."""
    path = Path(path)
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in path.read_text(encoding="utf-8").splitlines():
        marker = line.strip().lower()
        if marker.startswith("[") and marker.endswith("]"):
            key = marker[1:-1]
            if key not in _TEMPLATE_SECTIONS:
                raise TemplateError(f"{path}: unknown template section {key!r}")
            current = key
            sections[current] = []
            continue
        if current is not None:
            sections[current].append(line)
    missing = [s for s in _TEMPLATE_SECTIONS if s not in sections]
    if missing:
        raise TemplateError(f"{path}: missing template sections {missing}")
    text = {k: "\n".join(v).strip() for k, v in sections.items()}
    return StructuredTemplate(
        title=text["title"],
        context_header=text["context"],
        objective=text["objective"],
        constraint=text["constraint"],
        placeholder_spec=placeholder_spec or PlaceholderSpec(),
        name=name or path.stem,
    )


def template_checksum(path: str | Path) -> str:
    """SHA-256 of the template file bytes, recorded in run metadata."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_template_path(kind: str) -> Path:
    """Path of a packaged canonical template: kind is 'behavior' or 'emotion'."""
    if kind not in ("behavior", "emotion"):
        raise ValueError(f"unknown template kind {kind!r}")
    return Path(__file__).parent / "templates" / f"{kind}.tmpl"
