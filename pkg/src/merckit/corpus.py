"""Conversation corpus model and JSONL ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

SPLITS = ("train", "dev", "test")


class ManifestError(ValueError):
    """Raised when a manifest file fails parsing or validation."""


@dataclass(frozen=True)
class EmotionLabelSet:
    """Ordered, fixed set of emotion labels; index positions are stable."""

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.labels) < 2:
            raise ValueError("label set needs at least 2 labels")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("label set contains duplicate labels")

    @property
    def k(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return label in self.labels

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValueError(f"unknown label {label!r}") from None


IEMOCAP_LABELS = EmotionLabelSet(
    ("happy", "sad", "neutral", "angry", "excited", "frustrated")
)
MELD_LABELS = EmotionLabelSet(
    ("neutral", "surprise", "fear", "sad", "joy", "disgust", "anger")
)
NAMED_LABEL_SETS = {"iemocap": IEMOCAP_LABELS, "meld": MELD_LABELS}


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    text: str
    audio_ref: str | None
    video_ref: str | None
    label: str | None
    index_in_conversation: int

    def __post_init__(self) -> None:
        if self.index_in_conversation < 0:
            raise ValueError(
                f"utterance {self.id!r} has negative index {self.index_in_conversation}"
            )


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self) -> None:
        if not self.utterances:
            raise ValueError(f"conversation {self.id!r} has no utterances")
        for pos, utt in enumerate(self.utterances):
            if utt.index_in_conversation != pos:
                raise ValueError(
                    f"conversation {self.id!r}: utterance {utt.id!r} has index "
                    f"{utt.index_in_conversation}, expected {pos}"
                )

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class CorpusManifest:
    conversations: tuple[Conversation, ...]
    split: str
    label_set: EmotionLabelSet

    def __post_init__(self) -> None:
        if not self.conversations:
            raise ValueError("manifest contains no conversations")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for conv in self.conversations:
            for utt in conv.utterances:
                if utt.label is not None and utt.label not in self.label_set:
                    raise ValueError(
                        f"utterance {utt.id!r} has label {utt.label!r} "
                        f"outside the label set"
                    )

    @property
    def n_conversations(self) -> int:
        return len(self.conversations)

    def iter_utterances(self):
        for conv in self.conversations:
            for utt in conv.utterances:
                yield conv, utt


def _utterance_from_record(rec: dict, conv_id: str) -> Utterance:
    try:
        return Utterance(
            id=str(rec["id"]),
            speaker=str(rec["speaker"]),
            text=str(rec["text"]),
            audio_ref=rec.get("audio_ref"),
            video_ref=rec.get("video_ref"),
            label=rec.get("label"),
            index_in_conversation=int(rec["index"]),
        )
    except KeyError as exc:
        raise ManifestError(
            f"conversation {conv_id!r}: utterance record missing field {exc}"
        ) from None


def _utterance_to_record(utt: Utterance) -> dict:
    return {
        "id": utt.id,
        "speaker": utt.speaker,
        "text": utt.text,
        "audio_ref": utt.audio_ref,
        "video_ref": utt.video_ref,
        "label": utt.label,
        "index": utt.index_in_conversation,
    }


def load_manifest(
    path: str | Path, label_set: EmotionLabelSet, split: str = "train"
) -> CorpusManifest:
    """Load a JSONL manifest, one conversation per line, in file order.

    Raises ManifestError naming the offending line for malformed records and
    the offending label and utterance for out-of-set labels.
    """
    path = Path(path)
    conversations: list[Conversation] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            try:
                conv = Conversation(
                    id=str(rec["id"]),
                    utterances=tuple(
                        _utterance_from_record(u, str(rec["id"]))
                        for u in rec["utterances"]
                    ),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            for utt in conv.utterances:
                if utt.label is not None and utt.label not in label_set:
                    raise ManifestError(
                        f"{path}:{lineno}: utterance {utt.id!r} has unknown "
                        f"label {utt.label!r}"
                    )
            conversations.append(conv)
    if not conversations:
        raise ManifestError("manifest contains no conversations")
    return CorpusManifest(
        conversations=tuple(conversations), split=split, label_set=label_set
    )


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Write a manifest back to JSONL; inverse of load_manifest."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for conv in manifest.conversations:
            rec = {
                "id": conv.id,
                "utterances": [_utterance_to_record(u) for u in conv.utterances],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def history_window(conv: Conversation, j: int, max_turns: int) -> list[Utterance]:
    """Return the last min(j, max_turns) utterances strictly before index j."""
    if j < 0 or j >= len(conv.utterances):
        raise IndexError(f"utterance index {j} out of range for conversation {conv.id!r}")
    if max_turns < 0:
        raise ValueError("max_turns must be >= 0")
    start = max(0, j - max_turns)
    return list(conv.utterances[start:j])
