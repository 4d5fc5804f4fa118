"""Deterministic synthetic fixture: a small corpus plus mock clients.

The corpus is built from twin conversation pairs that share every text and
speaker but carry swapped emotion labels. Text alone therefore cannot
separate the twins, while the mock client's behavior descriptions are
label-predictive, so a pipeline that uses behavior text can beat the
text-only ceiling by a wide margin.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .behavior import MllmRequest, TransportError
from .corpus import (
    Conversation,
    CorpusManifest,
    EmotionLabelSet,
    Utterance,
    save_manifest,
)

SYNTHETIC_LABELS = EmotionLabelSet(("happy", "sad"))

# constant per label so behavior text is perfectly label-predictive; kept
# short because fixture training time scales with prompt length
BEHAVIOR_LEXICON: dict[str, dict[str, str]] = {
    "happy": {
        "facial": "a wide beaming smile",
        "body": "open lively gestures",
        "posture": "an upright springy stance",
    },
    "sad": {
        "facial": "a heavy downcast frown",
        "body": "slow folded-in gestures",
        "posture": "slumped sagging shoulders",
    },
}

# neutral fillers; none contains a label word
_TEXT_BANK = (
    "the meeting ran long again",
    "the train schedule changed",
    "the coffee machine works now",
    "rain is forecast for later",
    "my neighbor adopted a cat",
    "the report went out early",
    "we should plan the trip",
    "the garden needs watering",
    "a window was open overnight",
    "that new show started",
    "the library extended hours",
    "traffic was odd on the bridge",
)

_SPEAKERS = ("A", "B")


def behavior_description(label: str) -> dict[str, str]:
    if label not in BEHAVIOR_LEXICON:
        raise KeyError(f"no behavior lexicon entry for label {label!r}")
    return dict(BEHAVIOR_LEXICON[label])


def behavior_response_text(label: str) -> str:
    """The raw client answer for an utterance with this gold label."""
    parts = behavior_description(label)
    return (
        f"Facial expression: {parts['facial']}\n"
        f"Body language: {parts['body']}\n"
        f"Posture: {parts['posture']}"
    )


def build_synthetic_corpus(
    n_conversations: int = 32,
    utterances_per_conversation: int = 3,
    label_set: EmotionLabelSet = SYNTHETIC_LABELS,
    seed: int = 13,
    split: str = "train",
) -> CorpusManifest:
    """Twin-pair corpus: conversations 2m and 2m+1 differ only in labels.

    Labels are swapped per utterance between twins (K=2 labels), so any
    predictor reading only texts, speakers, and history gets at most one
    twin of each pair right.
    """
    if n_conversations % 2 != 0:
        raise ValueError("n_conversations must be even to form twin pairs")
    if label_set.k != 2:
        raise ValueError("the twin-pair construction needs exactly 2 labels")
    rng = random.Random(seed)
    conversations = []
    for pair in range(n_conversations // 2):
        texts = [
            _TEXT_BANK[rng.randrange(len(_TEXT_BANK))]
            for _ in range(utterances_per_conversation)
        ]
        base_labels = [
            label_set.labels[rng.randrange(2)]
            for _ in range(utterances_per_conversation)
        ]
        for twin in range(2):
            conv_idx = pair * 2 + twin
            conv_id = f"c{conv_idx:03d}"
            utterances = []
            for j in range(utterances_per_conversation):
                label = base_labels[j]
                if twin == 1:
                    label = label_set.labels[1 - label_set.index_of(label)]
                utt_id = f"{conv_id}_u{j}"
                utterances.append(
                    Utterance(
                        id=utt_id,
                        speaker=_SPEAKERS[j % 2],
                        text=texts[j],
                        audio_ref=f"synthetic://audio/{utt_id}",
                        video_ref=f"synthetic://video/{utt_id}",
                        label=label,
                        index_in_conversation=j,
                    )
                )
            conversations.append(Conversation(id=conv_id, utterances=tuple(utterances)))
    return CorpusManifest(
        conversations=tuple(conversations), label_set=label_set, split=split
    )


def label_map(corpus: CorpusManifest) -> dict[str, str]:
    return {utt.id: utt.label for _, utt in corpus.iter_utterances()}


_REF_RE = re.compile(r"^synthetic://(?:video|audio)/(?P<utt>.+)$")


def utterance_id_from_refs(media_refs: tuple[str, ...]) -> str | None:
    for ref in media_refs:
        m = _REF_RE.match(ref)
        if m:
            return m.group("utt")
    return None


@dataclass
class LabelOracleMllmClient:
    """Mock hosted model that answers from the gold labels.

    Behavior-description requests get the label's lexicon text; emotion
    requests get the label itself, rendered through answer_format. Utterance
    identity travels in the synthetic:// media refs, exactly as a real
    deployment would pass clip handles.
    """

    labels_by_utterance: dict[str, str]
    name: str = "label-oracle"
    answer_format: str = "{label}"
    fail_ids: frozenset[str] = frozenset()
    gibberish_ids: frozenset[str] = frozenset()
    calls: list[MllmRequest] = field(default_factory=list)

    def complete(self, request: MllmRequest) -> str:
        self.calls.append(request)
        utt_id = utterance_id_from_refs(request.media_refs)
        if utt_id is None:
            raise TransportError("request carries no synthetic media ref", attempts=1)
        if utt_id in self.fail_ids:
            raise TransportError(f"synthetic outage for {utt_id}", attempts=1)
        if utt_id in self.gibberish_ids:
            return "the clip shows a person speaking"
        label = self.labels_by_utterance.get(utt_id)
        if label is None:
            raise TransportError(f"unknown utterance {utt_id}", attempts=1)
        # emotion prompts enumerate the whole label set in the constraint;
        # behavior prompts never mention labels (and the fixture texts avoid
        # label words), so this separates the two request kinds
        text = request.prompt_text.lower()
        all_labels = set(self.labels_by_utterance.values())
        if all(candidate.lower() in text for candidate in all_labels):
            return self.answer_format.format(label=label)
        return behavior_response_text(label)


@dataclass
class ScriptedMllmClient:
    """Mock client that replays a fixed script keyed by utterance id."""

    responses: dict[str, str]
    name: str = "scripted"
    fail_first: int = 0
    calls: int = 0

    def complete(self, request: MllmRequest) -> str:
        self.calls += 1
        if self.calls <= self.fail_first:
            raise ConnectionError("scripted transient failure")
        utt_id = utterance_id_from_refs(request.media_refs)
        if utt_id is None or utt_id not in self.responses:
            raise TransportError(f"no scripted response for {utt_id!r}", attempts=1)
        return self.responses[utt_id]


def write_fixture_corpus(
    path: str | Path,
    n_conversations: int = 32,
    utterances_per_conversation: int = 3,
    seed: int = 13,
) -> CorpusManifest:
    corpus = build_synthetic_corpus(
        n_conversations=n_conversations,
        utterances_per_conversation=utterances_per_conversation,
        seed=seed,
    )
    save_manifest(corpus, path)
    return corpus
