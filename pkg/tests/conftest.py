import pytest
import torch

from merckit.behavior import BehaviorAnnotation, BehaviorCache
from merckit.corpus import Conversation, CorpusManifest, EmotionLabelSet, Utterance
from merckit.features import (
    AudioFrameSpec,
    FeatureAdapter,
    FeaturePipeline,
    FrameSampleSpec,
    MomentAudioEncoder,
    ProjectionVideoEncoder,
)
from merckit.model import TinyDecoderConfig, TinyDecoderLM
from merckit.prompting import PlaceholderSpec, StructuredTemplate

IEMOCAP = EmotionLabelSet(("happy", "sad", "neutral", "angry", "excited", "frustrated"))


@pytest.fixture(scope="session")
def iemocap_labels() -> EmotionLabelSet:
    return IEMOCAP


@pytest.fixture()
def two_labels() -> EmotionLabelSet:
    return EmotionLabelSet(("happy", "sad"))


def make_utterance(
    conv_id: str,
    j: int,
    text: str = "hello there",
    speaker: str = "A",
    label: str | None = "happy",
    media: bool = True,
) -> Utterance:
    utt_id = f"{conv_id}_u{j}"
    return Utterance(
        id=utt_id,
        speaker=speaker,
        text=text,
        audio_ref=f"synthetic://audio/{utt_id}" if media else None,
        video_ref=f"synthetic://video/{utt_id}" if media else None,
        label=label,
        index_in_conversation=j,
    )


def make_conversation(conv_id: str, labels: list[str | None], **kw) -> Conversation:
    utts = tuple(
        make_utterance(conv_id, j, text=f"utterance number {j}", label=lab, **kw)
        for j, lab in enumerate(labels)
    )
    return Conversation(id=conv_id, utterances=utts)


@pytest.fixture()
def small_corpus(two_labels) -> CorpusManifest:
    convs = (
        make_conversation("c0", ["happy", "sad", "happy"]),
        make_conversation("c1", ["sad", "happy", "sad"]),
    )
    return CorpusManifest(conversations=convs, label_set=two_labels, split="train")


@pytest.fixture()
def annotation() -> BehaviorAnnotation:
    return BehaviorAnnotation(
        utterance_id="c0_u0",
        facial_expression="a wide beaming smile",
        body_language="open lively gestures",
        posture="an upright springy stance",
        source_model="mock-mllm",
        created_at="2026-01-01T00:00:00Z",
    )


def annotation_for(utt_id: str, flavor: str = "smiling") -> BehaviorAnnotation:
    return BehaviorAnnotation(
        utterance_id=utt_id,
        facial_expression=f"{flavor} face",
        body_language=f"{flavor} gestures",
        posture=f"{flavor} stance",
        source_model="mock-mllm",
        created_at="2026-01-01T00:00:00Z",
    )


@pytest.fixture()
def filled_cache(tmp_path, small_corpus) -> BehaviorCache:
    cache = BehaviorCache(tmp_path / "behaviors.jsonl")
    for _, utt in small_corpus.iter_utterances():
        cache.put(annotation_for(utt.id))
    return cache


@pytest.fixture()
def placeholder_spec() -> PlaceholderSpec:
    return PlaceholderSpec(n_video_slots=2, n_audio_slots=1)


@pytest.fixture()
def emotion_template(placeholder_spec) -> StructuredTemplate:
    return StructuredTemplate(
        title="Emotion recognition.",
        context_header="Dialogue:",
        objective="Name the final speaker's emotion.",
        constraint="Answer with one label from: {labels}.",
        placeholder_spec=placeholder_spec,
        name="emotion-test",
    )


@pytest.fixture()
def behavior_template(placeholder_spec) -> StructuredTemplate:
    return StructuredTemplate(
        title="Behavior description.",
        context_header="Dialogue:",
        objective="Describe the final speaker's visible behavior.",
        constraint=(
            "Answer with three lines labeled 'Facial expression:', "
            "'Body language:', and 'Posture:'."
        ),
        placeholder_spec=placeholder_spec.with_counts(0, 0),
        name="behavior-test",
    )


@pytest.fixture(scope="session")
def session_lm() -> TinyDecoderLM:
    """Shared read-only model; tests that mutate parameters build their own."""
    return TinyDecoderLM(TinyDecoderConfig())


@pytest.fixture()
def lm() -> TinyDecoderLM:
    torch.manual_seed(0)
    return TinyDecoderLM(TinyDecoderConfig())


@pytest.fixture()
def adapters() -> tuple[FeatureAdapter, FeatureAdapter]:
    return FeatureAdapter(32, 64, seed=0), FeatureAdapter(32, 64, seed=1)


@pytest.fixture()
def pipeline() -> FeaturePipeline:
    return FeaturePipeline(
        ProjectionVideoEncoder(32),
        MomentAudioEncoder(32),
        FrameSampleSpec(n_frames=2),
        AudioFrameSpec(),
        default_audio_windows=1,
    )
