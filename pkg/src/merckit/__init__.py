"""Multimodal emotion recognition in conversation: behavior-description
generation, two-stage instruction tuning, and evaluation."""

from .behavior import (
    AnnotationRunSummary,
    BehaviorAnnotation,
    BehaviorCache,
    BehaviorParseError,
    HttpMllmClient,
    MllmClient,
    MllmRequest,
    TransportError,
    annotate_corpus,
    generate_behavior,
    parse_behavior_response,
)
from .corpus import (
    Conversation,
    CorpusManifest,
    EmotionLabelSet,
    IEMOCAP_LABELS,
    MELD_LABELS,
    ManifestError,
    Utterance,
    history_window,
    load_manifest,
    save_manifest,
)
from .evaluation import (
    AblationConfig,
    ClassMetrics,
    LabelDistribution,
    MetricsReport,
    ZeroShotResult,
    canonical_ablation_configs,
    distribution_delta,
    label_distribution,
    paired_ttest,
    parse_label_response,
    pca_project,
    per_class_metrics,
    run_ablation_suite,
    zero_shot_eval,
)
from .features import (
    AudioFrameSpec,
    FeatureAdapter,
    FeaturePipeline,
    FrameSampleSpec,
    ModalityFeatures,
    adapt,
    encode_audio,
    encode_video,
    sample_frame_indices,
    segment_audio,
)
from .model import ByteTokenizer, LanguageModel, TinyDecoderConfig, TinyDecoderLM
from .prompting import (
    BehaviorFlags,
    PlaceholderSpec,
    PromptInstance,
    StructuredTemplate,
    build_alignment_prompt,
    build_behavior_prompt,
    build_merc_prompt,
    count_placeholders,
    load_template,
)
from .tuning import (
    AssembledSequence,
    Prediction,
    TrainingConfig,
    assemble_multimodal_sequence,
    compute_loss,
    predict,
    stage_a_train,
    stage_b_train,
)

__version__ = "0.1.0"
