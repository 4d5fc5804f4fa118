"""Declarative run configuration: one YAML file describes a whole run.

Strings support ${VAR} environment interpolation so secrets stay out of the
file. Flag overrides from the command line are applied after parsing, and a
resolved snapshot (with template checksums and seeds) is written into every
run directory so runs can be re-executed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .behavior import HttpMllmClient, MllmClient
from .corpus import NAMED_LABEL_SETS, CorpusManifest, EmotionLabelSet
from .features import (
    AudioFrameSpec,
    FeatureAdapter,
    FeaturePipeline,
    FrameSampleSpec,
    MomentAudioEncoder,
    ProjectionVideoEncoder,
)
from .model import TinyDecoderConfig, TinyDecoderLM
from .prompting import (
    BehaviorFlags,
    PlaceholderSpec,
    StructuredTemplate,
    default_template_path,
    load_template,
    template_checksum,
)
from .synthetic import LabelOracleMllmClient, label_map
from .tuning import TrainingConfig


class ConfigFileError(ValueError):
    """Raised when the run configuration is invalid or incomplete."""


@dataclass(frozen=True)
class ClientSettings:
    kind: str = "label-oracle"
    endpoint: str = ""
    model: str = "label-oracle"
    auth_env: str = ""
    timeout_seconds: float = 30.0
    max_retries: int = 3
    generation_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("label-oracle", "http"):
            raise ConfigFileError(f"unknown client kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ConfigFileError("http client needs an endpoint")


@dataclass
class RunConfig:
    corpus_path: Path
    label_set: EmotionLabelSet
    output_dir: Path
    behavior_cache_path: Path
    behavior_template_path: Path
    emotion_template_path: Path
    client: ClientSettings = field(default_factory=ClientSettings)
    frame_spec: FrameSampleSpec = field(default_factory=FrameSampleSpec)
    audio_spec: AudioFrameSpec = field(default_factory=AudioFrameSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    behavior_flags: BehaviorFlags = field(default_factory=BehaviorFlags)
    model: TinyDecoderConfig = field(default_factory=TinyDecoderConfig)
    seed: int = 0
    split: str = "train"
    d_v: int = 32
    d_a: int = 32
    default_audio_windows: int = 2
    adapter_depth: int = 1
    failure_threshold: float = 0.05
    raw: dict = field(default_factory=dict)

    def placeholder_spec(self) -> PlaceholderSpec:
        return PlaceholderSpec(
            n_video_slots=self.frame_spec.n_frames,
            n_audio_slots=self.default_audio_windows,
        )

    def load_templates(self) -> tuple[StructuredTemplate, StructuredTemplate]:
        spec = self.placeholder_spec()
        behavior = load_template(
            self.behavior_template_path, placeholder_spec=spec.with_counts(0, 0),
            name="behavior",
        )
        emotion = load_template(
            self.emotion_template_path, placeholder_spec=spec, name="emotion"
        )
        return behavior, emotion

    def build_model(self) -> TinyDecoderLM:
        return TinyDecoderLM(self.model)

    def build_pipeline(self) -> FeaturePipeline:
        return FeaturePipeline(
            ProjectionVideoEncoder(self.d_v, seed=self.seed),
            MomentAudioEncoder(self.d_a, seed=self.seed),
            self.frame_spec,
            self.audio_spec,
            default_audio_windows=self.default_audio_windows,
        )

    def build_adapters(self) -> tuple[FeatureAdapter, FeatureAdapter]:
        dtype = self.model.torch_dtype
        video = FeatureAdapter(
            self.d_v, self.model.d_model, depth=self.adapter_depth,
            seed=self.seed, dtype=dtype,
        )
        audio = FeatureAdapter(
            self.d_a, self.model.d_model, depth=self.adapter_depth,
            seed=self.seed + 1, dtype=dtype,
        )
        return video, audio

    def build_client(self, corpus: CorpusManifest) -> MllmClient:
        if self.client.kind == "label-oracle":
            return LabelOracleMllmClient(labels_by_utterance=label_map(corpus))
        return HttpMllmClient(
            endpoint=self.client.endpoint,
            name=self.client.model,
            auth_env=self.client.auth_env or None,
            timeout_seconds=self.client.timeout_seconds,
        )


def _interpolate(value):
    if isinstance(value, str):
        return os.path.expandvars(value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _resolve_label_set(spec) -> EmotionLabelSet:
    if isinstance(spec, str):
        if spec not in NAMED_LABEL_SETS:
            raise ConfigFileError(
                f"unknown label set {spec!r}; known: {sorted(NAMED_LABEL_SETS)}"
            )
        return NAMED_LABEL_SETS[spec]
    if isinstance(spec, (list, tuple)):
        return EmotionLabelSet(tuple(str(s) for s in spec))
    raise ConfigFileError("labels must be a named set or a list of labels")


def _resolve_template_path(value, kind: str) -> Path:
    if value in (None, "default"):
        return default_template_path(kind)
    return Path(value)


def load_run_config(
    path: str | Path, overrides: dict | None = None
) -> RunConfig:
    """Parse and validate the YAML run file; overrides win over file values."""
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigFileError("config root must be a mapping")
    data = _interpolate(data)
    overrides = overrides or {}
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        corpus_path = resolve(data["corpus"])
    except KeyError:
        raise ConfigFileError("config needs a 'corpus' path") from None
    if not corpus_path.exists():
        raise ConfigFileError(f"corpus file not found: {corpus_path}")
    label_set = _resolve_label_set(data.get("labels", "iemocap"))
    templates = data.get("templates", {}) or {}
    behavior_tmpl = resolve(_resolve_template_path(templates.get("behavior"), "behavior"))
    emotion_tmpl = resolve(_resolve_template_path(templates.get("emotion"), "emotion"))
    for tmpl in (behavior_tmpl, emotion_tmpl):
        if not Path(tmpl).exists():
            raise ConfigFileError(f"template file not found: {tmpl}")
    features = data.get("features", {}) or {}
    frame_spec = FrameSampleSpec(
        n_frames=int(features.get("n_frames", 64)),
        height=int(features.get("height", 336)),
        width=int(features.get("width", 336)),
        rng_seed=int(features.get("frame_seed", data.get("seed", 0))),
    )
    audio_spec = AudioFrameSpec(
        stride_seconds=float(features.get("audio_stride_seconds", 2.0)),
    )
    training_data = data.get("training", {}) or {}
    training = TrainingConfig(
        learning_rate=float(training_data.get("learning_rate", 2e-4)),
        epochs=int(training_data.get("epochs", 1)),
        lambda_l2=float(training_data.get("lambda_l2", 1e-4)),
        batch_size=int(training_data.get("batch_size", 8)),
        seed=int(overrides.get("seed", data.get("seed", 0))),
        precision=str(training_data.get("precision", "mixed-train")),
        max_history_turns=int(training_data.get("max_history_turns", 10)),
        early_stop_accuracy=(
            float(training_data["early_stop_accuracy"])
            if training_data.get("early_stop_accuracy") is not None
            else None
        ),
        stage_a_epochs=(
            int(training_data["stage_a_epochs"])
            if training_data.get("stage_a_epochs") is not None
            else None
        ),
    )
    model_data = data.get("model", {}) or {}
    model_cfg = TinyDecoderConfig(
        d_model=int(model_data.get("d_model", 64)),
        n_layers=int(model_data.get("n_layers", 4)),
        n_heads=int(model_data.get("n_heads", 4)),
        d_ff=int(model_data.get("d_ff", 1536)),
        max_len=int(model_data.get("max_len", 1024)),
        lora_rank=int(model_data.get("lora_rank", 8)),
        lora_alpha=float(model_data.get("lora_alpha", 16.0)),
        seed=int(model_data.get("seed", data.get("seed", 0))),
        dtype="float64" if training.precision == "fp64-test" else "float32",
    )
    client_data = data.get("client", {}) or {}
    client = ClientSettings(
        kind=str(client_data.get("kind", "label-oracle")),
        endpoint=str(client_data.get("endpoint", "")),
        model=str(client_data.get("model", "label-oracle")),
        auth_env=str(client_data.get("auth_env", "")),
        timeout_seconds=float(client_data.get("timeout_seconds", 30.0)),
        max_retries=int(client_data.get("max_retries", 3)),
        generation_params=dict(client_data.get("generation_params", {}) or {}),
    )
    flags_spec = overrides.get("behaviors", data.get("behaviors", "facial,body,posture"))
    flags = (
        flags_spec
        if isinstance(flags_spec, BehaviorFlags)
        else BehaviorFlags.parse(str(flags_spec))
    )
    output_dir = resolve(overrides.get("output_dir", data.get("output_dir", "runs")))
    cache_path = resolve(
        overrides.get("behavior_cache", data.get("behavior_cache", "behaviors.jsonl"))
    )
    return RunConfig(
        corpus_path=corpus_path,
        label_set=label_set,
        output_dir=output_dir,
        behavior_cache_path=cache_path,
        behavior_template_path=Path(behavior_tmpl),
        emotion_template_path=Path(emotion_tmpl),
        client=client,
        frame_spec=frame_spec,
        audio_spec=audio_spec,
        training=training,
        behavior_flags=flags,
        model=model_cfg,
        seed=int(overrides.get("seed", data.get("seed", 0))),
        split=str(overrides.get("split", data.get("split", "train"))),
        d_v=int(features.get("d_v", 32)),
        d_a=int(features.get("d_a", 32)),
        default_audio_windows=int(features.get("default_audio_windows", 2)),
        adapter_depth=int(features.get("adapter_depth", 1)),
        failure_threshold=float(data.get("failure_threshold", 0.05)),
        raw=data,
    )


def write_run_snapshot(cfg: RunConfig, run_dir: str | Path) -> Path:
    """Record everything needed to re-execute the run."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "corpus": str(cfg.corpus_path),
        "labels": list(cfg.label_set.labels),
        "split": cfg.split,
        "seed": cfg.seed,
        "output_dir": str(cfg.output_dir),
        "behavior_cache": str(cfg.behavior_cache_path),
        "templates": {
            "behavior": {
                "path": str(cfg.behavior_template_path),
                "sha256": template_checksum(cfg.behavior_template_path),
            },
            "emotion": {
                "path": str(cfg.emotion_template_path),
                "sha256": template_checksum(cfg.emotion_template_path),
            },
        },
        "client": {k: v for k, v in asdict(cfg.client).items() if k != "generation_params"},
        "frame_spec": asdict(cfg.frame_spec),
        "audio_spec": asdict(cfg.audio_spec),
        "training": asdict(cfg.training),
        "model": asdict(cfg.model),
        "behavior_flags": asdict(cfg.behavior_flags),
        "features": {
            "d_v": cfg.d_v,
            "d_a": cfg.d_a,
            "default_audio_windows": cfg.default_audio_windows,
            "adapter_depth": cfg.adapter_depth,
        },
    }
    out = run_dir / "config_snapshot.json"
    out.write_text(json.dumps(snapshot, indent=2, sort_keys=True))
    return out
