"""Two-stage instruction tuning over multimodal prompt sequences.

Stage A teaches the model to emit behavior descriptions from text plus
modality features (alignment). Stage B trains emotion classification over
the assembled multimodal prompt with a cross-entropy-plus-L2 objective.
Only low-rank model deltas and the modality adapters ever receive
gradients; base weights stay frozen.
"""

from __future__ import annotations

import json
import logging
import os
import random
import shutil
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .behavior import BehaviorCache
from .corpus import CorpusManifest, EmotionLabelSet, Utterance, history_window
from .features import FeatureAdapter, FeaturePipeline, ModalityFeatures
from .model import LanguageModel
from .prompting import (
    BehaviorFlags,
    PromptInstance,
    StructuredTemplate,
    build_alignment_prompt,
    build_merc_prompt,
)

logger = logging.getLogger(__name__)

EPSILON = 1e-12

PRECISION_MODES = ("fp64-test", "mixed-train")


class ConfigError(ValueError):
    """Raised when a training run cannot start from the given inputs."""


class AssemblyError(ValueError):
    """Raised when placeholder counts and feature rows disagree."""


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 2e-4
    epochs: int = 1
    lambda_l2: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    precision: str = "mixed-train"
    max_history_turns: int = 10
    early_stop_accuracy: float | None = None
    stage_a_epochs: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in PRECISION_MODES:
            raise ValueError(f"precision must be one of {PRECISION_MODES}")
        if self.stage_a_epochs is not None and self.stage_a_epochs < 0:
            raise ValueError("stage_a_epochs must be >= 0")

    @property
    def effective_stage_a_epochs(self) -> int:
        return self.epochs if self.stage_a_epochs is None else self.stage_a_epochs


@dataclass(frozen=True)
class Prediction:
    utterance_id: str
    predicted_label: str
    label_distribution: tuple[float, ...]
    embedding: tuple[float, ...]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        total = sum(self.label_distribution)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"label distribution sums to {total}, expected 1")
        top = max(
            range(len(self.label_distribution)),
            key=self.label_distribution.__getitem__,
        )
        if self.labels[top] != self.predicted_label:
            raise ValueError("predicted_label must be the distribution argmax")


@dataclass
class AssembledSequence:
    embeddings: torch.Tensor
    residual_ids: tuple[int, ...]
    n_video: int
    n_audio: int

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def remaining_placeholders(self, lm: LanguageModel) -> int:
        special = lm.tokenizer.special_ids
        return sum(1 for t in self.residual_ids if t in special)


def assemble_multimodal_sequence(
    p: PromptInstance, lm: LanguageModel, feats: ModalityFeatures
) -> AssembledSequence:
    """Replace each placeholder token's embedding with one adapted feature row.

    Output length = text tokens - placeholders + feature rows; rows swap in
    one-for-one, so a count mismatch is an error rather than a truncation.
    """
    ids = lm.tokenize(p.text)
    vid_id = lm.tokenizer.special_id(p.placeholder_spec.video_token)
    aud_id = lm.tokenizer.special_id(p.placeholder_spec.audio_token)
    video_pos = [i for i, t in enumerate(ids) if t == vid_id]
    audio_pos = [i for i, t in enumerate(ids) if t == aud_id]
    n_video = feats.adapted_video.shape[0]
    n_audio = feats.adapted_audio.shape[0]
    if len(video_pos) != n_video:
        raise AssemblyError(
            f"expected {len(video_pos)} video feature rows, got {n_video}"
        )
    if len(audio_pos) != n_audio:
        raise AssemblyError(
            f"expected {len(audio_pos)} audio feature rows, got {n_audio}"
        )
    if video_pos or audio_pos:
        width = feats.adapted_video.shape[1] if video_pos else feats.adapted_audio.shape[1]
        if width != lm.d_model:
            raise AssemblyError(f"adapted width {width} != d_model {lm.d_model}")
    emb = lm.embed(ids).clone()
    if video_pos:
        emb[video_pos] = feats.adapted_video.to(emb.dtype)
    if audio_pos:
        emb[audio_pos] = feats.adapted_audio.to(emb.dtype)
    residual = tuple(
        -1 if (t == vid_id or t == aud_id) else t for t in ids
    )
    return AssembledSequence(
        embeddings=emb, residual_ids=residual, n_video=n_video, n_audio=n_audio
    )


def compute_loss(predictions, targets, w, lambda_l2: float) -> torch.Tensor:
    """Summed cross entropy over the batch plus lambda * ||W||^2.

    predictions: [N, K] rows of valid distributions; targets: [N, K] one-hot.
    Probabilities below EPSILON at a true class are clamped (with a warning)
    so the loss stays finite. w may be None, a tensor, or an iterable of
    tensors; its squared L2 norm is summed across all of them.
    """
    pred = predictions if torch.is_tensor(predictions) else torch.as_tensor(
        predictions, dtype=torch.float64
    )
    tgt = targets if torch.is_tensor(targets) else torch.as_tensor(
        targets, dtype=pred.dtype
    )
    if pred.shape != tgt.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: predictions {tuple(pred.shape)} vs targets {tuple(tgt.shape)}")
    if lambda_l2 < 0:
        raise ValueError("lambda_l2 must be >= 0")
    with torch.no_grad():
        if (pred < -1e-9).any():
            raise ValueError("predictions must be non-negative")
        row_sums = pred.sum(dim=1)
        if (row_sums - 1.0).abs().max() > 1e-6:
            raise ValueError("each prediction row must sum to 1")
        if ((pred < EPSILON) & (tgt > 0)).any():
            warnings.warn(
                "probability at a true class clamped to 1e-12", RuntimeWarning
            )
    ce = -(tgt * torch.log(pred.clamp_min(EPSILON))).sum()
    if w is None:
        reg = torch.zeros((), dtype=ce.dtype)
    else:
        params = [w] if torch.is_tensor(w) else list(w)
        if params:
            reg = sum((p.to(ce.dtype) ** 2).sum() for p in params)
        else:
            reg = torch.zeros((), dtype=ce.dtype)
    return ce + lambda_l2 * reg


@dataclass
class CompiledExample:
    """Pre-tokenized training/eval unit so epochs skip string work."""

    utterance_id: str
    prompt_text: str
    ids: tuple[int, ...]
    video_positions: tuple[int, ...]
    audio_positions: tuple[int, ...]
    video_raw: np.ndarray
    audio_raw: np.ndarray
    label: str | None = None
    target_ids: tuple[int, ...] = ()


def _compile_instance(
    lm: LanguageModel, p: PromptInstance, video_raw: np.ndarray, audio_raw: np.ndarray
) -> CompiledExample:
    ids = lm.tokenize(p.text)
    vid_id = lm.tokenizer.special_id(p.placeholder_spec.video_token)
    aud_id = lm.tokenizer.special_id(p.placeholder_spec.audio_token)
    video_pos = tuple(i for i, t in enumerate(ids) if t == vid_id)
    audio_pos = tuple(i for i, t in enumerate(ids) if t == aud_id)
    if len(video_pos) != video_raw.shape[0]:
        raise AssemblyError(
            f"expected {len(video_pos)} video feature rows, got {video_raw.shape[0]}"
        )
    if len(audio_pos) != audio_raw.shape[0]:
        raise AssemblyError(
            f"expected {len(audio_pos)} audio feature rows, got {audio_raw.shape[0]}"
        )
    return CompiledExample(
        utterance_id=p.utterance_id or "",
        prompt_text=p.text,
        ids=tuple(ids),
        video_positions=video_pos,
        audio_positions=audio_pos,
        video_raw=video_raw,
        audio_raw=audio_raw,
        label=p.target_label,
    )


def compile_alignment_examples(
    corpus: CorpusManifest,
    cache: BehaviorCache,
    template: StructuredTemplate,
    lm: LanguageModel,
    pipeline: FeaturePipeline,
    flags: BehaviorFlags,
    source_model: str | None = None,
    max_history_turns: int = 10,
) -> tuple[list[CompiledExample], int]:
    """Stage-A examples; utterances without annotations are skipped with a log line."""
    examples: list[CompiledExample] = []
    excluded = 0
    for conv in corpus.conversations:
        for utt in conv.utterances:
            annotation = cache.get(utt.id, source_model)
            if annotation is None:
                logger.info(
                    "excluding %s from alignment training: no behavior annotation",
                    utt.id,
                )
                excluded += 1
                continue
            spec = pipeline.resolve_placeholder_spec(template.placeholder_spec, utt)
            history = history_window(conv, utt.index_in_conversation, max_history_turns)
            p = build_alignment_prompt(
                template, utt, history, annotation, flags, placeholder_spec=spec
            )
            video_raw, audio_raw = pipeline.raw_features(utt)
            ex = _compile_instance(lm, p, video_raw, audio_raw)
            ex.target_ids = tuple(lm.tokenize(p.target_text) + [lm.tokenizer.EOS])
            examples.append(ex)
    return examples, excluded


def compile_merc_examples(
    corpus: CorpusManifest,
    template: StructuredTemplate,
    lm: LanguageModel,
    pipeline: FeaturePipeline,
    label_set: EmotionLabelSet,
    flags: BehaviorFlags,
    cache: BehaviorCache | None = None,
    source_model: str | None = None,
    max_history_turns: int = 10,
) -> tuple[list[CompiledExample], int]:
    """Stage-B / eval examples; behavior lines included iff flags request them."""
    examples: list[CompiledExample] = []
    excluded = 0
    for conv in corpus.conversations:
        for utt in conv.utterances:
            annotation = None
            if flags.any():
                annotation = cache.get(utt.id, source_model) if cache else None
                if annotation is None:
                    logger.info(
                        "excluding %s from emotion tuning: no behavior annotation",
                        utt.id,
                    )
                    excluded += 1
                    continue
            spec = pipeline.resolve_placeholder_spec(template.placeholder_spec, utt)
            history = history_window(conv, utt.index_in_conversation, max_history_turns)
            p = build_merc_prompt(
                template,
                utt,
                history,
                label_set,
                annotation,
                flags,
                placeholder_spec=spec,
            )
            video_raw, audio_raw = pipeline.raw_features(utt)
            examples.append(_compile_instance(lm, p, video_raw, audio_raw))
    return examples, excluded


def _assemble_example(
    lm: LanguageModel,
    ex: CompiledExample,
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
) -> torch.Tensor:
    dtype = next(video_adapter.parameters()).dtype
    emb = lm.embed(ex.ids).clone()
    if ex.video_positions:
        v = torch.as_tensor(ex.video_raw, dtype=dtype)
        emb[list(ex.video_positions)] = video_adapter(v).to(emb.dtype)
    if ex.audio_positions:
        a = torch.as_tensor(ex.audio_raw, dtype=dtype)
        emb[list(ex.audio_positions)] = audio_adapter(a).to(emb.dtype)
    return emb


def _pad_stack(rows: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    max_len = max(r.shape[0] for r in rows)
    d = rows[0].shape[1]
    batch = torch.zeros(len(rows), max_len, d, dtype=rows[0].dtype)
    pad_mask = torch.ones(len(rows), max_len, dtype=torch.bool)
    for i, r in enumerate(rows):
        batch[i, : r.shape[0]] = r
        pad_mask[i, : r.shape[0]] = False
    return batch, pad_mask


def label_token_ids(lm: LanguageModel, label_set: EmotionLabelSet) -> list[list[int]]:
    """Token id sequence per label, EOS-terminated for a proper stop."""
    return [lm.tokenize(label) + [lm.tokenizer.EOS] for label in label_set.labels]


def _label_scores_dense(
    lm: LanguageModel,
    prompts: list[torch.Tensor],
    label_ids: list[list[int]],
) -> torch.Tensor:
    """Reference route: one full forward per (prompt, label) pair.

    Works against the bare LanguageModel protocol; the cached route below
    must agree with this to float tolerance.
    """
    rows: list[torch.Tensor] = []
    anchors: list[tuple[int, list[int]]] = []
    for emb in prompts:
        for ids in label_ids:
            rows.append(torch.cat([emb, lm.embed(ids).to(emb.dtype)], dim=0))
            anchors.append((emb.shape[0], ids))
    batch, pad_mask = _pad_stack(rows)
    logits = lm.forward_embeddings(batch, pad_mask)
    logp = torch.log_softmax(logits, dim=-1)
    scores = []
    for r, (plen, ids) in enumerate(anchors):
        pos = torch.arange(plen - 1, plen - 1 + len(ids))
        tok = torch.tensor(ids, dtype=torch.long)
        scores.append(logp[r, pos, tok].sum())
    return torch.stack(scores).view(len(prompts), len(label_ids))


def _has_prefix_cache(lm) -> bool:
    return (
        hasattr(lm, "prefix_states")
        and hasattr(lm, "extend_states")
        and hasattr(lm, "project_vocab")
    )


def _scores_and_hidden_cached(
    lm,
    prompts: list[torch.Tensor],
    label_ids: list[list[int]],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cached route: forward each prompt once, score label tails off the cache.

    Returns ([B, K] label scores, [B, d] final-prompt-position hidden states).
    Label continuations are short, so reusing the prompt's attention K/V cuts
    the dominant cost by the label-set size.
    """
    batch, pad_mask = _pad_stack(prompts)
    lengths = torch.tensor([p.shape[0] for p in prompts], dtype=torch.long)
    hidden, caches = lm.prefix_states(batch, pad_mask)
    final_hidden = hidden[torch.arange(len(prompts)), lengths - 1]
    first_logp = torch.log_softmax(lm.project_vocab(final_hidden), dim=-1)
    scores = []
    for ids in label_ids:
        s = first_logp[:, ids[0]]
        if len(ids) > 1:
            tail_in = lm.embed(ids[:-1]).to(batch.dtype)
            tail = tail_in.unsqueeze(0).expand(len(prompts), -1, -1)
            h_tail = lm.extend_states(tail, caches, lengths, pad_mask)
            logp = torch.log_softmax(lm.project_vocab(h_tail), dim=-1)
            tok = torch.tensor(ids[1:], dtype=torch.long)
            s = s + logp[:, torch.arange(len(ids) - 1), tok].sum(dim=-1)
        scores.append(s)
    return torch.stack(scores, dim=1), final_hidden


def _label_scores(
    lm: LanguageModel,
    prompts: list[torch.Tensor],
    label_ids: list[list[int]],
) -> torch.Tensor:
    """Log-probability of each label continuation after each prompt: [B, K]."""
    if _has_prefix_cache(lm):
        return _scores_and_hidden_cached(lm, prompts, label_ids)[0]
    return _label_scores_dense(lm, prompts, label_ids)


def predict(
    lm: LanguageModel,
    p: PromptInstance,
    feats: ModalityFeatures,
    label_set: EmotionLabelSet,
) -> Prediction:
    """Constrained decoding: renormalize label-sequence log-probs over the set.

    The returned embedding is the final prompt position's hidden state, the
    representation feeding the label decision.
    """
    seq = assemble_multimodal_sequence(p, lm, feats)
    with torch.no_grad():
        label_ids = label_token_ids(lm, label_set)
        if _has_prefix_cache(lm):
            scores, final_hidden = _scores_and_hidden_cached(
                lm, [seq.embeddings], label_ids
            )
            hidden = final_hidden[0]
        else:
            scores = _label_scores_dense(lm, [seq.embeddings], label_ids)
            hidden = lm.hidden_states(seq.embeddings)[-1]
        dist = torch.softmax(scores[0], dim=-1)
    dist_t = tuple(float(x) for x in dist)
    top = int(torch.argmax(dist).item())
    return Prediction(
        utterance_id=p.utterance_id or "",
        predicted_label=label_set.labels[top],
        label_distribution=dist_t,
        embedding=tuple(float(x) for x in hidden),
        labels=label_set.labels,
    )


class RunLog:
    """Append-only JSONL step log: {step, loss, lr, split}."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, step: int, loss: float, lr: float, split: str) -> None:
        record = {"step": step, "loss": loss, "lr": lr, "split": split}
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class StageResult:
    stage: str
    run_log: RunLog
    initial_loss: float
    final_loss: float
    n_steps: int
    n_examples: int
    n_excluded: int
    checkpoints: list[Path] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float | None:
        if self.epoch_metrics and "train_accuracy" in self.epoch_metrics[-1]:
            return self.epoch_metrics[-1]["train_accuracy"]
        return None


def _trainable(
    lm: LanguageModel, video_adapter: FeatureAdapter, audio_adapter: FeatureAdapter
) -> list[torch.nn.Parameter]:
    return (
        list(lm.trainable_parameters())
        + list(video_adapter.parameters())
        + list(audio_adapter.parameters())
    )


def save_checkpoint(
    run_dir: str | Path,
    stage: str,
    epoch: int,
    lm,
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
    config_snapshot: dict,
    metrics: dict,
) -> Path:
    """Write trainable state + config + metrics, atomically via temp-then-rename."""
    final = Path(run_dir) / f"stage_{stage}" / f"epoch_{epoch}"
    tmp = final.with_name(final.name + f".tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    blob = {
        "lm": {
            name: param.detach().clone()
            for name, param in lm.named_parameters()
            if param.requires_grad
        },
        "video_adapter": video_adapter.state_dict(),
        "audio_adapter": audio_adapter.state_dict(),
    }
    torch.save(blob, tmp / "trainable.pt")
    (tmp / "config.json").write_text(json.dumps(config_snapshot, indent=2, sort_keys=True))
    (tmp / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def load_checkpoint(
    path: str | Path, lm, video_adapter: FeatureAdapter, audio_adapter: FeatureAdapter
) -> dict:
    """Restore trainable state in place; returns the stored metrics."""
    path = Path(path)
    blob = torch.load(path / "trainable.pt", weights_only=True)
    named = dict(lm.named_parameters())
    for name, tensor in blob["lm"].items():
        if name not in named:
            raise ConfigError(f"checkpoint parameter {name!r} not found in model")
        with torch.no_grad():
            named[name].copy_(tensor)
    video_adapter.load_state_dict(blob["video_adapter"])
    audio_adapter.load_state_dict(blob["audio_adapter"])
    metrics_path = path / "metrics.json"
    return json.loads(metrics_path.read_text()) if metrics_path.exists() else {}


def latest_checkpoint(run_dir: str | Path, stage: str) -> Path | None:
    stage_dir = Path(run_dir) / f"stage_{stage}"
    if not stage_dir.exists():
        return None
    epochs = sorted(
        (p for p in stage_dir.iterdir() if p.is_dir() and p.name.startswith("epoch_")),
        key=lambda p: int(p.name.split("_")[1]),
    )
    return epochs[-1] if epochs else None


def _alignment_batch_loss(
    lm: LanguageModel,
    batch: list[CompiledExample],
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
) -> torch.Tensor:
    """Mean next-token loss over target positions only."""
    rows = []
    anchors = []
    for ex in batch:
        prompt = _assemble_example(lm, ex, video_adapter, audio_adapter)
        target = lm.embed(ex.target_ids).to(prompt.dtype)
        rows.append(torch.cat([prompt, target], dim=0))
        anchors.append((prompt.shape[0], ex.target_ids))
    stacked, pad_mask = _pad_stack(rows)
    logits = lm.forward_embeddings(stacked, pad_mask)
    logp = torch.log_softmax(logits, dim=-1)
    pieces = []
    count = 0
    for r, (plen, ids) in enumerate(anchors):
        pos = torch.arange(plen - 1, plen - 1 + len(ids))
        tok = torch.tensor(ids, dtype=torch.long)
        pieces.append(logp[r, pos, tok].sum())
        count += len(ids)
    return -torch.stack(pieces).sum() / count


def stage_a_train(
    corpus: CorpusManifest,
    cache: BehaviorCache,
    template: StructuredTemplate,
    lm,
    cfg: TrainingConfig,
    *,
    pipeline: FeaturePipeline,
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
    flags: BehaviorFlags | None = None,
    run_dir: str | Path | None = None,
    source_model: str | None = None,
) -> StageResult:
    """Behavior alignment: next-token loss on the behavior description target."""
    flags = flags if flags is not None else BehaviorFlags()
    examples, excluded = compile_alignment_examples(
        corpus,
        cache,
        template,
        lm,
        pipeline,
        flags,
        source_model=source_model,
        max_history_turns=cfg.max_history_turns,
    )
    if not examples:
        raise ConfigError(
            "no training utterances have behavior annotations; "
            "run behavior generation first"
        )
    torch.manual_seed(cfg.seed)
    run_log = RunLog(Path(run_dir) / "stage_a" / "run_log.jsonl" if run_dir else None)
    params = _trainable(lm, video_adapter, audio_adapter)
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    def dataset_loss() -> float:
        with torch.no_grad():
            losses = []
            for start in range(0, len(examples), cfg.batch_size):
                chunk = examples[start : start + cfg.batch_size]
                loss = _alignment_batch_loss(lm, chunk, video_adapter, audio_adapter)
                losses.append(float(loss) * sum(len(e.target_ids) for e in chunk))
            n_tokens = sum(len(e.target_ids) for e in examples)
            return sum(losses) / n_tokens

    initial_loss = dataset_loss()
    result = StageResult(
        stage="a",
        run_log=run_log,
        initial_loss=initial_loss,
        final_loss=initial_loss,
        n_steps=0,
        n_examples=len(examples),
        n_excluded=excluded,
    )
    snapshot = {"stage": "a", "training": asdict(cfg), "flags": asdict(flags)}
    step = 0
    order = list(range(len(examples)))
    for epoch in range(1, cfg.epochs + 1):
        random.Random(cfg.seed * 1000 + epoch).shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = _alignment_batch_loss(lm, batch, video_adapter, audio_adapter)
            loss.backward()
            optimizer.step()
            step += 1
            step_loss = float(loss.detach())
            epoch_losses.append(step_loss)
            run_log.log(step, step_loss, cfg.learning_rate, "train")
        metrics = {
            "epoch": epoch,
            "mean_step_loss": sum(epoch_losses) / len(epoch_losses),
        }
        result.epoch_metrics.append(metrics)
        if run_dir is not None:
            result.checkpoints.append(
                save_checkpoint(
                    run_dir, "a", epoch, lm, video_adapter, audio_adapter,
                    snapshot, metrics,
                )
            )
    result.n_steps = step
    result.final_loss = dataset_loss()
    return result


def _merc_batch(
    lm: LanguageModel,
    batch: list[CompiledExample],
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
    label_ids: list[list[int]],
) -> torch.Tensor:
    prompts = [
        _assemble_example(lm, ex, video_adapter, audio_adapter) for ex in batch
    ]
    scores = _label_scores(lm, prompts, label_ids)
    return torch.softmax(scores, dim=-1)


def stage_b_train(
    corpus: CorpusManifest,
    features: FeaturePipeline,
    template: StructuredTemplate,
    lm,
    cfg: TrainingConfig,
    *,
    label_set: EmotionLabelSet,
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
    flags: BehaviorFlags | None = None,
    cache: BehaviorCache | None = None,
    run_dir: str | Path | None = None,
    source_model: str | None = None,
) -> StageResult:
    """Emotion tuning: summed cross entropy plus L2 over the trainable subset.

    Baseline mode is simply flags=none with no cache: the prompts carry no
    behavior text, everything else is identical.
    """
    flags = flags if flags is not None else BehaviorFlags()
    if flags.any() and cache is None:
        raise ConfigError("behavior flags are set but no behavior cache was given")
    examples, excluded = compile_merc_examples(
        corpus,
        template,
        lm,
        features,
        label_set,
        flags,
        cache=cache,
        source_model=source_model,
        max_history_turns=cfg.max_history_turns,
    )
    if not examples:
        raise ConfigError("emotion tuning has an empty effective training set")
    for ex in examples:
        if ex.label is None:
            raise ConfigError(f"utterance {ex.utterance_id!r} has no gold label")
    torch.manual_seed(cfg.seed)
    run_log = RunLog(Path(run_dir) / "stage_b" / "run_log.jsonl" if run_dir else None)
    params = _trainable(lm, video_adapter, audio_adapter)
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    label_ids = label_token_ids(lm, label_set)
    label_index = {label: i for i, label in enumerate(label_set.labels)}
    k = label_set.k

    def one_hot(batch: list[CompiledExample], dtype: torch.dtype) -> torch.Tensor:
        y = torch.zeros(len(batch), k, dtype=dtype)
        for i, ex in enumerate(batch):
            y[i, label_index[ex.label]] = 1.0
        return y

    def dataset_loss() -> float:
        with torch.no_grad():
            total = 0.0
            for start in range(0, len(examples), cfg.batch_size):
                chunk = examples[start : start + cfg.batch_size]
                dist = _merc_batch(lm, chunk, video_adapter, audio_adapter, label_ids)
                loss = compute_loss(dist, one_hot(chunk, dist.dtype), None, 0.0)
                total += float(loss)
            return total / len(examples)

    initial_loss = dataset_loss()
    result = StageResult(
        stage="b",
        run_log=run_log,
        initial_loss=initial_loss,
        final_loss=initial_loss,
        n_steps=0,
        n_examples=len(examples),
        n_excluded=excluded,
    )
    snapshot = {
        "stage": "b",
        "training": asdict(cfg),
        "flags": asdict(flags),
        "labels": list(label_set.labels),
    }
    step = 0
    order = list(range(len(examples)))
    for epoch in range(1, cfg.epochs + 1):
        random.Random(cfg.seed * 1000 + epoch).shuffle(order)
        epoch_losses = []
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            optimizer.zero_grad()
            dist = _merc_batch(lm, batch, video_adapter, audio_adapter, label_ids)
            y = one_hot(batch, dist.dtype)
            loss = compute_loss(dist, y, params, cfg.lambda_l2)
            loss.backward()
            optimizer.step()
            step += 1
            step_loss = float(loss.detach())
            epoch_losses.append(step_loss)
            run_log.log(step, step_loss, cfg.learning_rate, "train")
            with torch.no_grad():
                correct += int((dist.argmax(dim=1) == y.argmax(dim=1)).sum())
        metrics = {
            "epoch": epoch,
            "mean_step_loss": sum(epoch_losses) / len(epoch_losses),
            "train_accuracy": correct / len(examples),
        }
        result.epoch_metrics.append(metrics)
        if run_dir is not None:
            result.checkpoints.append(
                save_checkpoint(
                    run_dir, "b", epoch, lm, video_adapter, audio_adapter,
                    snapshot, metrics,
                )
            )
        if (
            cfg.early_stop_accuracy is not None
            and metrics["train_accuracy"] >= cfg.early_stop_accuracy
        ):
            break
    result.n_steps = step
    result.final_loss = dataset_loss()
    return result


def predict_examples(
    lm,
    examples: list[CompiledExample],
    video_adapter: FeatureAdapter,
    audio_adapter: FeatureAdapter,
    label_set: EmotionLabelSet,
    batch_size: int = 8,
) -> list[Prediction]:
    """Batch constrained decoding over compiled examples (eval mode)."""
    label_ids = label_token_ids(lm, label_set)
    out: list[Prediction] = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            prompts = [
                _assemble_example(lm, ex, video_adapter, audio_adapter) for ex in chunk
            ]
            if _has_prefix_cache(lm):
                scores, final_hidden = _scores_and_hidden_cached(lm, prompts, label_ids)
            else:
                scores = _label_scores_dense(lm, prompts, label_ids)
                stacked, pad_mask = _pad_stack(prompts)
                hidden = lm.hidden_states(stacked, pad_mask)
                rows = torch.arange(len(prompts))
                finals = torch.tensor([p.shape[0] - 1 for p in prompts])
                final_hidden = hidden[rows, finals]
            dists = torch.softmax(scores, dim=-1)
            for i, ex in enumerate(chunk):
                dist_t = tuple(float(x) for x in dists[i])
                top = int(dists[i].argmax().item())
                out.append(
                    Prediction(
                        utterance_id=ex.utterance_id,
                        predicted_label=label_set.labels[top],
                        label_distribution=dist_t,
                        embedding=tuple(float(x) for x in final_hidden[i]),
                        labels=label_set.labels,
                    )
                )
    return out
