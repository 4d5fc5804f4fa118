"""Command-line interface: behavior generation, training, and evaluation."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click

from .behavior import BehaviorCache, annotate_corpus
from .config import ConfigFileError, RunConfig, load_run_config, write_run_snapshot
from .corpus import CorpusManifest, ManifestError, load_manifest
from .evaluation import (
    AblationConfig,
    MetricsReport,
    canonical_ablation_configs,
    label_distribution,
    pca_project,
    per_class_metrics,
    plot_label_distributions,
    plot_pca_scatter,
    run_ablation_suite,
    write_ablation_csv,
    write_predictions,
    write_report_csv,
    write_report_json,
    zero_shot_eval,
)
from .prompting import BehaviorFlags
from .synthetic import write_fixture_corpus
from .tuning import (
    ConfigError,
    TrainingConfig,
    compile_merc_examples,
    latest_checkpoint,
    load_checkpoint,
    predict_examples,
    stage_a_train,
    stage_b_train,
)

# fixture hyperparameters are tuned so stage A + stage B finish in a couple
# of minutes on one CPU core while still overfitting the twin-pair corpus
FIXTURE_CONFIG = """\
corpus: corpus.jsonl
labels: [happy, sad]
split: train
seed: 0
output_dir: runs/demo
behavior_cache: behaviors.jsonl
client:
  kind: label-oracle
templates:
  behavior: behavior.tmpl
  emotion: emotion.tmpl
features:
  n_frames: 2
  d_v: 32
  d_a: 32
  default_audio_windows: 1
training:
  learning_rate: 0.01
  epochs: 20
  stage_a_epochs: 2
  lambda_l2: 0.0001
  batch_size: 8
  max_history_turns: 1
  early_stop_accuracy: 0.98
behaviors: facial,body,posture
"""

# compact prompt scaffolding: every token here lands in every training
# sequence, so the fixture trades the richer packaged wording for speed
FIXTURE_BEHAVIOR_TEMPLATE = """\
[title]
Behavior description.
[context]
Dialogue:
[objective]
Describe the final speaker's visible behavior.
[constraint]
Answer with three lines labeled 'Facial expression:', 'Body language:', and 'Posture:'.
"""

FIXTURE_EMOTION_TEMPLATE = """\
[title]
Emotion recognition.
[context]
Dialogue:
[objective]
Name the final speaker's emotion.
[constraint]
Answer with one label from: {labels}.
"""


@click.group()
def main() -> None:
    """Multimodal emotion recognition pipeline: behavior descriptions,
    two-stage tuning, and evaluation."""


def _load_cfg(config_path: str, **overrides) -> RunConfig:
    filtered = {k: v for k, v in overrides.items() if v is not None}
    try:
        return load_run_config(config_path, filtered)
    except ConfigFileError as exc:
        raise click.ClickException(str(exc)) from exc


def _load_corpus(cfg: RunConfig) -> CorpusManifest:
    try:
        return load_manifest(cfg.corpus_path, cfg.label_set, split=cfg.split)
    except ManifestError as exc:
        raise click.ClickException(str(exc)) from exc


def _flags(cfg: RunConfig, baseline: bool) -> BehaviorFlags:
    return BehaviorFlags.none() if baseline else cfg.behavior_flags


@main.command("make-fixture")
@click.option("--output", "output", type=click.Path(), default="fixture",
              help="Directory for the synthetic corpus and ready-to-run config.")
@click.option("--conversations", type=int, default=32, show_default=True)
@click.option("--utterances", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=13, show_default=True)
def cmd_make_fixture(output: str, conversations: int, utterances: int, seed: int) -> None:
    """Write a synthetic twin-pair corpus plus a desk-scale config file."""
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.jsonl"
    corpus = write_fixture_corpus(
        corpus_path,
        n_conversations=conversations,
        utterances_per_conversation=utterances,
        seed=seed,
    )
    config_path = out / "config.yaml"
    config_path.write_text(FIXTURE_CONFIG)
    (out / "behavior.tmpl").write_text(FIXTURE_BEHAVIOR_TEMPLATE)
    (out / "emotion.tmpl").write_text(FIXTURE_EMOTION_TEMPLATE)
    n_utts = sum(len(c.utterances) for c in corpus.conversations)
    click.echo(
        f"wrote {corpus_path} ({corpus.n_conversations} conversations, "
        f"{n_utts} utterances), {config_path}, and compact prompt templates"
    )


@main.command("generate-behaviors")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--max-concurrency", type=int, default=1, show_default=True)
def cmd_generate_behaviors(
    config_path: str, seed: int | None, output_dir: str | None, max_concurrency: int
) -> None:
    """Populate the behavior description cache for the configured split."""
    cfg = _load_cfg(config_path, seed=seed, output_dir=output_dir)
    corpus = _load_corpus(cfg)
    behavior_tmpl, _ = cfg.load_templates()
    cfg.behavior_cache_path.parent.mkdir(parents=True, exist_ok=True)
    cache = BehaviorCache(cfg.behavior_cache_path)
    client = cfg.build_client(corpus)
    summary = annotate_corpus(
        client,
        corpus,
        behavior_tmpl,
        cache,
        generation_params=cfg.client.generation_params,
        max_retries=cfg.client.max_retries,
        max_history_turns=cfg.training.max_history_turns,
        max_concurrency=max_concurrency,
    )
    write_run_snapshot(cfg, cfg.output_dir)
    click.echo(
        f"coverage: {summary.annotated}/{summary.total} ({summary.coverage:.1%}), "
        f"failed {summary.failed}, skipped {summary.skipped} (already cached)"
    )
    if summary.failure_rate > cfg.failure_threshold:
        raise click.ClickException(
            f"failure rate {summary.failure_rate:.1%} exceeds the "
            f"{cfg.failure_threshold:.1%} threshold"
        )


def _train(
    cfg: RunConfig,
    corpus: CorpusManifest,
    stage: str,
    baseline: bool,
    run_dir: Path,
) -> tuple:
    """Shared train driver returning (lm, video_adapter, audio_adapter)."""
    lm = cfg.build_model()
    video_adapter, audio_adapter = cfg.build_adapters()
    pipeline = cfg.build_pipeline()
    behavior_tmpl, emotion_tmpl = cfg.load_templates()
    flags = _flags(cfg, baseline)
    need_cache = flags.any() and (stage in ("align", "both") or stage == "merc")
    cache = None
    if need_cache:
        if not cfg.behavior_cache_path.exists():
            raise click.ClickException(
                f"behavior cache not found at {cfg.behavior_cache_path}; "
                f"run 'merckit generate-behaviors --config <file>' first"
            )
        cache = BehaviorCache(cfg.behavior_cache_path)
    if stage in ("align", "both") and not baseline:
        cfg_a = dataclasses.replace(
            cfg.training, epochs=cfg.training.effective_stage_a_epochs
        )
        result_a = stage_a_train(
            corpus,
            cache,
            behavior_tmpl,
            lm,
            cfg_a,
            pipeline=pipeline,
            video_adapter=video_adapter,
            audio_adapter=audio_adapter,
            flags=flags,
            run_dir=run_dir,
        )
        click.echo(
            f"stage align: {result_a.n_steps} steps over {result_a.n_examples} "
            f"examples, loss {result_a.initial_loss:.4f} -> {result_a.final_loss:.4f}"
        )
    if stage in ("merc", "both"):
        if stage == "merc" and not baseline:
            checkpoint = latest_checkpoint(run_dir, "a")
            if checkpoint is None:
                raise click.ClickException(
                    f"no alignment checkpoint under {run_dir}; run "
                    f"'merckit train --stage align' first or pass --baseline"
                )
            load_checkpoint(checkpoint, lm, video_adapter, audio_adapter)
        result_b = stage_b_train(
            corpus,
            pipeline,
            emotion_tmpl,
            lm,
            cfg.training,
            label_set=cfg.label_set,
            video_adapter=video_adapter,
            audio_adapter=audio_adapter,
            flags=BehaviorFlags.none() if baseline else flags,
            cache=None if baseline else cache,
            run_dir=run_dir,
        )
        accuracy = result_b.final_accuracy
        click.echo(
            f"stage merc: {result_b.n_steps} steps over {result_b.n_examples} "
            f"examples, loss {result_b.initial_loss:.4f} -> {result_b.final_loss:.4f}"
            + (f", train accuracy {accuracy:.1%}" if accuracy is not None else "")
        )
    return lm, video_adapter, audio_adapter


@main.command("train")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", type=click.Choice(["align", "merc", "both"]), default="both",
              show_default=True)
@click.option("--baseline", is_flag=True,
              help="Skip alignment and behavior text entirely.")
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--behaviors", default=None,
              help="Comma list of behavior types (facial,body,posture) or 'none'.")
def cmd_train(
    config_path: str,
    stage: str,
    baseline: bool,
    seed: int | None,
    output_dir: str | None,
    behaviors: str | None,
) -> None:
    """Run the alignment and/or emotion tuning stages."""
    cfg = _load_cfg(config_path, seed=seed, output_dir=output_dir, behaviors=behaviors)
    corpus = _load_corpus(cfg)
    run_dir = cfg.output_dir
    write_run_snapshot(cfg, run_dir)
    try:
        _train(cfg, corpus, stage, baseline, run_dir)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"checkpoints under {run_dir}")


def _evaluate_checkpoint(
    cfg: RunConfig,
    corpus: CorpusManifest,
    checkpoint: str | None,
    baseline: bool,
    config_id: str,
) -> tuple[MetricsReport, list, dict]:
    lm = cfg.build_model()
    video_adapter, audio_adapter = cfg.build_adapters()
    pipeline = cfg.build_pipeline()
    _, emotion_tmpl = cfg.load_templates()
    path = Path(checkpoint) if checkpoint else latest_checkpoint(cfg.output_dir, "b")
    if path is None:
        raise click.ClickException(
            f"no emotion-stage checkpoint under {cfg.output_dir}; "
            f"run 'merckit train' first or pass --checkpoint"
        )
    load_checkpoint(path, lm, video_adapter, audio_adapter)
    flags = _flags(cfg, baseline)
    cache = None
    if flags.any():
        if not cfg.behavior_cache_path.exists():
            raise click.ClickException(
                f"behavior cache not found at {cfg.behavior_cache_path}; "
                f"run 'merckit generate-behaviors' or pass --baseline"
            )
        cache = BehaviorCache(cfg.behavior_cache_path)
    examples, _ = compile_merc_examples(
        corpus,
        emotion_tmpl,
        lm,
        pipeline,
        cfg.label_set,
        flags,
        cache=cache,
        max_history_turns=cfg.training.max_history_turns,
    )
    if not examples:
        raise click.ClickException("no evaluable utterances in the selected split")
    predictions = predict_examples(
        lm, examples, video_adapter, audio_adapter, cfg.label_set,
        batch_size=cfg.training.batch_size,
    )
    gold = {ex.utterance_id: ex.label for ex in examples}
    report = per_class_metrics(
        [gold[p.utterance_id] for p in predictions],
        [p.predicted_label for p in predictions],
        cfg.label_set,
        config_id=config_id,
    )
    return report, predictions, gold


def _write_eval_artifacts(
    cfg: RunConfig, report: MetricsReport, predictions: list, gold: dict, out_dir: Path
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_dir / "report.json")
    write_report_csv(report, out_dir / "report.csv")
    write_predictions(predictions, gold, out_dir)
    gold_dist = label_distribution(gold.values(), cfg.label_set, source="gold")
    pred_dist = label_distribution(
        [p.predicted_label for p in predictions], cfg.label_set, source="predicted"
    )
    plot_label_distributions([gold_dist, pred_dist], out_dir / "label_distribution.png")
    if len(predictions) >= 2 and len(predictions[0].embedding) >= 2:
        projected, _ = pca_project([p.embedding for p in predictions], k=2)
        plot_pca_scatter(
            projected,
            [gold[p.utterance_id] for p in predictions],
            out_dir / "pca.png",
        )


def _run_ablation(cfg: RunConfig, corpus: CorpusManifest) -> dict[str, MetricsReport]:
    if not cfg.behavior_cache_path.exists():
        raise click.ClickException(
            f"behavior cache not found at {cfg.behavior_cache_path}; "
            f"run 'merckit generate-behaviors' first"
        )
    cache = BehaviorCache(cfg.behavior_cache_path)
    behavior_tmpl, emotion_tmpl = cfg.load_templates()

    def handle(ablation: AblationConfig) -> MetricsReport:
        lm = cfg.build_model()
        video_adapter, audio_adapter = cfg.build_adapters()
        pipeline = cfg.build_pipeline()
        run_dir = cfg.output_dir / "ablation" / ablation.config_id
        if ablation.run_stage_a:
            cfg_a = dataclasses.replace(
                cfg.training, epochs=cfg.training.effective_stage_a_epochs
            )
            stage_a_train(
                corpus, cache, behavior_tmpl, lm, cfg_a,
                pipeline=pipeline, video_adapter=video_adapter,
                audio_adapter=audio_adapter, flags=ablation.flags, run_dir=run_dir,
            )
        stage_b_train(
            corpus, pipeline, emotion_tmpl, lm, cfg.training,
            label_set=cfg.label_set, video_adapter=video_adapter,
            audio_adapter=audio_adapter, flags=ablation.flags,
            cache=cache if ablation.flags.any() else None, run_dir=run_dir,
        )
        examples, _ = compile_merc_examples(
            corpus, emotion_tmpl, lm, pipeline, cfg.label_set, ablation.flags,
            cache=cache if ablation.flags.any() else None,
            max_history_turns=cfg.training.max_history_turns,
        )
        predictions = predict_examples(
            lm, examples, video_adapter, audio_adapter, cfg.label_set,
            batch_size=cfg.training.batch_size,
        )
        gold = {ex.utterance_id: ex.label for ex in examples}
        return per_class_metrics(
            [gold[p.utterance_id] for p in predictions],
            [p.predicted_label for p in predictions],
            cfg.label_set,
            config_id=ablation.config_id,
        )

    try:
        table = run_ablation_suite(canonical_ablation_configs(), handle)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    out = cfg.output_dir / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(table, out / "ablation.csv")
    for config_id, report in table.items():
        click.echo(
            f"{config_id:>14}: accuracy {report.overall_accuracy:.3f}, "
            f"weighted F1 {report.weighted_f1:.3f} (n={report.n_examples})"
        )
    click.echo(f"table written to {out / 'ablation.csv'}")
    return table


def _run_zero_shot(
    cfg: RunConfig, corpus: CorpusManifest, with_behavior: bool
) -> MetricsReport:
    cache = None
    if with_behavior:
        if not cfg.behavior_cache_path.exists():
            raise click.ClickException(
                f"behavior cache not found at {cfg.behavior_cache_path}; "
                f"run 'merckit generate-behaviors' first"
            )
        cache = BehaviorCache(cfg.behavior_cache_path)
    _, emotion_tmpl = cfg.load_templates()
    client = cfg.build_client(corpus)
    result = zero_shot_eval(
        client,
        corpus,
        emotion_tmpl,
        with_behavior,
        label_set=cfg.label_set,
        cache=cache,
        max_history_turns=cfg.training.max_history_turns,
        generation_params=cfg.client.generation_params,
        config_id="zero_shot_behavior" if with_behavior else "zero_shot",
    )
    out = cfg.output_dir / "zero_shot"
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(result.report, out / "report.json")
    write_report_csv(result.report, out / "report.csv")
    (out / "invalid.json").write_text(json.dumps(result.invalid, indent=2))
    (out / "failures.json").write_text(json.dumps(result.failures, indent=2))
    click.echo(
        f"zero-shot over {result.n_queried} utterances: "
        f"accuracy {result.report.overall_accuracy:.3f}, "
        f"weighted F1 {result.report.weighted_f1:.3f}, "
        f"{len(result.invalid)} invalid, {len(result.failures)} transport failures"
    )
    return result.report


@main.command("evaluate")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--split", default=None)
@click.option("--ablation", is_flag=True, help="Run the five-config ablation table.")
@click.option("--zero-shot", "zero_shot", is_flag=True,
              help="Query the configured client instead of a checkpoint.")
@click.option("--with-behavior", is_flag=True,
              help="Include behavior text in zero-shot prompts.")
@click.option("--baseline", is_flag=True)
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--behaviors", default=None)
def cmd_evaluate(
    config_path: str,
    checkpoint: str | None,
    split: str | None,
    ablation: bool,
    zero_shot: bool,
    with_behavior: bool,
    baseline: bool,
    seed: int | None,
    output_dir: str | None,
    behaviors: str | None,
) -> None:
    """Score a trained checkpoint (or the configured client) on a split."""
    cfg = _load_cfg(
        config_path, seed=seed, output_dir=output_dir, behaviors=behaviors, split=split
    )
    corpus = _load_corpus(cfg)
    write_run_snapshot(cfg, cfg.output_dir)
    if ablation:
        _run_ablation(cfg, corpus)
        return
    if zero_shot:
        _run_zero_shot(cfg, corpus, with_behavior)
        return
    config_id = "baseline" if baseline else "full"
    report, predictions, gold = _evaluate_checkpoint(
        cfg, corpus, checkpoint, baseline, config_id
    )
    out_dir = cfg.output_dir / "eval"
    _write_eval_artifacts(cfg, report, predictions, gold, out_dir)
    click.echo(
        f"{config_id}: overall accuracy {report.overall_accuracy:.3f}, "
        f"weighted F1 {report.weighted_f1:.3f} over {report.n_examples} utterances"
    )
    click.echo(f"artifacts under {out_dir}")


@main.command("ablate")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
def cmd_ablate(config_path: str, seed: int | None, output_dir: str | None) -> None:
    """Train and evaluate the five canonical behavior configurations."""
    cfg = _load_cfg(config_path, seed=seed, output_dir=output_dir)
    corpus = _load_corpus(cfg)
    write_run_snapshot(cfg, cfg.output_dir)
    _run_ablation(cfg, corpus)


@main.command("zero-shot")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--with-behavior", is_flag=True,
              help="Include cached behavior text in the prompts.")
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--split", default=None)
def cmd_zero_shot(
    config_path: str,
    with_behavior: bool,
    seed: int | None,
    output_dir: str | None,
    split: str | None,
) -> None:
    """Evaluate the configured hosted client without any tuning."""
    cfg = _load_cfg(config_path, seed=seed, output_dir=output_dir, split=split)
    corpus = _load_corpus(cfg)
    write_run_snapshot(cfg, cfg.output_dir)
    _run_zero_shot(cfg, corpus, with_behavior)


if __name__ == "__main__":
    main()
