"""Release gate: one test per shipping criterion.

Each test prints a single "[criterion N] PASS/FAIL" line (visible with
pytest -s); under plain `pytest -v` the per-test PASSED/FAILED rows serve
the same purpose. Criteria 4, 5, and 7 share one trained toy run.
"""

import dataclasses
import json
import math
import random
import time
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import yaml

from conftest import IEMOCAP, annotation_for, make_utterance
from merckit.behavior import BehaviorCache, annotate_corpus
from merckit.cli import (
    FIXTURE_BEHAVIOR_TEMPLATE,
    FIXTURE_CONFIG,
    FIXTURE_EMOTION_TEMPLATE,
)
from merckit.config import load_run_config
from merckit.corpus import EmotionLabelSet, load_manifest
from merckit.evaluation import (
    canonical_ablation_configs,
    pca_project,
    per_class_metrics,
)
from merckit.features import (
    AudioFrameSpec,
    FeatureAdapter,
    FrameSampleSpec,
    make_modality_features,
    sample_frame_indices,
    segment_audio,
)
from merckit.model import TinyDecoderConfig, TinyDecoderLM
from merckit.prompting import (
    BehaviorFlags,
    PlaceholderSpec,
    StructuredTemplate,
    build_alignment_prompt,
    build_merc_prompt,
    count_placeholders,
)
from merckit.synthetic import write_fixture_corpus
from merckit.tuning import (
    assemble_multimodal_sequence,
    compile_merc_examples,
    compute_loss,
    predict_examples,
    stage_a_train,
    stage_b_train,
)


@contextmanager
def criterion(n: int, name: str):
    try:
        yield
    except BaseException:
        print(f"[criterion {n}] FAIL: {name}")
        raise
    print(f"[criterion {n}] PASS: {name}")


# ---------------------------------------------------------------- criterion 1


def brute_force_report(gold, pred, labels):
    """Independent confusion-matrix walk in pure python."""
    per_class = {}
    for lab in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == lab and p == lab)
        fn = sum(1 for g, p in zip(gold, pred) if g == lab and p != lab)
        fp = sum(1 for g, p in zip(gold, pred) if g != lab and p == lab)
        support = tp + fn
        recall = tp / support if support else 0.0
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if (precision + recall)
            else 0.0
        )
        per_class[lab] = (support, recall, f1)
    overall = sum(1 for g, p in zip(gold, pred) if g == p) / len(gold)
    weighted = sum(s * f for s, _, f in per_class.values()) / len(gold)
    return per_class, overall, weighted


def test_criterion_01_metric_oracle_equivalence():
    with criterion(1, "per-class metrics match a brute-force oracle"):
        rng = random.Random(11)
        start = time.perf_counter()
        for _ in range(1000):
            k = rng.randint(2, 7)
            n = rng.randint(1, 200)
            label_set = EmotionLabelSet(tuple(f"e{i}" for i in range(k)))
            gold = [rng.choice(label_set.labels) for _ in range(n)]
            pred = [rng.choice(label_set.labels) for _ in range(n)]
            report = per_class_metrics(gold, pred, label_set)
            oracle, overall, weighted = brute_force_report(
                gold, pred, label_set.labels
            )
            for lab, (support, recall, f1) in oracle.items():
                got = report.per_class[lab]
                assert got.support == support
                assert abs(got.accuracy - recall) <= 1e-12
                assert abs(got.f1 - f1) <= 1e-12
            assert abs(report.overall_accuracy - overall) <= 1e-12
            assert abs(report.weighted_f1 - weighted) <= 1e-12
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"oracle sweep took {elapsed:.1f}s"


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_loss_closed_forms_and_gradient():
    with criterion(2, "loss matches closed forms and finite differences"):
        one_hot = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        perfect = compute_loss(one_hot.clone(), one_hot, None, 0.0)
        assert float(perfect) == 0.0

        k = 6
        uniform = torch.full((1, k), 1.0 / k, dtype=torch.float64)
        target = torch.zeros((1, k), dtype=torch.float64)
        target[0, 2] = 1.0
        assert float(compute_loss(uniform, target, None, 0.0)) == pytest.approx(
            math.log(k), abs=1e-12
        )

        w = torch.tensor([1.0, 2.0], dtype=torch.float64)
        reg_only = compute_loss(one_hot.clone(), one_hot, w, 0.1)
        assert float(reg_only) == 0.5

        # decomposition: data term and penalty term add exactly
        gen = torch.Generator().manual_seed(3)
        probs = torch.softmax(
            torch.randn(5, 4, generator=gen, dtype=torch.float64), dim=1
        )
        targets = torch.eye(4, dtype=torch.float64)[
            torch.randint(0, 4, (5,), generator=gen)
        ]
        w2 = torch.randn(7, generator=gen, dtype=torch.float64)
        lam = 0.3
        total = float(compute_loss(probs, targets, w2, lam))
        data_term = float(compute_loss(probs, targets, None, 0.0))
        assert total == data_term + lam * float((w2**2).sum())

        # central finite differences on a 2-class, 3-example batch
        z = torch.randn(3, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        wg = torch.randn(4, generator=gen, dtype=torch.float64, requires_grad=True)
        y = torch.tensor(
            [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=torch.float64
        )

        def f(z_in, w_in):
            return compute_loss(torch.softmax(z_in, dim=1), y, w_in, 0.05)

        loss = f(z, wg)
        loss.backward()
        step = 1e-6
        for tensor in (z, wg):
            flat = tensor.detach().clone().reshape(-1)
            grad = tensor.grad.reshape(-1)
            for i in range(flat.shape[0]):
                hi = flat.clone()
                hi[i] += step
                lo = flat.clone()
                lo[i] -= step
                args_hi = [t.detach() for t in (z, wg)]
                args_lo = [t.detach() for t in (z, wg)]
                idx = 0 if tensor is z else 1
                args_hi[idx] = hi.reshape(tensor.shape)
                args_lo[idx] = lo.reshape(tensor.shape)
                fd = float(f(*args_hi) - f(*args_lo)) / (2 * step)
                an = float(grad[i])
                assert abs(fd - an) <= 1e-4 * max(1.0, abs(an)), (
                    f"grad mismatch at {i}: fd={fd}, analytic={an}"
                )


# ---------------------------------------------------------------- criterion 3


WORD_BANK = (
    "the meeting ran long", "someone dropped a tray", "we moved the couch",
    "the report is due", "rain started again", "they fixed the printer",
    "lunch arrived late", "the lights flickered", "a phone kept buzzing",
)


def test_criterion_03_token_arithmetic_over_randomized_prompts():
    with criterion(3, "assembled length arithmetic over 100 random prompts"):
        rng = random.Random(7)
        lm = TinyDecoderLM(TinyDecoderConfig())
        video_adapter = FeatureAdapter(8, 64, seed=0)
        audio_adapter = FeatureAdapter(6, 64, seed=1)
        np_rng = np.random.default_rng(7)
        for i in range(100):
            n_video = rng.randint(0, 6)
            n_audio = rng.randint(0, 4)
            spec = PlaceholderSpec().with_counts(n_video, n_audio)
            template = StructuredTemplate(
                title="Emotion recognition.",
                context_header="Dialogue:",
                objective="Name the final speaker's emotion.",
                constraint="Answer with one label from: {labels}.",
                placeholder_spec=spec,
            )
            history_len = rng.randint(0, 3)
            utts = [
                make_utterance(
                    f"r{i}",
                    j,
                    text=rng.choice(WORD_BANK),
                    speaker=rng.choice("AB"),
                    label=rng.choice(IEMOCAP.labels),
                )
                for j in range(history_len + 1)
            ]
            target, history = utts[-1], utts[:-1]
            annotation = annotation_for(target.id) if rng.random() < 0.5 else None
            if annotation is not None:
                flags = BehaviorFlags(
                    facial=rng.random() < 0.7,
                    body=rng.random() < 0.7,
                    posture=rng.random() < 0.7,
                )
            else:
                flags = BehaviorFlags.none()
            if annotation is not None and flags.any() and rng.random() < 0.3:
                instance = build_alignment_prompt(
                    template, target, history, annotation, flags,
                    placeholder_spec=spec,
                )
            else:
                instance = build_merc_prompt(
                    template, target, history, IEMOCAP, annotation, flags,
                    placeholder_spec=spec,
                )
            counts = count_placeholders(instance)
            assert counts == {"video": n_video, "audio": n_audio}
            n_tokens = len(lm.tokenize(instance.text))
            feats = make_modality_features(
                np_rng.normal(size=(n_video, 8)),
                np_rng.normal(size=(n_audio, 6)),
                video_adapter,
                audio_adapter,
            )
            assembled = assemble_multimodal_sequence(instance, lm, feats)
            n_placeholders = counts["video"] + counts["audio"]
            n_rows = n_video + n_audio
            assert len(assembled) == n_tokens - n_placeholders + n_rows
            assert assembled.remaining_placeholders(lm) == 0


# ------------------------------------------------- shared toy run (4, 5, 7)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """32-conversation synthetic fixture taken through both stages plus a
    no-behavior baseline, exactly as the packaged demo config wires it."""
    root = tmp_path_factory.mktemp("acceptance-toy")
    write_fixture_corpus(
        root / "corpus.jsonl", n_conversations=32,
        utterances_per_conversation=3, seed=13,
    )
    (root / "config.yaml").write_text(FIXTURE_CONFIG)
    (root / "behavior.tmpl").write_text(FIXTURE_BEHAVIOR_TEMPLATE)
    (root / "emotion.tmpl").write_text(FIXTURE_EMOTION_TEMPLATE)
    cfg = load_run_config(root / "config.yaml")
    corpus = load_manifest(cfg.corpus_path, cfg.label_set, split=cfg.split)
    behavior_tmpl, emotion_tmpl = cfg.load_templates()
    cache = BehaviorCache(cfg.behavior_cache_path)
    client = cfg.build_client(corpus)
    summary = annotate_corpus(
        client, corpus, behavior_tmpl, cache,
        max_history_turns=cfg.training.max_history_turns,
    )
    assert summary.failed == 0

    pipeline = cfg.build_pipeline()
    lm = cfg.build_model()
    video_adapter, audio_adapter = cfg.build_adapters()
    hash_start = lm.base_weight_hash()
    started = time.perf_counter()
    cfg_a = dataclasses.replace(
        cfg.training, epochs=cfg.training.effective_stage_a_epochs
    )
    stage_a_train(
        corpus, cache, behavior_tmpl, lm, cfg_a,
        pipeline=pipeline, video_adapter=video_adapter,
        audio_adapter=audio_adapter, flags=cfg.behavior_flags,
        run_dir=root / "run",
    )
    hash_after_a = lm.base_weight_hash()
    result_b = stage_b_train(
        corpus, pipeline, emotion_tmpl, lm, cfg.training,
        label_set=cfg.label_set, video_adapter=video_adapter,
        audio_adapter=audio_adapter, flags=cfg.behavior_flags,
        cache=cache, run_dir=root / "run",
    )
    elapsed = time.perf_counter() - started
    hash_after_b = lm.base_weight_hash()

    # baseline arm: identical training config, no alignment stage, no
    # behavior text; fresh model and adapters
    lm_base = cfg.build_model()
    va_base, aa_base = cfg.build_adapters()
    baseline = stage_b_train(
        corpus, pipeline, emotion_tmpl, lm_base, cfg.training,
        label_set=cfg.label_set, video_adapter=va_base,
        audio_adapter=aa_base, flags=BehaviorFlags.none(),
        cache=None, run_dir=root / "baseline",
    )
    return SimpleNamespace(
        cfg=cfg,
        corpus=corpus,
        cache=cache,
        emotion_template=emotion_tmpl,
        elapsed=elapsed,
        full=result_b,
        baseline=baseline,
        hashes=(hash_start, hash_after_a, hash_after_b),
    )


def test_criterion_04_toy_end_to_end_overfit(toy_run):
    with criterion(4, "two-stage overfit beats the no-behavior baseline"):
        assert toy_run.elapsed < 300.0, (
            f"stage A + stage B took {toy_run.elapsed:.0f}s"
        )
        full_acc = toy_run.full.final_accuracy
        base_acc = toy_run.baseline.final_accuracy
        assert full_acc is not None and base_acc is not None
        assert full_acc >= 0.95, f"train accuracy {full_acc:.3f}"
        assert base_acc < full_acc, (
            f"baseline {base_acc:.3f} not below full {full_acc:.3f}"
        )
        print(
            f"  full {full_acc:.3f} vs baseline {base_acc:.3f} "
            f"in {toy_run.elapsed:.0f}s"
        )


def test_criterion_05_ablation_configs_and_none_prompt_identity(toy_run):
    with criterion(5, "five ablation configs; 'none' prompts match baseline"):
        configs = canonical_ablation_configs()
        assert [c.config_id for c in configs] == [
            "full", "facial_only", "body_only", "posture_only", "none",
        ]
        by_id = {c.config_id: c for c in configs}
        assert by_id["full"].flags == BehaviorFlags(True, True, True)
        assert by_id["facial_only"].flags == BehaviorFlags(True, False, False)
        assert by_id["body_only"].flags == BehaviorFlags(False, True, False)
        assert by_id["posture_only"].flags == BehaviorFlags(False, False, True)
        assert by_id["none"].flags == BehaviorFlags(False, False, False)
        assert not by_id["none"].run_stage_a
        assert all(by_id[c].run_stage_a for c in
                   ("full", "facial_only", "body_only", "posture_only"))

        cfg = toy_run.cfg
        lm = cfg.build_model()
        pipeline = cfg.build_pipeline()
        turns = cfg.training.max_history_turns
        none_examples, _ = compile_merc_examples(
            toy_run.corpus, toy_run.emotion_template, lm, pipeline,
            cfg.label_set, by_id["none"].flags, cache=toy_run.cache,
            max_history_turns=turns,
        )
        base_examples, _ = compile_merc_examples(
            toy_run.corpus, toy_run.emotion_template, lm, pipeline,
            cfg.label_set, BehaviorFlags.none(), cache=None,
            max_history_turns=turns,
        )
        n_utterances = sum(
            len(c.utterances) for c in toy_run.corpus.conversations
        )
        assert len(none_examples) == len(base_examples) == n_utterances
        for none_ex, base_ex in zip(none_examples, base_examples):
            assert none_ex.utterance_id == base_ex.utterance_id
            assert none_ex.prompt_text.encode() == base_ex.prompt_text.encode()
            assert none_ex.ids == base_ex.ids


# ---------------------------------------------------------------- criterion 6


def test_criterion_06_sampling_invariants():
    with criterion(6, "frame/audio sampling invariants over 1000 draws"):
        rng = random.Random(29)
        for _ in range(1000):
            total = rng.randint(1, 500)
            spec = FrameSampleSpec(
                n_frames=rng.randint(1, 64), rng_seed=rng.randint(0, 9)
            )
            picked = sample_frame_indices(total, spec)
            assert picked == sample_frame_indices(total, spec)  # deterministic
            assert len(picked) == spec.n_frames
            assert all(0 <= idx < total for idx in picked)
            assert picked == sorted(picked)
            if total >= spec.n_frames:
                assert len(set(picked)) == spec.n_frames

            duration = rng.uniform(0.05, 30.0)
            audio_spec = AudioFrameSpec(
                stride_seconds=rng.choice([1.0, 2.0, 3.0])
            )
            windows = segment_audio(duration, audio_spec)
            assert windows == segment_audio(duration, audio_spec)
            assert windows, "tiling must produce at least one window"
            assert windows[0][0] == 0.0
            assert abs(windows[-1][1] - duration) < 1e-9
            for (_, prev_end), (start, _) in zip(windows, windows[1:]):
                assert start == prev_end
            for start, end in windows:
                assert end > start


# ---------------------------------------------------------------- criterion 7


def test_criterion_07_base_weights_frozen_across_stages(toy_run):
    with criterion(7, "base-weight hash unchanged across both stages"):
        start, after_a, after_b = toy_run.hashes
        assert start == after_a == after_b


# ---------------------------------------------------------------- criterion 8


def test_criterion_08_pca_rank1_and_isometry():
    with criterion(8, "PCA rank-1 ratio and k=d distance preservation"):
        rng = np.random.default_rng(5)
        direction = rng.normal(size=6)
        direction /= np.linalg.norm(direction)
        points = np.outer(rng.normal(size=50), direction) + rng.normal(size=6)
        _, ratios = pca_project(points, k=1)
        assert abs(ratios[0] - 1.0) <= 1e-9

        data = rng.normal(size=(30, 5))
        projected, _ = pca_project(data, k=5)
        for i in range(len(data)):
            for j in range(i + 1, len(data)):
                original = np.linalg.norm(data[i] - data[j])
                mapped = np.linalg.norm(projected[i] - projected[j])
                assert abs(original - mapped) <= 1e-9


# ---------------------------------------------------------------- criterion 9


REPRO_CONFIG = {
    "corpus": "corpus.jsonl",
    "labels": ["happy", "sad"],
    "split": "train",
    "seed": 0,
    "output_dir": "run",
    "behavior_cache": "behaviors.jsonl",
    "templates": {"behavior": "behavior.tmpl", "emotion": "emotion.tmpl"},
    "features": {
        "n_frames": 2, "d_v": 8, "d_a": 8, "default_audio_windows": 1,
    },
    "model": {
        "d_model": 32, "n_layers": 1, "n_heads": 2, "d_ff": 64,
        "lora_rank": 2, "lora_alpha": 4.0,
    },
    "training": {
        "learning_rate": 0.01, "epochs": 2, "stage_a_epochs": 1,
        "batch_size": 4, "max_history_turns": 1,
    },
}


def _mock_stack_report(root):
    """Full pipeline (annotate, stage A, stage B, predict, score) in root."""
    write_fixture_corpus(
        root / "corpus.jsonl", n_conversations=8,
        utterances_per_conversation=3, seed=13,
    )
    (root / "config.yaml").write_text(yaml.safe_dump(REPRO_CONFIG))
    (root / "behavior.tmpl").write_text(FIXTURE_BEHAVIOR_TEMPLATE)
    (root / "emotion.tmpl").write_text(FIXTURE_EMOTION_TEMPLATE)
    cfg = load_run_config(root / "config.yaml")
    corpus = load_manifest(cfg.corpus_path, cfg.label_set, split=cfg.split)
    behavior_tmpl, emotion_tmpl = cfg.load_templates()
    cache = BehaviorCache(cfg.behavior_cache_path)
    annotate_corpus(
        cfg.build_client(corpus), corpus, behavior_tmpl, cache,
        max_history_turns=cfg.training.max_history_turns,
    )
    pipeline = cfg.build_pipeline()
    lm = cfg.build_model()
    video_adapter, audio_adapter = cfg.build_adapters()
    cfg_a = dataclasses.replace(
        cfg.training, epochs=cfg.training.effective_stage_a_epochs
    )
    stage_a_train(
        corpus, cache, behavior_tmpl, lm, cfg_a, pipeline=pipeline,
        video_adapter=video_adapter, audio_adapter=audio_adapter,
        flags=cfg.behavior_flags, run_dir=root / "run",
    )
    stage_b_train(
        corpus, pipeline, emotion_tmpl, lm, cfg.training,
        label_set=cfg.label_set, video_adapter=video_adapter,
        audio_adapter=audio_adapter, flags=cfg.behavior_flags,
        cache=cache, run_dir=root / "run",
    )
    examples, _ = compile_merc_examples(
        corpus, emotion_tmpl, lm, pipeline, cfg.label_set,
        cfg.behavior_flags, cache=cache,
        max_history_turns=cfg.training.max_history_turns,
    )
    predictions = predict_examples(
        lm, examples, video_adapter, audio_adapter, cfg.label_set,
        batch_size=cfg.training.batch_size,
    )
    gold = {ex.utterance_id: ex.label for ex in examples}
    report = per_class_metrics(
        [gold[p.utterance_id] for p in predictions],
        [p.predicted_label for p in predictions],
        cfg.label_set,
        config_id="repro",
    )
    return report, [p.predicted_label for p in predictions]


def test_criterion_09_equal_seed_runs_are_identical(tmp_path):
    with criterion(9, "equal config and seed reproduce the metric report"):
        first_dir = tmp_path / "first"
        second_dir = tmp_path / "second"
        first_dir.mkdir()
        second_dir.mkdir()
        report_one, labels_one = _mock_stack_report(first_dir)
        report_two, labels_two = _mock_stack_report(second_dir)
        assert labels_one == labels_two
        assert report_one.to_dict() == report_two.to_dict()
        assert json.dumps(report_one.to_dict(), sort_keys=True) == json.dumps(
            report_two.to_dict(), sort_keys=True
        )
