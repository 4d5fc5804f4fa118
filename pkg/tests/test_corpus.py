import json

import pytest

from merckit.corpus import (
    Conversation,
    CorpusManifest,
    EmotionLabelSet,
    ManifestError,
    Utterance,
    history_window,
    load_manifest,
    save_manifest,
)

from conftest import IEMOCAP, make_conversation, make_utterance


class TestEmotionLabelSet:
    def test_requires_two_labels(self):
        with pytest.raises(ValueError):
            EmotionLabelSet(("only",))

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            EmotionLabelSet(("a", "b", "a"))

    def test_stable_indexing(self, iemocap_labels):
        assert iemocap_labels.k == 6
        for i, label in enumerate(iemocap_labels.labels):
            assert iemocap_labels.index_of(label) == i
        assert "happy" in iemocap_labels
        assert "bored" not in iemocap_labels


class TestUtteranceAndConversation:
    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            Utterance(
                id="x", speaker="A", text="hi", audio_ref=None, video_ref=None,
                label=None, index_in_conversation=-1,
            )

    def test_conversation_requires_contiguous_indices(self):
        good = make_conversation("c0", ["happy", "sad"])
        assert len(good) == 2
        utts = (make_utterance("c1", 0), make_utterance("c1", 2))
        with pytest.raises(ValueError):
            Conversation(id="c1", utterances=utts)

    def test_conversation_requires_at_least_one_utterance(self):
        with pytest.raises(ValueError):
            Conversation(id="c0", utterances=())


class TestManifest:
    def test_labels_must_belong_to_set(self, two_labels):
        conv = make_conversation("c0", ["happy", "bored"])
        with pytest.raises(ValueError) as err:
            CorpusManifest(conversations=(conv,), label_set=two_labels, split="train")
        assert "bored" in str(err.value)

    def test_split_enum(self, two_labels):
        conv = make_conversation("c0", ["happy"])
        with pytest.raises(ValueError):
            CorpusManifest(conversations=(conv,), label_set=two_labels, split="validation")

    def test_empty_file_errors(self, tmp_path, two_labels):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(ManifestError, match="no conversations"):
            load_manifest(path, two_labels)

    def test_single_conversation_three_utterances(self, tmp_path):
        # N=1, S=3 under the six-class label set
        conv = make_conversation("c0", ["happy", "sad", "neutral"])
        manifest = CorpusManifest(conversations=(conv,), label_set=IEMOCAP, split="dev")
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        loaded = load_manifest(path, IEMOCAP, split="dev")
        assert loaded.n_conversations == 1
        assert len(loaded.conversations[0]) == 3

    def test_unknown_label_names_label_and_utterance(self, tmp_path):
        conv = make_conversation("c0", ["happy", "sad"])
        record = {
            "id": "c0",
            "utterances": [
                {
                    "id": u.id, "speaker": u.speaker, "text": u.text,
                    "audio_ref": u.audio_ref, "video_ref": u.video_ref,
                    "label": "bored" if j == 1 else u.label, "index": j,
                }
                for j, u in enumerate(conv.utterances)
            ],
        }
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(ManifestError) as err:
            load_manifest(path, IEMOCAP)
        assert "bored" in str(err.value)
        assert "c0_u1" in str(err.value)

    def test_malformed_line_names_line_number(self, tmp_path, two_labels):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "c0", "utterances": [{"id": "c0_u0", "speaker": "A",'
                        ' "text": "x", "audio_ref": null, "video_ref": null,'
                        ' "label": "happy", "index": 0}]}\n{not json\n')
        with pytest.raises(ManifestError, match=r"bad\.jsonl:2"):
            load_manifest(path, two_labels)

    def test_round_trip_equality(self, tmp_path, small_corpus):
        path = tmp_path / "rt.jsonl"
        save_manifest(small_corpus, path)
        loaded = load_manifest(path, small_corpus.label_set, split="train")
        assert loaded == small_corpus
        # second round trip is byte-identical
        path2 = tmp_path / "rt2.jsonl"
        save_manifest(loaded, path2)
        assert path.read_text() == path2.read_text()

    def test_null_media_refs_allowed(self, tmp_path, two_labels):
        conv = make_conversation("c0", ["happy"], media=False)
        manifest = CorpusManifest(conversations=(conv,), label_set=two_labels, split="train")
        path = tmp_path / "m.jsonl"
        save_manifest(manifest, path)
        loaded = load_manifest(path, two_labels)
        assert loaded.conversations[0].utterances[0].audio_ref is None


class TestHistoryWindow:
    def test_first_utterance_has_no_context(self):
        conv = make_conversation("c0", ["happy", "sad", "happy"])
        assert history_window(conv, 0, 10) == []
        assert history_window(conv, 0, 0) == []

    def test_last_two_of_five(self):
        conv = make_conversation("c0", ["happy"] * 5)
        got = history_window(conv, 4, 2)
        assert [u.index_in_conversation for u in got] == [2, 3]

    def test_window_larger_than_history(self):
        conv = make_conversation("c0", ["happy"] * 5)
        got = history_window(conv, 3, 10)
        assert [u.index_in_conversation for u in got] == [0, 1, 2]

    def test_out_of_range_j(self):
        conv = make_conversation("c0", ["happy", "sad"])
        with pytest.raises(IndexError):
            history_window(conv, 2, 1)
        with pytest.raises(IndexError):
            history_window(conv, -1, 1)

    def test_length_and_exclusion_property(self):
        # length is min(j, m) and the target never appears, across the grid
        conv = make_conversation("c0", ["happy"] * 7)
        for j in range(7):
            for m in range(0, 9):
                got = history_window(conv, j, m)
                assert len(got) == min(j, m)
                assert all(u.index_in_conversation < j for u in got)
                assert [u.index_in_conversation for u in got] == sorted(
                    u.index_in_conversation for u in got
                )
