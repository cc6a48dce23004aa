import itertools
import math

import numpy as np
import pytest

from hid.dataset import (
    DataError,
    Dataset,
    RawEvent,
    augment_split,
    generate_synthetic,
    generate_synthetic_events,
    load_attributes,
    load_sessions,
    preprocess,
    split_head_tail,
)


def _write(path, text):
    path.write_text(text)
    return path


class TestLoadSessions:
    def test_three_rows(self, tmp_path):
        p = _write(tmp_path / "s.csv", "session_id,timestamp,item_id\n1,10,a\n1,11,b\n2,5,c\n")
        events = load_sessions(p)
        assert [(e.session_id, e.timestamp, e.item_id) for e in events] == [
            ("1", 10, "a"), ("1", 11, "b"), ("2", 5, "c")]

    def test_header_only(self, tmp_path):
        assert load_sessions(_write(tmp_path / "s.csv", "session_id,timestamp,item_id\n")) == []

    def test_bad_timestamp_reports_line(self, tmp_path):
        p = _write(tmp_path / "s.csv", "session_id,timestamp,item_id\n1,10,a\n1,noon,b\n")
        with pytest.raises(DataError, match=":3:"):
            load_sessions(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sessions(tmp_path / "nope.csv")

    def test_duplicate_header(self, tmp_path):
        p = _write(tmp_path / "s.csv", "session_id,timestamp,item_id\n1,1,a\nsession_id,timestamp,item_id\n")
        with pytest.raises(DataError, match="duplicate header"):
            load_sessions(p)

    def test_wrong_field_count(self, tmp_path):
        p = _write(tmp_path / "s.csv", "session_id,timestamp,item_id\n1,1\n")
        with pytest.raises(DataError, match=":2:"):
            load_sessions(p)

    def test_negative_timestamp_rejected(self):
        with pytest.raises(DataError):
            RawEvent("s", "i", -1)


class TestLoadAttributes:
    def test_basic(self, tmp_path):
        p = _write(tmp_path / "a.csv", "item_id,attribute_id\ni1,a1\ni2,a1\ni3,a2\n")
        m = load_attributes(p)
        assert len(m) == 3 and len(set(m.values())) == 2

    def test_first_wins(self, tmp_path):
        p = _write(tmp_path / "a.csv", "item_id,attribute_id\ni1,a1\ni1,a2\n")
        assert load_attributes(p) == {"i1": "a1"}

    def test_empty(self, tmp_path):
        assert load_attributes(_write(tmp_path / "a.csv", "item_id,attribute_id\n")) == {}

    def test_malformed(self, tmp_path):
        with pytest.raises(DataError):
            load_attributes(_write(tmp_path / "a.csv", "item_id,attribute_id\ni1\n"))


class TestAugmentSplit:
    def test_pair(self):
        out = augment_split([0, 1])
        assert [(s.items, s.label) for s in out] == [([0], 1)]

    def test_three(self):
        assert [(s.items, s.label) for s in augment_split([0, 1, 2])] == [([0], 1), ([0, 1], 2)]

    def test_four_last(self):
        out = augment_split([0, 1, 2, 3])
        assert len(out) == 3 and (out[-1].items, out[-1].label) == ([0, 1, 2], 3)

    def test_min_prefix_len_drops_singletons(self):
        out = augment_split([0, 1, 2, 3], min_prefix_len=2)
        assert [(s.items, s.label) for s in out] == [([0, 1], 2), ([0, 1, 2], 3)]

    def test_too_short(self):
        with pytest.raises(DataError):
            augment_split([0])

    @pytest.mark.parametrize("n", range(2, 9))
    def test_nested_prefixes(self, n):
        out = augment_split(list(range(n)))
        assert len(out) == n - 1
        for a, b in zip(out, out[1:]):
            assert b.items[: len(a.items)] == a.items and len(b.items) == len(a.items) + 1


class TestHeadTail:
    def test_examples(self):
        assert split_head_tail([10, 5, 3, 2, 1], 0.2).tolist() == [True, False, False, False, False]
        assert split_head_tail([7, 7], 0.5).tolist() == [True, False]
        assert split_head_tail([1, 1, 1, 1, 1], 0.2).tolist() == [True, False, False, False, False]

    def test_head_size_exhaustive(self):
        rng = np.random.default_rng(0)
        for m in range(1, 13):
            for pareto in (0.1, 0.2, 0.5):
                for _ in range(5):
                    freq = rng.integers(0, 4, size=m)
                    head = split_head_tail(freq, pareto)
                    assert head.sum() == math.ceil(pareto * m)
                    if (~head).any() and head.any():
                        assert freq[head].min() >= freq[~head].max()

    def test_tie_break_by_index(self):
        head = split_head_tail([3, 5, 5, 5, 1], 0.4)
        assert np.flatnonzero(head).tolist() == [1, 2]

    @pytest.mark.parametrize("pareto", [0.0, 1.0, -0.1])
    def test_bad_pareto(self, pareto):
        with pytest.raises(DataError):
            split_head_tail([1, 2], pareto)


def _events(seqs, t0=0):
    events, t = [], t0
    for sid, seq in seqs:
        for item in seq:
            events.append(RawEvent(sid, item, t))
            t += 1
    return events


class TestPreprocess:
    def test_single_pair_session(self):
        ds = preprocess(_events([("s", ["a", "b"])]), min_item_freq=1)
        assert [(s.items, s.label, s.split) for s in ds.sessions] == [([0], 1, "train")]

    def test_four_item_session_instances(self):
        ds = preprocess(_events([("s", ["a", "b", "c", "d"])]), min_item_freq=1)
        assert {(tuple(s.items), s.label) for s in ds.sessions} == {((0,), 1), ((0, 1), 2), ((0, 1, 2), 3)}

    def test_rare_item_removed(self):
        seqs = [(f"s{i}", ["a", "b"]) for i in range(5)] + [(f"r{i}", ["a", "rare"]) for i in range(4)]
        ds = preprocess(_events(seqs), min_item_freq=5, test_fraction=0.01)
        assert "rare" not in ds.catalog.items
        assert set(ds.catalog.items) == {"a", "b"}

    def test_fixpoint_filtering(self):
        # dropping "rare" shortens r-sessions to length 1, which removes four "a"s
        seqs = [(f"s{i}", ["a", "b"]) for i in range(5)] + [(f"r{i}", ["c", "rare"]) for i in range(4)]
        ds = preprocess(_events(seqs), min_item_freq=5, test_fraction=0.01)
        assert set(ds.catalog.items) == {"a", "b"}

    def test_temporal_split(self):
        seqs = [(f"s{i}", ["a", "b", "c"]) for i in range(10)]
        ds = preprocess(_events(seqs), min_item_freq=1, test_fraction=0.2)
        test_ids = {s.session_id for s in ds.test}
        assert test_ids == {"s8", "s9"}

    def test_events_sorted_by_timestamp(self):
        events = [RawEvent("s", "b", 5), RawEvent("s", "a", 1), RawEvent("s", "c", 9)]
        ds = preprocess(events, min_item_freq=1)
        full = ds.sequences("train")[0]
        assert [ds.catalog.items[i] for i in full] == ["a", "b", "c"]

    def test_empty_raises(self):
        with pytest.raises(DataError):
            preprocess([], min_item_freq=1)
        with pytest.raises(DataError):
            preprocess(_events([("s", ["a"])]), min_item_freq=1)

    @pytest.mark.parametrize("kw", [{"min_item_freq": 0}, {"min_session_len": 1}, {"test_fraction": 1.0}])
    def test_bad_params(self, kw):
        with pytest.raises(DataError):
            preprocess(_events([("s", ["a", "b"])]), **kw)

    def test_attribute_map_total_and_first_seen(self):
        attrs = {"a": "x", "b": "x"}
        ds = preprocess(_events([("s", ["a", "b", "c"])]), attrs, min_item_freq=1)
        cat = ds.catalog
        assert cat.attribute_of[0] == cat.attribute_of[1]
        assert cat.attribute_of[2] != cat.attribute_of[0]
        assert cat.k == 2

    def test_deterministic(self):
        events, attrs, _ = generate_synthetic_events(n_items=50, n_sessions=200, n_latent_intents=3, seed=1)
        a = preprocess(events, attrs, min_item_freq=2)
        b = preprocess(events, attrs, min_item_freq=2)
        assert a.catalog.to_json() == b.catalog.to_json()
        assert [s.to_json() for s in a.sessions] == [s.to_json() for s in b.sessions]

    def test_idempotent_on_own_output(self):
        events, attrs, _ = generate_synthetic_events(n_items=50, n_sessions=200, n_latent_intents=3, seed=1)
        ds = preprocess(events, attrs, min_item_freq=3)
        # re-ingest the kept training sequences: nothing more is filtered
        again_events = _events([(f"x{i}", [ds.catalog.items[j] for j in seq])
                                for i, seq in enumerate(ds.sequences("train"))])
        again = preprocess(again_events, {it: attrs[it] for it in ds.catalog.items},
                           min_item_freq=3, test_fraction=1e-9)
        assert again.catalog.items == ds.catalog.items
        assert again.catalog.frequency.tolist() == ds.catalog.frequency.tolist()

    def test_test_split_does_not_touch_catalog(self):
        events, attrs, _ = generate_synthetic_events(n_items=60, n_sessions=300, n_latent_intents=3, seed=2)
        base = preprocess(events, attrs, min_item_freq=2)
        test_ids = {s.session_id for s in base.test}
        rng = np.random.default_rng(0)
        perturbed = [RawEvent(e.session_id, f"i{int(rng.integers(60))}" if e.session_id in test_ids else e.item_id,
                              e.timestamp) for e in events]
        other = preprocess(perturbed, attrs, min_item_freq=2)
        assert other.catalog.to_json() == base.catalog.to_json()

    def test_head_flags_from_train(self):
        ds = generate_synthetic(n_items=80, n_sessions=300, n_latent_intents=4, seed=3)
        freq = np.zeros(ds.catalog.m, dtype=int)
        for seq in ds.sequences("train"):
            for i in seq:
                freq[i] += 1
        assert freq.tolist() == ds.catalog.frequency.tolist()
        assert ds.catalog.is_head.sum() == math.ceil(0.2 * ds.catalog.m)


class TestSynthetic:
    def test_same_seed_identical(self, tmp_path):
        a = generate_synthetic(n_items=100, n_sessions=300, n_latent_intents=4, seed=5)
        b = generate_synthetic(n_items=100, n_sessions=300, n_latent_intents=4, seed=5)
        a.save(tmp_path / "a")
        b.save(tmp_path / "b")
        for name in ("catalog.json", "sessions.jsonl", "meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_no_noise_single_attribute(self):
        ds = generate_synthetic(n_items=100, n_sessions=300, n_latent_intents=4, noise_rate=0.0, seed=5)
        attr = ds.catalog.attribute_of
        for s in ds.sessions:
            assert len({int(attr[i]) for i in s.items + [s.label]}) == 1

    def test_label_in_latent_intent_with_noise(self):
        events, attrs, intent_of = generate_synthetic_events(n_items=100, n_sessions=200, n_latent_intents=4,
                                                             noise_rate=0.4, seed=1)
        by_session = {}
        for e in events:
            by_session.setdefault(e.session_id, []).append(int(e.item_id[1:]))
        noisy = 0
        for seq in by_session.values():
            groups = intent_of[seq]
            noisy += int((groups[:-1] != groups[-1]).sum())
        assert noisy > 0  # noise occurred, yet the loop above never errored on labels

    def test_rank_curve_non_increasing(self):
        events, _, _ = generate_synthetic_events(n_items=1000, n_sessions=3000, zipf_exponent=1.2, seed=0)
        counts = np.bincount([int(e.item_id[1:]) for e in events], minlength=1000)
        curve = np.sort(counts)[::-1]
        assert np.all(np.diff(curve) <= 0)
        # and the head really dominates: top 20% take most interactions
        assert curve[:200].sum() > 0.5 * curve.sum()

    @pytest.mark.parametrize("kw", [{"n_latent_intents": 1}, {"noise_rate": 0.5}, {"noise_rate": -0.1},
                                    {"zipf_exponent": 0.0}])
    def test_bad_params(self, kw):
        with pytest.raises(DataError):
            generate_synthetic(n_items=50, n_sessions=50, **kw)


class TestDump:
    def test_round_trip(self, tmp_path, tiny_dataset):
        tiny_dataset.save(tmp_path / "ds")
        back = Dataset.load(tmp_path / "ds")
        assert back.catalog.to_json() == tiny_dataset.catalog.to_json()
        assert [s.to_json() for s in back.sessions] == [s.to_json() for s in tiny_dataset.sessions]
        assert back.meta == tiny_dataset.meta

    def test_field_names(self, tmp_path, tiny_dataset):
        import json
        tiny_dataset.save(tmp_path / "ds")
        cat = json.loads((tmp_path / "ds" / "catalog.json").read_text())
        assert set(cat) == {"items", "frequency", "is_head", "attribute_of", "attributes"}
        line = json.loads((tmp_path / "ds" / "sessions.jsonl").read_text().splitlines()[0])
        assert set(line) == {"session_id", "split", "items", "label"}
