"""Session log ingestion, preprocessing and the synthetic long-tail generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SESSION_HEADER = ["session_id", "timestamp", "item_id"]
ATTRIBUTE_HEADER = ["item_id", "attribute_id"]


class DataError(ValueError):
    """Malformed input file or a dataset that cannot be built."""


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    item_id: str
    timestamp: int
    attribute_id: str | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass
class Catalog:
    items: list[str]  # raw item id per dense index
    frequency: np.ndarray
    is_head: np.ndarray
    attribute_of: np.ndarray
    attributes: list[str]  # raw attribute id per attribute index

    @property
    def m(self) -> int:
        return len(self.items)

    @property
    def k(self) -> int:
        return len(self.attributes)

    @property
    def tail_items(self) -> np.ndarray:
        return np.flatnonzero(~self.is_head)

    def to_json(self) -> dict:
        return {
            "items": list(self.items),
            "frequency": [int(f) for f in self.frequency],
            "is_head": [bool(h) for h in self.is_head],
            "attribute_of": [int(a) for a in self.attribute_of],
            "attributes": list(self.attributes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Catalog:
        return cls(
            items=list(obj["items"]),
            frequency=np.asarray(obj["frequency"], dtype=np.int64),
            is_head=np.asarray(obj["is_head"], dtype=bool),
            attribute_of=np.asarray(obj["attribute_of"], dtype=np.int64),
            attributes=list(obj["attributes"]),
        )


@dataclass
class Session:
    items: list[int]
    label: int
    session_id: str
    split: str  # "train" | "test"

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "split": self.split,
                "items": list(self.items), "label": self.label}


@dataclass
class Dataset:
    catalog: Catalog
    sessions: list[Session]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Session]:
        return [s for s in self.sessions if s.split == name]

    @property
    def train(self) -> list[Session]:
        return self.split("train")

    @property
    def test(self) -> list[Session]:
        return self.split("test")

    def sequences(self, split: str = "train") -> list[list[int]]:
        """Full item sequences, rebuilt from the longest augmented prefix of each session."""
        longest: dict[str, Session] = {}
        order: list[str] = []
        for s in self.split(split):
            if s.session_id not in longest:
                order.append(s.session_id)
                longest[s.session_id] = s
            elif len(s.items) > len(longest[s.session_id].items):
                longest[s.session_id] = s
        return [longest[sid].items + [longest[sid].label] for sid in order]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "catalog.json", "w") as fh:
            json.dump(self.catalog.to_json(), fh, indent=1, sort_keys=True)
        with open(directory / "sessions.jsonl", "w") as fh:
            for s in self.sessions:
                fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
        with open(directory / "meta.json", "w") as fh:
            json.dump(self.meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory: str | Path) -> Dataset:
        directory = Path(directory)
        for name in ("catalog.json", "sessions.jsonl"):
            if not (directory / name).exists():
                raise FileNotFoundError(directory / name)
        with open(directory / "catalog.json") as fh:
            catalog = Catalog.from_json(json.load(fh))
        sessions = []
        with open(directory / "sessions.jsonl") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    sessions.append(Session(obj["items"], obj["label"], obj["session_id"], obj["split"]))
        meta = {}
        if (directory / "meta.json").exists():
            with open(directory / "meta.json") as fh:
                meta = json.load(fh)
        return cls(catalog, sessions, meta)


# -- file ingestion ---------------------------------------------------------

def _read_rows(path: str | Path, header: list[str]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [c.strip() for c in first] != header:
            raise DataError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            row = [c.strip() for c in row]
            if row == header:
                raise DataError(f"{path}:{lineno}: duplicate header")
            if len(row) != len(header) or not all(row):
                raise DataError(f"{path}:{lineno}: expected {len(header)} non-empty fields, got {row}")
            yield lineno, row


def load_sessions(path: str | Path) -> list[RawEvent]:
    """Parse a ``session_id,timestamp,item_id`` CSV into events, in file order."""
    events = []
    for lineno, (sid, ts, item) in _read_rows(path, SESSION_HEADER):
        try:
            timestamp = int(ts)
        except ValueError:
            raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
        if timestamp < 0:
            raise DataError(f"{path}:{lineno}: negative timestamp {timestamp}")
        events.append(RawEvent(sid, item, timestamp))
    return events


def load_attributes(path: str | Path) -> dict[str, str]:
    """Parse ``item_id,attribute_id`` rows; the first attribute seen for an item wins."""
    mapping: dict[str, str] = {}
    for _, (item, attr) in _read_rows(path, ATTRIBUTE_HEADER):
        mapping.setdefault(item, attr)
    return mapping


def write_sessions_csv(events: list[RawEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SESSION_HEADER)
        for e in events:
            w.writerow([e.session_id, e.timestamp, e.item_id])


def write_attributes_csv(attributes: dict[str, str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTRIBUTE_HEADER)
        for item, attr in attributes.items():
            w.writerow([item, attr])


# -- preprocessing ----------------------------------------------------------

def augment_split(items: list[int], session_id: str = "", split: str = "train",
                  min_prefix_len: int = 1) -> list[Session]:
    """Expand ``[s1..sn]`` into prefix/next-item instances ``([s1..s_{t}], s_{t+1})``."""
    if len(items) < 2:
        raise DataError(f"session needs at least 2 items to split, got {len(items)}")
    return [Session(list(items[:t]), items[t], session_id, split)
            for t in range(max(1, min_prefix_len), len(items))]


def split_head_tail(frequencies, pareto: float = 0.2) -> np.ndarray:
    """Flag the ``ceil(pareto * m)`` most frequent items as head.

    Ties in frequency go to the lower item index.
    """
    freq = np.asarray(frequencies)
    if freq.size == 0:
        raise DataError("need at least one item")
    if not 0 < pareto < 1:
        raise DataError(f"pareto must lie in (0, 1), got {pareto}")
    n_head = math.ceil(pareto * freq.size)
    # lexsort: last key is primary -> descending frequency, then ascending index
    order = np.lexsort((np.arange(freq.size), -freq))
    is_head = np.zeros(freq.size, dtype=bool)
    is_head[order[:n_head]] = True
    return is_head


def _group_sessions(events: list[RawEvent]) -> list[tuple[str, list[RawEvent]]]:
    groups: dict[str, list[RawEvent]] = {}
    for e in events:
        groups.setdefault(e.session_id, []).append(e)
    out = []
    for sid, evs in groups.items():
        # sorted() is stable: equal timestamps keep file order
        out.append((sid, sorted(evs, key=lambda e: e.timestamp)))
    out.sort(key=lambda g: (g[1][-1].timestamp, g[1][0].timestamp))
    return out


def preprocess(events: list[RawEvent], attributes: dict[str, str] | None = None,
               min_item_freq: int = 5, min_session_len: int = 2, test_fraction: float = 0.1,
               pareto: float = 0.2, min_prefix_len: int = 1) -> Dataset:
    """Filter, split and augment raw events into a :class:`Dataset`.

    Sessions are split temporally first (the latest ``test_fraction`` by end
    time go to test), then item filtering is iterated to a fixed point on the
    training split only. Test sessions are restricted to catalog items, so
    nothing in the test split can change the catalog.
    """
    if min_item_freq < 1:
        raise DataError(f"min_item_freq must be >= 1, got {min_item_freq}")
    if min_session_len < 2:
        raise DataError(f"min_session_len must be >= 2, got {min_session_len}")
    if not 0 < test_fraction < 1:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    attributes = attributes or {}

    grouped = [(sid, [e.item_id for e in evs]) for sid, evs in _group_sessions(events)]
    grouped = [(sid, seq) for sid, seq in grouped if len(seq) >= min_session_len]
    n_test = int(math.floor(test_fraction * len(grouped)))
    train_raw = grouped[: len(grouped) - n_test]
    test_raw = grouped[len(grouped) - n_test:]

    while True:
        counts: dict[str, int] = {}
        for _, seq in train_raw:
            for item in seq:
                counts[item] = counts.get(item, 0) + 1
        keep = {i for i, c in counts.items() if c >= min_item_freq}
        filtered = [(sid, [i for i in seq if i in keep]) for sid, seq in train_raw]
        filtered = [(sid, seq) for sid, seq in filtered if len(seq) >= min_session_len]
        if filtered == train_raw:
            break
        train_raw = filtered
    if not train_raw:
        raise DataError("every session was filtered out; nothing to train on")

    index: dict[str, int] = {}
    for _, seq in train_raw:
        for item in seq:
            index.setdefault(item, len(index))
    items = list(index)
    frequency = np.zeros(len(items), dtype=np.int64)
    for _, seq in train_raw:
        for item in seq:
            frequency[index[item]] += 1

    attr_index: dict[str, int] = {}
    attribute_of = np.empty(len(items), dtype=np.int64)
    attr_names: list[str] = []
    for i, item in enumerate(items):
        if item in attributes:
            key = "a:" + attributes[item]
            name = attributes[item]
        else:
            key = "solo:" + item
            name = f"__item_{item}"
        if key not in attr_index:
            attr_index[key] = len(attr_names)
            attr_names.append(name)
        attribute_of[i] = attr_index[key]

    catalog = Catalog(items, frequency, split_head_tail(frequency, pareto), attribute_of, attr_names)

    sessions: list[Session] = []
    for sid, seq in train_raw:
        sessions.extend(augment_split([index[i] for i in seq], sid, "train", min_prefix_len))
    for sid, seq in test_raw:
        seq = [index[i] for i in seq if i in index]
        if len(seq) >= min_session_len:
            sessions.extend(augment_split(seq, sid, "test", min_prefix_len))

    meta = {"source": "preprocess", "min_item_freq": min_item_freq, "min_session_len": min_session_len,
            "test_fraction": test_fraction, "pareto": pareto, "min_prefix_len": min_prefix_len,
            "n_events": len(events)}
    return Dataset(catalog, sessions, meta)


# -- synthetic data -----------------------------------------------------------

def generate_synthetic_events(n_items: int = 1000, n_sessions: int = 10000, n_latent_intents: int = 8,
                              zipf_exponent: float = 1.2, noise_rate: float = 0.2, mean_len: float = 5.0,
                              seed: int = 0, attrs_per_intent: int = 1):
    """Raw events plus an item->attribute map with planted latent intents.

    Returns ``(events, attributes, intent_of_item)``. Item popularity follows a
    global Zipf law over a random rank permutation; each latent intent owns a
    random slice of items and ``attrs_per_intent`` attributes.
    """
    if n_latent_intents < 2:
        raise DataError(f"n_latent_intents must be >= 2, got {n_latent_intents}")
    if not 0 <= noise_rate < 0.5:
        raise DataError(f"noise_rate must lie in [0, 0.5), got {noise_rate}")
    if zipf_exponent <= 0:
        raise DataError(f"zipf_exponent must be > 0, got {zipf_exponent}")
    if n_items < n_latent_intents * attrs_per_intent:
        raise DataError("n_items must cover every planted attribute")
    if mean_len < 2:
        raise DataError(f"mean_len must be >= 2, got {mean_len}")
    if n_sessions < 1:
        raise DataError("n_sessions must be >= 1")

    rng = np.random.default_rng(seed)
    popularity = np.arange(1, n_items + 1, dtype=np.float64) ** -zipf_exponent
    popularity = popularity[rng.permutation(n_items)]
    intent_of = np.arange(n_items) % n_latent_intents
    intent_of = intent_of[rng.permutation(n_items)]
    attr_of = np.empty(n_items, dtype=np.int64)
    members = []
    for c in range(n_latent_intents):
        idx = np.flatnonzero(intent_of == c)
        members.append(idx)
        sub = np.arange(idx.size) % attrs_per_intent
        attr_of[idx] = c * attrs_per_intent + rng.permutation(sub)
    probs = [popularity[idx] / popularity[idx].sum() for idx in members]
    noise_pools, noise_probs = [], []
    for c in range(n_latent_intents):
        idx = np.flatnonzero(intent_of != c)
        noise_pools.append(idx)
        noise_probs.append(popularity[idx] / popularity[idx].sum())

    events: list[RawEvent] = []
    t = 0
    for s in range(n_sessions):
        c = int(rng.integers(n_latent_intents))
        length = 2 + int(rng.poisson(mean_len - 2))
        seq = rng.choice(members[c], size=length, p=probs[c])
        # the final position is the session's label and stays in-intent
        noisy = rng.random(length - 1) < noise_rate
        if noisy.any():
            seq[:-1][noisy] = rng.choice(noise_pools[c], size=int(noisy.sum()), p=noise_probs[c])
        for item in seq:
            events.append(RawEvent(f"s{s}", f"i{int(item)}", t))
            t += 1
    attributes = {f"i{i}": f"a{int(attr_of[i])}" for i in range(n_items)}
    return events, attributes, intent_of


def generate_synthetic(n_items: int = 1000, n_sessions: int = 10000, n_latent_intents: int = 8,
                       zipf_exponent: float = 1.2, noise_rate: float = 0.2, mean_len: float = 5.0,
                       seed: int = 0, attrs_per_intent: int = 1, test_fraction: float = 0.1,
                       min_item_freq: int = 1) -> Dataset:
    events, attributes, intent_of = generate_synthetic_events(
        n_items, n_sessions, n_latent_intents, zipf_exponent, noise_rate, mean_len, seed, attrs_per_intent)
    ds = preprocess(events, attributes, min_item_freq=min_item_freq, min_session_len=2,
                    test_fraction=test_fraction)
    ds.meta.update({
        "source": "synthetic", "n_items": n_items, "n_sessions": n_sessions,
        "n_latent_intents": n_latent_intents, "zipf_exponent": zipf_exponent,
        "noise_rate": noise_rate, "mean_len": mean_len, "seed": seed,
        "attrs_per_intent": attrs_per_intent,
        "latent_intent_of_item": [int(intent_of[int(raw[1:])]) for raw in ds.catalog.items],
    })
    return ds
