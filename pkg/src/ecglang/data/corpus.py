"""Corpus assembly, preprocessing filters and the on-disk layout."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .synth import (
    ECGRecord,
    Pair,
    class_name,
    default_vocab,
    parse_class,
    report_text,
    synth_ecg,
)
from .tokenizer import TextReport, Vocab, tokenize

DEFAULT_CLASS_MIX = {"NORM": 0.25, "AFIB": 0.25, "LBBB": 0.25, "STE": 0.25}
SPLITS = ("train", "val", "test")
MIN_REPORT_TOKENS = 4
CORPUS_FORMAT_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    pairs: list[Pair]
    splits: dict[str, list[str]]
    vocab: Vocab
    class_mix: dict[str, float]
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {p.record.record_id: p for p in self.pairs}

    def split(self, name: str) -> list[Pair]:
        return [self._by_id[i] for i in self.splits[name] if i in self._by_id]

    @property
    def classes(self) -> list[str]:
        return list(self.class_mix)

    def filtered(self) -> "Corpus":
        kept = filter_pairs(self.pairs)
        ids = {p.record.record_id for p in kept}
        splits = {k: [i for i in v if i in ids] for k, v in self.splits.items()}
        return Corpus(kept, splits, self.vocab, self.class_mix, self.seed, dict(self.config))


def allocate_counts(n: int, class_mix: dict[str, float]) -> dict[str, int]:
    """Largest-remainder rounding of ``n * proportion``; ties go to earlier classes."""
    total = sum(class_mix.values())
    if not math.isclose(total, 1.0, abs_tol=1e-9):
        raise CorpusError(f"class_mix sums to {total}, expected 1")
    if any(v < 0 for v in class_mix.values()):
        raise CorpusError("class_mix has negative proportions")
    raw = {k: n * v for k, v in class_mix.items()}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    order = sorted(class_mix, key=lambda k: -(raw[k] - counts[k]))  # stable for ties
    for k in order[:left]:
        counts[k] += 1
    return counts


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_corpus(n: int, class_mix: dict[str, float] | None = None, seed: int = 0, *,
                n_leads: int = 4, fs: int = 100, duration_s: float = 10.0,
                noise_sigma: float = 0.02, corrupt_nan: float = 0.0,
                corrupt_short: float = 0.0, corrupt_missing: float = 0.0) -> Corpus:
    """Deterministic paired corpus with an 80/10/10 split stratified by label set.

    The ``corrupt_*`` fractions inject filterable junk and exist only to
    exercise :func:`filter_pairs`.
    """
    if n < 1:
        raise CorpusError("n must be >= 1")
    class_mix = dict(DEFAULT_CLASS_MIX if class_mix is None else class_mix)
    class_mix = {class_name(parse_class(k)): v for k, v in class_mix.items()}
    counts = allocate_counts(n, class_mix)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    labels = [k for k, c in counts.items() for _ in range(c)]
    rng.shuffle(labels)
    vocab = default_vocab()

    pairs = []
    for i, cls in enumerate(labels):
        s = record_seed(seed, i)
        rid = f"r{i:06d}"
        rec = synth_ecg(parse_class(cls), s, n_leads=n_leads, fs=fs, duration_s=duration_s,
                        noise_sigma=noise_sigma, patient_id=f"p{i:06d}", record_id=rid)
        text = report_text(parse_class(cls), s)
        pairs.append(Pair(rec, tokenize(text, vocab)))

    splits = {k: [] for k in SPLITS}
    for cls in class_mix:
        idx = [i for i, c in enumerate(labels) if c == cls]
        n_c = len(idx)
        n_val = int(math.floor(0.1 * n_c + 0.5))
        n_test = int(math.floor(0.1 * n_c + 0.5))
        n_train = n_c - n_val - n_test
        splits["train"] += idx[:n_train]
        splits["val"] += idx[n_train:n_train + n_val]
        splits["test"] += idx[n_train + n_val:]
    split_ids = {k: [pairs[i].record.record_id for i in sorted(v)] for k, v in splits.items()}

    if corrupt_nan or corrupt_short or corrupt_missing:
        pairs = _corrupt(pairs, seed, corrupt_nan, corrupt_short, corrupt_missing, vocab)

    config = {"n": n, "n_leads": n_leads, "fs": fs, "duration_s": duration_s,
              "noise_sigma": noise_sigma}
    return Corpus(pairs, split_ids, vocab, class_mix, seed, config)


def _corrupt(pairs, seed, frac_nan, frac_short, frac_missing, vocab) -> list[Pair]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(8,)))
    out = []
    for rec, rep in pairs:
        u = rng.random(3)
        if u[0] < frac_nan:
            sig = rec.signal.copy()
            sig[0, int(rng.integers(sig.shape[1]))] = np.nan
            rec = ECGRecord(sig, rec.sampling_rate_hz, rec.duration_s, rec.labels,
                            rec.patient_id, rec.record_id)
        if u[1] < frac_short:
            rep = tokenize("sinus rhythm.", vocab)
        if u[2] < frac_missing:
            rep = None
        out.append(Pair(rec, rep))
    return out


def filter_pairs(pairs: Sequence[Pair]) -> list[Pair]:
    """Drop pairs with empty/NaN signals, reports under four word tokens, or no report."""
    kept = []
    for rec, rep in pairs:
        sig = rec.signal
        if sig is None or sig.size == 0 or not np.all(np.isfinite(sig)):
            continue
        if rep is None or rep.n_words < MIN_REPORT_TOKENS:
            continue
        kept.append(Pair(rec, rep))
    return kept


def make_patient_pairs(n_patients: int, seed: int, codes_cycle: Sequence[str] = tuple(DEFAULT_CLASS_MIX),
                       **synth_kwargs) -> list[tuple[ECGRecord, ECGRecord]]:
    """Two recordings per patient: shared morphology, independent noise and rhythm draws."""
    out = []
    for i in range(n_patients):
        codes = parse_class(codes_cycle[i % len(codes_cycle)])
        ps = record_seed(seed, 10_000_000 + i)
        pid = f"patient{i:05d}"
        a = synth_ecg(codes, record_seed(ps, 0), patient_seed=ps, patient_id=pid,
                      record_id=f"{pid}a", **synth_kwargs)
        b = synth_ecg(codes, record_seed(ps, 1), patient_seed=ps, patient_id=pid,
                      record_id=f"{pid}b", **synth_kwargs)
        out.append((a, b))
    return out


# ---------------------------------------------------------------------------
# disk layout: <root>/<split>/<id>.f32 + <id>.json, <root>/corpus.json
# ---------------------------------------------------------------------------


def _dump_json(obj, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def write_corpus(corpus: Corpus, root: str | os.PathLike) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for split in SPLITS:
        d = root / split
        d.mkdir(exist_ok=True)
        for rec, rep in corpus.split(split):
            rid = rec.record_id
            rec.signal.astype("<f4").tofile(d / f"{rid}.f32")
            _dump_json({
                "id": rid,
                "leads": rec.n_leads,
                "samples": rec.n_samples,
                "sampling_rate_hz": rec.sampling_rate_hz,
                "duration_s": rec.duration_s,
                "labels": sorted(rec.labels),
                "patient_id": rec.patient_id,
                "report_text": rep.raw_text if rep is not None else None,
            }, d / f"{rid}.json")
            records.append({"id": rid, "split": split})
    _dump_json({
        "format_version": CORPUS_FORMAT_VERSION,
        "seed": corpus.seed,
        "class_mix": corpus.class_mix,
        "vocab": list(corpus.vocab.tokens),
        "splits": corpus.splits,
        "config": corpus.config,
        "records": records,
    }, root / "corpus.json")
    return root


def read_corpus(root: str | os.PathLike) -> Corpus:
    root = Path(root)
    manifest_path = root / "corpus.json"
    if not manifest_path.exists():
        raise CorpusError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CORPUS_FORMAT_VERSION:
        raise CorpusError(f"unsupported corpus format {manifest.get('format_version')}")
    vocab = Vocab(tuple(manifest["vocab"]))
    pairs = []
    for entry in manifest["records"]:
        d = root / entry["split"]
        meta = json.loads((d / f"{entry['id']}.json").read_text(encoding="utf-8"))
        sig = np.fromfile(d / f"{entry['id']}.f32", dtype="<f4")
        sig = sig.reshape(meta["leads"], meta["samples"]).astype(np.float32)
        rec = ECGRecord(sig, int(meta["sampling_rate_hz"]), float(meta["duration_s"]),
                        frozenset(meta["labels"]), meta["patient_id"], meta["id"])
        text = meta["report_text"]
        rep: TextReport | None = tokenize(text, vocab) if text is not None else None
        pairs.append(Pair(rec, rep))
    return Corpus(pairs, {k: list(v) for k, v in manifest["splits"].items()}, vocab,
                  dict(manifest["class_mix"]), int(manifest["seed"]), dict(manifest.get("config", {})))
