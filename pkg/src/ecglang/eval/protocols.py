"""Downstream protocols on a trained model: zero-shot, probing, transfer, retrieval, captioning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import functional as F
from ..data.synth import ABNORMALITIES, ECGRecord, NORMAL_SUMMARY, ABNORMAL_SUMMARY, parse_class
from ..data.tokenizer import BOS_ID, TextReport, Vocab, strip_specials, tokenize
from ..model import MultiScaleModel, collate_signals, collate_text, greedy_decode
from ..nn import Linear
from ..tensor import Tensor, no_grad
from .metrics import UndefinedMetricError, bleu, macro_auroc, recall_at_k, rouge_l

log = logging.getLogger(__name__)

PROMPT_TABLE_VERSION = 1
MIN_PROMPT_WORDS = 4
_FILLER = "ecg"
EMBED_BATCH = 64


# ---------------------------------------------------------------------------
# prompts and label matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTable:
    """Class name to prompt texts.  Usually one prompt per class; several are averaged."""

    prompts: Mapping[str, tuple[str, ...]]
    version: int = PROMPT_TABLE_VERSION

    def __post_init__(self):
        for cls, texts in self.prompts.items():
            if not texts:
                raise ValueError(f"class {cls} has no prompt")
            for t in texts:
                if len(t.split()) < MIN_PROMPT_WORDS:
                    raise ValueError(f"prompt {t!r} for {cls} has fewer than {MIN_PROMPT_WORDS} words")

    @property
    def classes(self) -> list[str]:
        return list(self.prompts)

    @classmethod
    def default(cls, classes: Sequence[str], ensemble: bool = False) -> "PromptTable":
        """Fixed prompts built from the first report phrasing of each code.

        With ``ensemble`` every phrasing becomes a prompt and their embeddings are averaged.
        """
        table = {}
        for name in classes:
            codes = parse_class(name)
            summary = NORMAL_SUMMARY if codes == ("NORM",) else ABNORMAL_SUMMARY
            n_var = len(ABNORMALITIES[codes[0]].sentence_templates) if ensemble else 1
            texts = []
            for v in range(n_var):
                words = " ".join(ABNORMALITIES[c].sentence_templates[v] for c in codes) + " " + summary
                while len(words.split()) < MIN_PROMPT_WORDS:
                    words += " " + _FILLER
                texts.append(words)
            table[name] = tuple(texts)
        return cls(table)


def class_membership(labels: frozenset, cls: str) -> bool:
    return set(parse_class(cls)) <= set(labels)


def label_matrix(label_sets: Sequence[frozenset], classes: Sequence[str]) -> np.ndarray:
    return np.array([[class_membership(ls, c) for c in classes] for ls in label_sets], dtype=bool)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def encode_records(model: MultiScaleModel, records: Sequence[ECGRecord],
                   batch_size: int = EMBED_BATCH) -> dict[str, np.ndarray]:
    """Global embedding ``X_g`` and pre-projection beat mean ``feat`` for every record."""
    was_training = model.training
    model.eval()
    xs, feats = [], []
    try:
        with no_grad():
            for i in range(0, len(records), batch_size):
                out = model.forward_ecg(collate_signals(records[i:i + batch_size]))
                xs.append(out["X_g"].data)
                feats.append(out["B"].data.mean(axis=1))
    finally:
        model.train(was_training)
    return {"X_g": np.concatenate(xs), "feat": np.concatenate(feats)}


def encode_texts(model: MultiScaleModel, reports: Sequence[TextReport],
                 batch_size: int = EMBED_BATCH) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(reports), batch_size):
                batch = collate_text(reports[i:i + batch_size], model.cfg.max_text_len)
                out.append(model.forward_text(batch, sentences=False)["T_g"].data)
    finally:
        model.train(was_training)
    return np.concatenate(out)


def extract_features(model: MultiScaleModel, records: Sequence[ECGRecord]) -> np.ndarray:
    """Mean over beat tokens of the beat embeddings before projection, shape ``(N, D)``."""
    return encode_records(model, records)["feat"]


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n <= F.COSINE_EPS):
        raise F.NumericError("embedding norm below cosine floor")
    return x / n


# ---------------------------------------------------------------------------
# zero-shot
# ---------------------------------------------------------------------------


def prompt_embeddings(model: MultiScaleModel, table: PromptTable, vocab: Vocab) -> np.ndarray:
    """One unit vector per class; ensembles average unit prompt embeddings and renormalize."""
    rows = []
    for cls in table.classes:
        emb = _unit(encode_texts(model, [tokenize(t, vocab) for t in table.prompts[cls]]))
        rows.append(emb.mean(axis=0))
    return _unit(np.stack(rows))


def zero_shot_scores(model: MultiScaleModel, records: Sequence[ECGRecord], table: PromptTable,
                     vocab: Vocab, x_g: np.ndarray | None = None) -> np.ndarray:
    """Cosine between each record's global embedding and each class prompt, ``(N, C)``."""
    if x_g is None:
        x_g = encode_records(model, records)["X_g"]
    return cosine_scores(x_g, prompt_embeddings(model, table, vocab))


def cosine_scores(x: np.ndarray, prompts: np.ndarray) -> np.ndarray:
    return _unit(np.asarray(x, dtype=np.float64)) @ _unit(np.asarray(prompts, dtype=np.float64)).T


def zero_shot_classify(model: MultiScaleModel, records: Sequence[ECGRecord], table: PromptTable,
                       vocab: Vocab) -> tuple[float, dict[str, float]]:
    """Macro AUROC of zero-shot scores against class membership."""
    scores = zero_shot_scores(model, records, table, vocab)
    labels = label_matrix([r.labels for r in records], table.classes)
    return macro_auroc(scores, labels, table.classes)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    auroc: float
    per_class: dict[str, float]
    n_train: int
    epochs_run: int
    skipped: list[str] = field(default_factory=list)


def stratified_subsample(label_keys: Sequence[str], ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping ``round(ratio * n_c)`` (at least 1) of every stratum, in original order."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    keys = np.asarray(label_keys)
    chosen = []
    for k in sorted(set(label_keys)):
        idx = np.flatnonzero(keys == k)
        m = max(1, int(math.floor(ratio * len(idx) + 0.5)))
        chosen.append(rng.choice(idx, size=m, replace=False))
    return np.sort(np.concatenate(chosen))


def _probe_scores(layer: Linear, X: np.ndarray) -> np.ndarray:
    with no_grad():
        return layer(Tensor(X)).data


def linear_probe(train_X: np.ndarray, train_Y: np.ndarray, val_X: np.ndarray, val_Y: np.ndarray,
                 test_X: np.ndarray, test_Y: np.ndarray, class_names: Sequence[str], ratio: float = 1.0,
                 seed: int = 0, epochs: int = 50, patience: int = 5, lr: float = 1e-3,
                 max_batch: int = 128, return_layer: bool = False):
    """Train one linear layer with per-class BCE on frozen features; report test macro AUROC.

    Subsampling is stratified by label combination.  The weights at the best
    validation AUROC are used for the test score.
    """
    from ..training import AdamW

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    train_Y = np.asarray(train_Y, dtype=bool)
    keys = ["".join("1" if v else "0" for v in row) for row in train_Y]
    idx = stratified_subsample(keys, ratio, rng)
    X, Y = np.asarray(train_X, dtype=np.float32)[idx], train_Y[idx]
    present = Y.any(axis=0) & ~Y.all(axis=0)
    skipped = [c for c, ok in zip(class_names, present) if not ok]
    for c in skipped:
        log.info("probe: class %s has a single label value in the subsample; skipped", c)
    cols = np.flatnonzero(present)
    if not present.any():
        raise UndefinedMetricError("no class has both labels in the probe subsample")

    layer = Linear(X.shape[1], Y.shape[1], np.random.default_rng(0))
    layer.weight.data[:] = 0.0
    params = dict(layer.named_parameters())
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    batch = min(max_batch, len(X))
    names = list(class_names)
    val_Y = np.asarray(val_Y, dtype=bool)

    best, best_state, bad, epoch = -np.inf, layer.state_dict(), 0, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch):
            sel = order[s:s + batch]
            logits = layer(Tensor(X[sel]))
            loss = F.bce_with_logits(logits[:, cols], Y[sel][:, cols].astype(np.float32))
            opt.zero_grad()
            loss.backward(list(params.values()))
            opt.step(lr)
        try:
            val, _ = macro_auroc(_probe_scores(layer, val_X)[:, present], val_Y[:, present],
                                 [n for n, ok in zip(names, present) if ok])
        except UndefinedMetricError:
            val = 0.0
        if val > best:
            best, best_state, bad = val, layer.state_dict(), 0
        else:
            bad += 1
            if bad >= patience:
                break
    layer.load_state_dict(best_state)
    scores = _probe_scores(layer, np.asarray(test_X, dtype=np.float32))
    test_Y = np.asarray(test_Y, dtype=bool)
    kept = [n for n, ok in zip(names, present) if ok]
    value, per = macro_auroc(scores[:, present], test_Y[:, present], kept)
    res = ProbeResult(value, per, len(X), epoch, skipped)
    return (res, layer) if return_layer else res


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelMapping:
    """Source class to the set of target classes it corresponds to (empty = excluded)."""

    mapping: Mapping[str, frozenset]

    @classmethod
    def identity(cls, classes: Sequence[str]) -> "LabelMapping":
        return cls({c: frozenset({c}) for c in classes})

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[str]]) -> "LabelMapping":
        return cls({k: frozenset(v) for k, v in d.items()})

    def to_dict(self) -> dict[str, list[str]]:
        return {k: sorted(v) for k, v in self.mapping.items()}

    def mapped_classes(self, source_classes: Sequence[str]) -> list[str]:
        return [c for c in source_classes if self.mapping.get(c)]

    def relabel(self, label_sets: Sequence[frozenset], source_classes: Sequence[str]) -> np.ndarray:
        """Boolean ``(N, C_mapped)``; a record is positive when any mapped target class holds."""
        cols = self.mapped_classes(source_classes)
        return np.array([[any(class_membership(ls, t) for t in sorted(self.mapping[c])) for c in cols]
                         for ls in label_sets], dtype=bool).reshape(len(label_sets), len(cols))


def transfer_eval(scores: np.ndarray, source_classes: Sequence[str], target_labels: Sequence[frozenset],
                  mapping: LabelMapping) -> tuple[float, dict[str, float]]:
    """Macro AUROC of source-class scores against target labels rewritten through ``mapping``.

    ``scores`` come from zero-shot prompts or a probe trained on the source data,
    one column per source class.  Unmapped classes are dropped.
    """
    cols = mapping.mapped_classes(source_classes)
    if not cols:
        raise ValueError("label mapping leaves no class to evaluate")
    keep = [list(source_classes).index(c) for c in cols]
    labels = mapping.relabel(target_labels, source_classes)
    return macro_auroc(np.asarray(scores)[:, keep], labels, cols)


# ---------------------------------------------------------------------------
# patient retrieval
# ---------------------------------------------------------------------------


def patient_recall_at_k(model: MultiScaleModel, record_pairs: Sequence[tuple[ECGRecord, ECGRecord]],
                        ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """Rank every second recording against each first one by global-embedding cosine."""
    if len(record_pairs) < 2:
        raise ValueError("patient retrieval needs at least 2 patients")
    a = encode_records(model, [p[0] for p in record_pairs])["X_g"]
    b = encode_records(model, [p[1] for p in record_pairs])["X_g"]
    return recall_at_k(a, b, ks)


# ---------------------------------------------------------------------------
# captioning
# ---------------------------------------------------------------------------


def generate_reports(model: MultiScaleModel, records: Sequence[ECGRecord], max_len: int | None = None,
                     batch_size: int = EMBED_BATCH) -> list[list[int]]:
    """Greedy token sequences (BOS first, EOS last when reached) for every record."""
    max_len = model.cfg.max_text_len if max_len is None else max_len
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(records), batch_size):
                e = model.forward_ecg(collate_signals(records[i:i + batch_size]))
                out += greedy_decode(model, e["E_tilde"], max_len, BOS_ID)
    finally:
        model.train(was_training)
    return out


def generate_report(model: MultiScaleModel, record: ECGRecord, max_len: int | None = None) -> list[int]:
    return generate_reports(model, [record], max_len)[0]


@dataclass
class CaptionScores:
    bleu1: float
    bleu4: float
    rouge_l: float
    exact_match: float
    n: int


def caption_scores(generated: Sequence[Sequence[int]], references: Sequence[TextReport]) -> CaptionScores:
    """Mean sentence-level scores over word tokens; exact match compares full sequences."""
    b1, b4, rl, em = [], [], [], []
    for gen, ref in zip(generated, references, strict=True):
        cand = strip_specials(gen)
        truth = strip_specials(ref.token_ids)
        b1.append(bleu(cand, [truth], 1))
        b4.append(bleu(cand, [truth], 4))
        rl.append(rouge_l(cand, truth))
        em.append(list(gen) == list(ref.token_ids))
    return CaptionScores(float(np.mean(b1)), float(np.mean(b4)), float(np.mean(rl)),
                         float(np.mean(em)), len(b1))
