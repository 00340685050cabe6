"""Command-line entry point: ``ecglang {synth,mlm,pretrain,eval,ablate}``.

Every command writes ``manifest.json`` under ``--out`` before doing any work.
Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .data.corpus import SPLITS, CorpusError, make_corpus, read_corpus, write_corpus
from .data.corpus import make_patient_pairs
from .data.synth import CompatibilityError, class_name, parse_class
from .eval.metrics import UndefinedMetricError
from .eval.protocols import (
    LabelMapping,
    PromptTable,
    caption_scores,
    encode_records,
    generate_reports,
    label_matrix,
    linear_probe,
    patient_recall_at_k,
    transfer_eval,
    zero_shot_classify,
    zero_shot_scores,
)
from .eval.results import EvalResult, export_embeddings, write_results
from .model import ModelConfig
from .tensor import NumericError
from .training import TrainConfig, TrainingAborted, model_from_checkpoint, pretrain, text_mlm_pretrain

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STREAMS = ("corpus", "init", "shuffle", "probe")

log = logging.getLogger("ecglang")


class UsageError(Exception):
    pass


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for a named stream."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


def seed_streams(seed: int) -> dict[str, int]:
    return {name: derive_seed(seed, name) for name in STREAMS}


def code_hash() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def parse_class_mix(text: str) -> dict[str, float]:
    """``NORM,AFIB`` (uniform) or ``NORM=0.5,AFIB=0.5``."""
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError("empty --classes")
    try:
        if all("=" not in s for s in items):
            mix = {class_name(parse_class(s)): 1.0 / len(items) for s in items}
        else:
            mix = {}
            for s in items:
                name, _, frac = s.partition("=")
                mix[class_name(parse_class(name.strip()))] = float(frac)
    except (CompatibilityError, ValueError) as exc:
        raise UsageError(f"invalid class mix {text!r}: {exc}") from exc
    total = sum(mix.values())
    if len(mix) != len(items) or abs(total - 1.0) > 1e-9 or any(v < 0 for v in mix.values()):
        raise UsageError(f"invalid class mix {text!r}: proportions must be distinct classes summing to 1")
    return mix


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(s.strip()) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}") from exc


# ---------------------------------------------------------------------------
# config merge and manifest
# ---------------------------------------------------------------------------


def merged_configs(args, seeds: dict[str, int]) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the JSON file, then explicit flags."""
    model_d = ModelConfig().to_dict()
    train_d = TrainConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        try:
            blob = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(blob) - {"model", "train"}
        if unknown:
            raise UsageError(f"config file keys must be 'model' and/or 'train', got {sorted(unknown)}")
        model_d.update(blob.get("model", {}))
        train_d.update(blob.get("train", {}))
    model_d["init_seed"] = seeds["init"]
    train_d["seed"] = seeds["shuffle"]
    for flag, key in (("lr", "lr"), ("weight_decay", "weight_decay"), ("batch_size", "batch_size"),
                      ("max_epochs", "max_epochs"), ("max_steps", "max_steps"), ("patience", "patience")):
        value = getattr(args, flag, None)
        if value is not None:
            train_d[key] = value
    losses = getattr(args, "losses", None)
    if losses is not None:
        model_d["losses"] = losses
    try:
        return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def write_manifest(out: Path, command: str, config: dict, seeds: dict, outputs: dict,
                   wall_clock: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "code_hash": code_hash(),
        "version": __version__,
        "outputs": outputs,
        "wall_clock": wall_clock,
    }
    path = out / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


class Run:
    """Manifest bookkeeping around one command."""

    def __init__(self, out: Path, command: str, config: dict, seeds: dict, outputs: dict):
        self.out, self.command, self.config, self.seeds, self.outputs = out, command, config, seeds, outputs
        self.started = time.time()
        self.clock = {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started))}
        write_manifest(out, command, config, seeds, outputs, self.clock)

    def finish(self) -> None:
        self.clock["seconds"] = round(time.time() - self.started, 3)
        write_manifest(self.out, self.command, self.config, self.seeds, self.outputs, self.clock)


def _load_corpus(path: str):
    corpus = read_corpus(path)
    for split in ("train", "val", "test"):
        if split not in corpus.splits:
            raise CorpusError(f"corpus at {path} has no {split} split")
    return corpus


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    mix = parse_class_mix(args.classes)
    seeds = seed_streams(args.seed)
    out = Path(args.out)
    cfg = {"n": args.n, "class_mix": mix, "noise_sigma": args.noise, "leads": args.leads}
    run = Run(out, "synth", cfg, {"seed": args.seed, **seeds}, {"corpus": "corpus.json"})
    corpus = make_corpus(args.n, mix, seeds["corpus"], n_leads=args.leads, noise_sigma=args.noise).filtered()
    write_corpus(corpus, out)
    for split in SPLITS:
        log.info("%s: %d pairs", split, len(corpus.split(split)))
    run.finish()
    return EXIT_OK


def cmd_mlm(args) -> int:
    seeds = seed_streams(args.seed)
    model_cfg, train_cfg = merged_configs(args, seeds)
    out = Path(args.out)
    run = Run(out, "mlm", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
              {"seed": args.seed, **seeds}, {"checkpoint": "checkpoints/text_mlm.ckpt"})
    corpus = _load_corpus(args.corpus)
    reports = [p.report for p in corpus.split("train")]
    rows: list[dict] = []
    text_mlm_pretrain(reports, model_cfg, train_cfg, steps=args.steps,
                      out_path=out / "checkpoints" / "text_mlm.ckpt", log_rows=rows)
    with open(out / "metrics.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    run.finish()
    return EXIT_OK


def _pretrain_and_eval(args, command: str) -> int:
    seeds = seed_streams(args.seed)
    model_cfg, train_cfg = merged_configs(args, seeds)
    text_init = None
    if getattr(args, "mlm_init", None) is not None:
        path = Path(args.mlm_init)
        if not path.exists():
            raise UsageError(f"--mlm-init checkpoint {path} not found; run `ecglang mlm` first")
        text_init = load_checkpoint(path)
    out = Path(args.out)
    run = Run(out, command, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                             "corpus": str(args.corpus), "mlm_init": getattr(args, "mlm_init", None)},
              {"seed": args.seed, **seeds},
              {"metrics": "metrics.jsonl", "results": "results.csv", "checkpoint": "checkpoints/best.ckpt"})
    corpus = _load_corpus(args.corpus)
    res = pretrain(corpus, model_cfg, train_cfg, out_dir=out, text_init=text_init)
    test = corpus.split("test")
    table = PromptTable.default(corpus.classes)
    value, per = zero_shot_classify(res.model, [p.record for p in test], table, corpus.vocab)
    h = model_cfg.config_hash()
    task = f"{command}:{'+'.join(model_cfg.losses)}"
    rows = [EvalResult(task, "zeroshot_macro_auroc", value, len(test), args.seed, h)]
    rows += [EvalResult(task, f"zeroshot_auroc:{c}", v, len(test), args.seed, h) for c, v in per.items()]
    if res.checkpoint.best_val_metric is not None:
        rows.append(EvalResult(task, "best_val_zeroshot_auroc", res.checkpoint.best_val_metric,
                               len(corpus.split("val")), args.seed, h))
    write_results(rows, out / "results.csv", out / "results.jsonl")
    run.finish()
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _pretrain_and_eval(args, "pretrain")


def cmd_ablate(args) -> int:
    return _pretrain_and_eval(args, "ablate")


def cmd_eval(args) -> int:
    seeds = seed_streams(args.seed)
    out = Path(args.out)
    if args.task == "transfer" and not args.mapping:
        raise UsageError("--task transfer requires --mapping")
    ratios = _csv_list(args.ratios, float)
    ks = _csv_list(args.k, int)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    run = Run(out, f"eval:{args.task}", cfg, {"seed": args.seed, **seeds},
              {"results": "results.csv", "log": "results.jsonl"})
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    corpus = _load_corpus(args.corpus)
    h = ckpt.config_hash
    test = corpus.split(args.split)
    records = [p.record for p in test]
    rows: list[EvalResult] = []

    if args.task == "zeroshot":
        table = PromptTable.default(corpus.classes, ensemble=args.ensemble)
        value, per = zero_shot_classify(model, records, table, corpus.vocab)
        rows.append(EvalResult("zeroshot", "macro_auroc", value, len(records), args.seed, h))
        rows += [EvalResult("zeroshot", f"auroc:{c}", v, len(records), args.seed, h) for c, v in per.items()]
    elif args.task == "probe":
        classes = corpus.classes
        feats = {s: encode_records(model, [p.record for p in corpus.split(s)])["feat"] for s in SPLITS}
        labels = {s: label_matrix([p.record.labels for p in corpus.split(s)], classes) for s in SPLITS}
        for r in ratios:
            pr = linear_probe(feats["train"], labels["train"], feats["val"], labels["val"], feats["test"],
                              labels["test"], classes, ratio=r, seed=seeds["probe"])
            rows.append(EvalResult("probe", f"macro_auroc@{r:g}", pr.auroc, pr.n_train, args.seed, h))
    elif args.task == "transfer":
        mapping = LabelMapping.from_dict(json.loads(Path(args.mapping).read_text()))
        target = _load_corpus(args.target_corpus) if args.target_corpus else corpus
        t_records = [p.record for p in target.split(args.split)]
        source_classes = corpus.classes
        if args.probe:
            feats = {s: encode_records(model, [p.record for p in corpus.split(s)])["feat"]
                     for s in ("train", "val")}
            labels = {s: label_matrix([p.record.labels for p in corpus.split(s)], source_classes)
                      for s in ("train", "val")}
            t_feat = encode_records(model, t_records)["feat"]
            t_lab = label_matrix([r.labels for r in t_records], source_classes)
            _, layer = linear_probe(feats["train"], labels["train"], feats["val"], labels["val"], t_feat,
                                    t_lab, source_classes, seed=seeds["probe"], return_layer=True)
            from .tensor import Tensor, no_grad

            with no_grad():
                scores = layer(Tensor(t_feat.astype(np.float32))).data
        else:
            scores = zero_shot_scores(model, t_records, PromptTable.default(source_classes), corpus.vocab)
        value, per = transfer_eval(scores, source_classes, [r.labels for r in t_records], mapping)
        mode = "probe" if args.probe else "zeroshot"
        rows.append(EvalResult(f"transfer:{mode}", "macro_auroc", value, len(t_records), args.seed, h))
        rows += [EvalResult(f"transfer:{mode}", f"auroc:{c}", v, len(t_records), args.seed, h)
                 for c, v in per.items()]
    elif args.task == "retrieval":
        fs = corpus.config.get("fs", 100)
        pairs = make_patient_pairs(args.n_patients, seeds["probe"], corpus.classes,
                                   n_leads=corpus.config.get("n_leads", 4), fs=fs,
                                   duration_s=corpus.config.get("duration_s", 10.0),
                                   noise_sigma=corpus.config.get("noise_sigma", 0.02))
        rec = patient_recall_at_k(model, pairs, ks)
        rows += [EvalResult("retrieval", f"recall@{k}", v, len(pairs), args.seed, h) for k, v in rec.items()]
    elif args.task == "caption":
        gen = generate_reports(model, records, args.max_len)
        sc = caption_scores(gen, [p.report for p in test])
        for metric in ("bleu1", "bleu4", "rouge_l", "exact_match"):
            rows.append(EvalResult("caption", metric, getattr(sc, metric), sc.n, args.seed, h))

    if args.export_embeddings:
        x = encode_records(model, records)["X_g"]
        export_embeddings(out / "embeddings.csv", [r.record_id for r in records],
                          ["+".join(sorted(r.labels)) for r in records], x)
    write_results(rows, out / "results.csv", out / "results.jsonl")
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="corpus directory from `synth`")
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patience", type=int)


def _losses(text: str) -> list[str]:
    items = _csv_list(text)
    bad = set(items) - {"g", "lm", "local"}
    if bad or not items:
        raise argparse.ArgumentTypeError(f"--losses must be a subset of g,lm,local; got {text!r}")
    return items


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecglang", description="Multi-scale ECG-text pretraining toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired corpus")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", default="NORM,AFIB,LBBB,STE",
                   help="comma list (uniform) or NAME=fraction pairs; combine codes with '+'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--leads", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mlm", help="masked-token pretraining of the text encoder")
    _add_train_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_mlm)

    p = sub.add_parser("pretrain", help="multimodal pretraining, then zero-shot on the test split")
    _add_train_flags(p)
    p.add_argument("--mlm-init", help="text-encoder checkpoint from `mlm`")
    p.add_argument("--losses", type=_losses)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="pretrain with a subset of the objectives")
    _add_train_flags(p)
    p.add_argument("--losses", type=_losses, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="run one evaluation protocol on a checkpoint")
    p.add_argument("--task", required=True, choices=("zeroshot", "probe", "transfer", "retrieval", "caption"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--ratios", default="0.01,0.1,1.0")
    p.add_argument("--mapping", help="JSON object: source class -> list of target classes")
    p.add_argument("--target-corpus", help="corpus to transfer to (default: --corpus)")
    p.add_argument("--probe", action="store_true", help="transfer a probe trained on the source corpus")
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--n-patients", type=int, default=100)
    p.add_argument("--max-len", type=int)
    p.add_argument("--ensemble", action="store_true", help="average all phrasings per class prompt")
    p.add_argument("--export-embeddings", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ecglang: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingAborted, UndefinedMetricError, FloatingPointError) as exc:
        print(f"ecglang: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, CheckpointError, CompatibilityError, OSError, KeyError, ValueError) as exc:
        # numeric errors subclass ValueError, so they are matched above first
        print(f"ecglang: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
