"""Command-line entry point: ``fuseser <subcommand>``.

Exit codes: 0 success, 1 runtime data failure, 2 configuration failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import jsonschema
import torch

from . import __version__, gradchecks
from .augment import AugmentConfig
from .dataio import LabelVocabulary, SyntheticSpec, corpus_digest, gen_synthetic, load_dataset
from .errors import ConfigError, DataError, FuseSerError
from .evalens import PredictionSet, all_metrics, balanced_subsets, ensemble_search
from .fusion import HeadConfig, SERModel, Strategy
from .trainer import TrainConfig, load_checkpoint, manifest_hash, predict_labels, train

_OBJ = {"type": "object"}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "manifest": {"type": "string"},
        "vocab": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
        "head": {**_OBJ, "properties": {"strategy": {"enum": [s.value for s in Strategy]}}},
        "train": {
            **_OBJ,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "lr_max": {"type": "number", "minimum": 0},
                "lr_min": {"type": "number", "minimum": 0},
                "loss": {"enum": ["WEIGHTED_CE", "FOCAL"]},
                "sampler": {"enum": ["SHUFFLE", "BALANCED"]},
            },
        },
        "augment": {
            **_OBJ,
            "properties": {"apply_prob": {"type": "number", "minimum": 0, "maximum": 1}},
        },
        "synthetic": _OBJ,
        # present when a run manifest is passed back in as a config
        "tool_version": {"type": "string"},
        "vocab_digest": {"type": "string"},
        "data_digest": {"type": "string"},
    },
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: at {where}: {exc.message}") from None
    return cfg


@dataclass
class RunManifest:
    tool_version: str
    seed: int
    manifest: str
    vocab: str | None
    head: dict
    train: dict
    augment: dict
    vocab_digest: str
    data_digest: str

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        # file locations are excluded; contents enter through the digests
        d = self.to_dict()
        del d["manifest"], d["vocab"]
        return manifest_hash(d)


@dataclass
class Resolved:
    run: RunManifest
    head: HeadConfig
    train: TrainConfig
    augment: AugmentConfig
    vocab: LabelVocabulary


def _vocab_for(manifest: Path, explicit: str | None) -> LabelVocabulary:
    if explicit:
        return LabelVocabulary.load(explicit)
    sibling = manifest.parent / "vocab.json"
    return LabelVocabulary.load(sibling) if sibling.exists() else LabelVocabulary()


def resolve(args: argparse.Namespace) -> Resolved:
    cfg = load_config(args.config)
    manifest = args.manifest or cfg.get("manifest")
    if not manifest:
        raise ConfigError("no manifest given (use --manifest or the config's 'manifest')")
    manifest_path = Path(manifest)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest}")
    vocab = _vocab_for(manifest_path, cfg.get("vocab"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    head_d = dict(cfg.get("head", {}))
    if args.strategy:
        head_d["strategy"] = args.strategy
    head_d.setdefault("strategy", Strategy.SIMPLE.value)
    head_d.setdefault("num_classes", len(vocab))
    train_d = dict(cfg.get("train", {}))
    train_d["seed"] = seed
    aug_d = dict(cfg.get("augment", {}))
    aug_d.setdefault("seed", seed)
    try:
        head = HeadConfig.from_dict(head_d)
        tcfg = TrainConfig.from_dict(train_d)
        aug = AugmentConfig(**aug_d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if head.num_classes != len(vocab):
        raise ConfigError(f"head has {head.num_classes} classes, vocabulary has {len(vocab)}")
    run = RunManifest(
        tool_version=__version__,
        seed=seed,
        manifest=str(manifest_path),
        vocab=cfg.get("vocab"),
        head=head.to_dict(),
        train=tcfg.to_dict(),
        augment=aug.to_dict(),
        vocab_digest=vocab.digest(),
        data_digest=_file_sha(manifest_path),
    )
    return Resolved(run, head, tcfg, aug, vocab)


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    cfg = load_config(args.config)
    spec_d = dict(cfg.get("synthetic", {}))
    if args.seed is not None:
        spec_d["seed"] = args.seed
    if args.per_class is not None:
        spec_d["per_class"] = args.per_class
    if args.f0_only:
        spec_d["f0_only"] = True
    try:
        spec = SyntheticSpec(**spec_d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    manifest = gen_synthetic(out, spec)
    print(f"wrote {manifest}")
    print(f"corpus digest {corpus_digest(out)}")
    return 0


def cmd_train(args) -> int:
    r = resolve(args)
    out = _out_dir(args)
    dataset = load_dataset(r.run.manifest, r.vocab)
    torch.manual_seed(r.train.seed)
    model = SERModel(r.head)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(r.run.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{'epoch':>5}  {'loss':>8}  {'macro-F1':>8}  {'micro-F1':>8}")

    def show(rec):
        print(
            f"{rec['epoch']:>5}  {rec['train_loss']:>8.4f}  "
            f"{rec['val_macro_f1']:>8.3f}  {rec['val_micro_f1']:>8.3f}",
            flush=True,
        )

    res = train(model, dataset, r.train, r.augment, out, r.run.digest(), on_epoch=show)
    print(f"best epoch {res.best_epoch}: macro-F1 {res.best_macro_f1:.3f}")
    return 0


def cmd_predict(args) -> int:
    r = resolve(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    state, stored = load_checkpoint(args.checkpoint)
    if stored != r.run.digest():
        raise ConfigError("checkpoint was trained under a different run manifest")
    dataset = load_dataset(r.run.manifest, r.vocab, split=args.split)
    model = SERModel(r.head)
    model.load_state_dict(state)
    labels = predict_labels(model, dataset.examples)
    out = _out_dir(args)
    preds = PredictionSet(out.stem, {ex.id: lab for ex, lab in zip(dataset.examples, labels)})
    preds.save(out, r.vocab)
    print(f"wrote {len(labels)} predictions to {out}")
    return 0


def _refs(manifest: str, vocab: LabelVocabulary, split: str | None) -> dict[str, int]:
    return {ex.id: ex.label for ex in load_dataset(manifest, vocab, split=split).examples}


def _manifest_and_vocab(args) -> tuple[str, LabelVocabulary]:
    cfg = load_config(args.config)
    manifest = args.manifest or cfg.get("manifest")
    if not manifest:
        raise ConfigError("no manifest given (use --manifest)")
    if not Path(manifest).exists():
        raise ConfigError(f"manifest not found: {manifest}")
    return manifest, _vocab_for(Path(manifest), cfg.get("vocab"))


def cmd_evaluate(args) -> int:
    manifest, vocab = _manifest_and_vocab(args)
    refs = _refs(manifest, vocab, args.split)
    preds = PredictionSet.load(args.predictions, vocab)
    if not preds.predictions:
        raise ConfigError(f"{args.predictions}: no predictions")
    if set(preds.predictions) != set(refs):
        raise ConfigError("prediction ids do not match the evaluation split")
    ids = sorted(refs)
    m = all_metrics([refs[i] for i in ids], preds.labels_for(ids), len(vocab))
    for key in ("macro_f1", "micro_f1", "recall", "precision"):
        print(f"{key:<10} {m[key]:.3f}")
    return 0


def cmd_ensemble_search(args) -> int:
    manifest, vocab = _manifest_and_vocab(args)
    if not args.predictions or not Path(args.predictions).is_dir():
        raise ConfigError("--predictions must be a directory of prediction files")
    files = sorted(Path(args.predictions).glob("*.jsonl"))
    if len(files) < 3:
        raise ConfigError(f"need at least 3 prediction files, found {len(files)}")
    if not args.best_model:
        raise ConfigError("--best-model is required")
    refs = _refs(manifest, vocab, args.split)
    sets = [PredictionSet.load(f, vocab) for f in files]
    for s in sets:
        if set(s.predictions) != set(refs):
            raise ConfigError(f"{s.model_name}: prediction ids do not match the evaluation split")
    subsets = balanced_subsets(refs, len(vocab), count=100, seed=args.seed or 0)
    res = ensemble_search(sets, args.best_model, refs, subsets, len(vocab))
    for row in res.table:
        print(f"{row['mean_macro_f1']:.3f} ± {row['std']:.3f}  {','.join(row['members'])}")
    print(f"selected: {','.join(res.spec.members)} (tiebreaker {res.spec.tiebreaker})")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(res.table, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    names = list(gradchecks.REGISTRY) if args.layer == "all" else [args.layer]
    unknown = [n for n in names if n not in gradchecks.REGISTRY]
    if unknown:
        raise ConfigError(f"unknown layer {unknown[0]!r}; choose from {sorted(gradchecks.REGISTRY)}")
    failed = 0
    for name in names:
        res = gradchecks.run_check(name, seeds=args.seeds)
        status = "ok" if res.passed else f"FAIL seeds {res.failures}"
        print(f"{name:<28} max rel err {res.max_rel_err:.2e}  {status}", flush=True)
        failed += not res.passed
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuseser", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fuseser {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if manifest:
            sp.add_argument("--manifest")

    sp = sub.add_parser("gen-synthetic", help="write a synthetic corpus")
    common(sp, manifest=False)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--f0-only", action="store_true")
    sp.set_defaults(fn=cmd_gen_synthetic)

    sp = sub.add_parser("train", help="train a head")
    common(sp)
    sp.add_argument("--strategy", choices=[s.value for s in Strategy])
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("predict", help="write predictions for a split")
    common(sp)
    sp.add_argument("--strategy", choices=[s.value for s in Strategy])
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="val")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("evaluate", help="score a prediction file")
    common(sp)
    sp.add_argument("predictions")
    sp.add_argument("--split", default="val")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("ensemble-search", help="exhaustive majority-vote ensemble search")
    common(sp)
    sp.add_argument("--predictions", help="directory of *.jsonl prediction files")
    sp.add_argument("--best-model")
    sp.add_argument("--split", default="val")
    sp.set_defaults(fn=cmd_ensemble_search)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("layer", nargs="?", default="all")
    sp.add_argument("--seeds", type=int, default=gradchecks.SEEDS)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def _apply_threads() -> None:
    raw = os.environ.get("FUSESER_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FUSESER_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"FUSESER_THREADS must be >= 1, got {n}")
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads()
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FuseSerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
