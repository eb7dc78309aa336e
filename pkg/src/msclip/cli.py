"""``msclip`` command line: synth, train, eval, export, corpus-stats, experiment.

Exit codes: 0 success, 2 config/flag error, 3 I/O error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from . import model as M
from .corpus import corpus_stats
from .data import (
    RGB_BANDS, SynthConfig, as_bands, compute_stats, generate_synthetic, parse_band_list,
    read_manifest, scale_reflectance, select_bands, split_records, write_dataset,
)
from .errors import DivergedLoss, EmptyCorpus, FormatError, InvalidConfig, MsClipError
from .evaluation import DEFAULT_TEMPLATES, NEGATIVE_CLASS_NAME, load_templates
from .pipeline import class_names_from, embed_records, evaluate_model, export_embeddings
from .tokenizer import Vocabulary, build_vocab
from .trainer import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("msclip")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bands: tuple[str, ...] = tuple(b.value for b in RGB_BANDS)
    eval: dict = field(default_factory=lambda: {
        "templates": list(DEFAULT_TEMPLATES), "multilabel": "eq2",
        "negative_class": NEGATIVE_CLASS_NAME, "split": "test"})
    vocab_max_size: int = 5000

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - {"synth", "model", "train", "bands", "eval", "vocab_max_size", "paths"}
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        rc = cls()
        if "synth" in obj:
            rc.synth = SynthConfig.from_json(obj["synth"])
        if "model" in obj:
            rc.model = M.ModelConfig.from_json(obj["model"])
        if "train" in obj:
            rc.train = TrainConfig.from_json(obj["train"])
        if "bands" in obj:
            b = obj["bands"]
            # "-o bands=10" arrives as an int after JSON parsing
            parsed = parse_band_list(str(b)) if isinstance(b, (str, int)) else as_bands(b)
            rc.bands = tuple(x.value for x in parsed)
        if "eval" in obj:
            rc.eval = {**rc.eval, **obj["eval"]}
        if "vocab_max_size" in obj:
            rc.vocab_max_size = int(obj["vocab_max_size"])
        return rc


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(obj: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    obj = json.loads(json.dumps(obj))
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = obj
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return obj


def load_run_config(path: str | None, overrides: Sequence[str]) -> RunConfig:
    obj: dict = {}
    if path:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{path}: invalid JSON ({e})") from e
    try:
        return RunConfig.from_json(apply_overrides(obj, overrides))
    except TypeError as e:
        raise InvalidConfig(str(e)) from e


@contextlib.contextmanager
def thread_cap():
    """Honour MSCLIP_THREADS for BLAS and numba worker pools."""
    raw = os.environ.get("MSCLIP_THREADS")
    if not raw:
        yield
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise InvalidConfig(f"MSCLIP_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass
    with threadpool_limits(limits=n):
        yield


def _find_vocab(explicit: str | None, checkpoint: Path) -> Vocabulary:
    candidates = [Path(explicit)] if explicit else [checkpoint.parent / "vocab.txt",
                                                    checkpoint.parent.parent / "vocab.txt"]
    for c in candidates:
        if c.is_file():
            return Vocabulary.load(c)
    raise FileNotFoundError(f"no vocabulary found (tried {', '.join(map(str, candidates))})")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    rc = load_run_config(args.config, args.override)
    rc.synth.validate()
    records = generate_synthetic(rc.synth)
    out = Path(args.out)
    manifest = write_dataset(records, out)
    (out / "synth_config.json").write_text(
        json.dumps(rc.synth.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    counts = {s: len(split_records(records, s)) for s in ("train", "val", "test")}
    print(f"wrote {len(records)} records to {manifest}")
    for s, n in counts.items():
        print(f"  {s:<5} {n}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.override)
    tcfg = rc.train
    if args.freeze:
        tcfg = replace(tcfg, freeze_policy=M.FreezePolicy.parse(args.freeze))
    tcfg.validate()
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    records = read_manifest(manifest)
    tr, va = split_records(records, "train"), split_records(records, "val")
    if not tr or not va:
        raise InvalidConfig("manifest needs non-empty train and val splits")

    if args.init:
        init_path = Path(args.init)
        params = M.load_checkpoint(init_path)
        vocab = _find_vocab(args.vocab, init_path)
    else:
        if args.extend_bands:
            raise InvalidConfig("--extend-bands requires --init with a 3-channel checkpoint")
        vocab = build_vocab((r.caption for r in tr), max_size=rc.vocab_max_size)
        bands = rc.bands
        mcfg = replace(rc.model, vocab_size=len(vocab), in_channels=len(bands), band_names=bands,
                       norm_mean=None, norm_std=None)
        params = M.init_model(mcfg, seed=tcfg.seed)

    if args.extend_bands:
        if params.config.in_channels != 3:
            raise InvalidConfig(
                f"--extend-bands needs a 3-channel checkpoint, got {params.config.in_channels}")
        new_bands = parse_band_list(args.extend_bands)
        extra = [b for b in new_bands if b not in params.config.bands()]
        stats = compute_stats(scale_reflectance(select_bands(r.load_image(), extra)) for r in tr) \
            if extra else None
        params = M.extend_patch_embed(params, new_bands, mode=args.init_mode, stats=stats)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    best, tlog = train(params, tr, va, tcfg, vocab, checkpoint_dir=out / "checkpoints",
                       log_path=out / "train_log.jsonl")
    M.save_checkpoint(best, out / "best.msck")
    print(f"freeze policy: {tcfg.freeze_policy.describe()}")
    print(f"best val loss {tlog.best_val_loss:.6f} at step {tlog.best_step}")
    print(f"checkpoint: {out / 'best.msck'}")
    return EXIT_OK


def _load_for_eval(args):
    ckpt = Path(args.checkpoint)
    params = M.load_checkpoint(ckpt)
    if args.bands:
        bands = parse_band_list(args.bands)
        if len(bands) != params.config.in_channels:
            raise InvalidConfig(
                f"checkpoint expects {params.config.in_channels} input channels "
                f"({','.join(b.value for b in params.config.bands())}) but --bands lists {len(bands)}")
        if bands != params.config.bands():
            raise InvalidConfig(
                f"--bands {','.join(b.value for b in bands)} does not match the checkpoint's "
                f"band order {','.join(b.value for b in params.config.bands())}")
    vocab = _find_vocab(args.vocab, ckpt)
    records = read_manifest(args.manifest)
    split = split_records(records, args.split)
    if not split:
        raise InvalidConfig(f"split {args.split!r} is empty")
    return ckpt, params, vocab, records, split


def cmd_eval(args) -> int:
    rc = load_run_config(args.config, args.override)
    ckpt, params, vocab, records, split = _load_for_eval(args)
    templates = load_templates(args.templates) if args.templates else tuple(rc.eval["templates"])
    method = args.multilabel or rc.eval["multilabel"]
    report = evaluate_model(params, vocab, split, class_names_from(records), templates, method,
                            rc.eval.get("negative_class", NEGATIVE_CLASS_NAME), checkpoint_id=ckpt.name)
    report.config["split"] = args.split
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.dumps(), encoding="utf-8")
        print(f"report: {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt, params, vocab, records, split = _load_for_eval(args)
    embs = export_embeddings(params, split, args.out_embeddings, args.out_labels)
    print(f"exported {embs.shape[0]} x {embs.shape[1]} embeddings to {args.out_embeddings}")
    return EXIT_OK


def cmd_corpus_stats(args) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = read_manifest(path)
    if args.split:
        records = split_records(records, args.split)
    captions = [r.caption for r in records]
    questions = [q for r in records for q, _ in r.qa_pairs]
    if not captions:
        raise EmptyCorpus(f"no captions in {path}")
    stats = corpus_stats(captions, questions, top_k=args.top_k, seed=args.seed)
    text = json.dumps(stats.to_json(), sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(stats.histogram(), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import ExperimentConfig, run_spectral_separation

    rows = []
    for seed in args.seeds:
        cfg = ExperimentConfig(seed=seed, phase1_steps=args.phase1_steps,
                               phase2_steps=args.phase2_steps)
        r = run_spectral_separation(cfg)
        rows.append(r)
        print(f"seed {seed}: rgb {100 * r.rgb_accuracy:6.2f}  ms {100 * r.ms_accuracy:6.2f}  "
              f"gain {r.gain_pp:+6.2f} pp  rgb(spectral-only) {100 * r.rgb_spectral_only_accuracy:6.2f}"
              f"  [{r.seconds:.1f}s]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msclip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
            sp.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted-path config override, e.g. train.peak_lr=1e-3")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train or continue training a model")
    common(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--vocab", help="vocabulary file (default: next to --init)")
    t.add_argument("--extend-bands", help="band list to extend a 3-channel checkpoint to")
    t.add_argument("--init-mode", choices=["zero", "mean"], default="zero")
    t.add_argument("--freeze", help="all | projection | attention | image | custom:<glob,...>")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "zero-shot classification and retrieval"),
                                 ("export", cmd_export, "export image embeddings")):
        e = sub.add_parser(name, help=helptext)
        if name == "eval":
            common(e)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--bands", help="expected band list (rgb, 10, 12 or B4,B3,B2,...)")
        e.add_argument("--vocab")
        e.add_argument("--split", default="test", choices=["train", "val", "test"])
        if name == "eval":
            e.add_argument("--templates", help="file with one template per line")
            e.add_argument("--multilabel", choices=["eq2", "negclass"])
            e.add_argument("--out", help="write the report JSON here")
        else:
            e.add_argument("--out-embeddings", required=True)
            e.add_argument("--out-labels", required=True)
        e.set_defaults(func=func)

    c = sub.add_parser("corpus-stats", help="caption corpus statistics")
    c.add_argument("--manifest", required=True)
    c.add_argument("--top-k", type=int, default=20)
    c.add_argument("--split", choices=["train", "val", "test"])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_corpus_stats)

    x = sub.add_parser("experiment", help="RGB vs multispectral synthetic comparison")
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    x.add_argument("--phase1-steps", type=int, default=300)
    x.add_argument("--phase2-steps", type=int, default=300)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_cap():
            return args.func(args)
    except DivergedLoss as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, EmptyCorpus, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (MsClipError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
