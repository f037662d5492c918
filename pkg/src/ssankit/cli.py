"""``ssankit`` command line.

Exit codes: 0 success, 1 data or runtime error, 2 usage or configuration error.
Every command writes a ``run_manifest.json`` (or ``<output>.run.json``) next to its output.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, load_config
from .data import DataError, SyntheticSpec, build_vocabulary, load_dataset, write_synthetic

log = logging.getLogger("ssankit")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(target: Path, command: str, config: dict, inputs: dict, outputs: list[Path],
                       seed: int | None = None) -> Path:
    """Provenance record. Contains no timestamps so reruns are byte-identical."""
    path = target / "run_manifest.json" if target.is_dir() else target.with_name(target.name + ".run.json")
    files = []
    for out in outputs:
        files += sorted(p for p in out.rglob("*") if p.is_file()) if out.is_dir() else [out]
    rel = lambda p: str(p.relative_to(path.parent)) if p.is_relative_to(path.parent) else str(p)
    hashes = {rel(p): _sha256(p) for p in files if p != path}
    record = {"command": command, "config": config, "inputs": inputs,
              "outputs": [rel(o) for o in outputs], "seed": seed, "hashes": hashes}
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _split(manifest: str, name: str):
    train, val, test = load_dataset(manifest)
    return {"train": train, "val": val, "test": test}[name]


# ---------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    train, _, _ = load_dataset(args.manifest)
    vocab = build_vocabulary(train, args.min_count, args.dim)
    out = Path(args.out)
    vocab.save(out)
    write_run_manifest(out, "build-vocab", {"min_count": args.min_count, "dim": args.dim},
                       {"manifest": args.manifest}, [out])
    print(f"{len(vocab)} words -> {out}")
    return 0


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(identities=args.identities, images_per_identity=args.images,
                         test_identities=args.test_identities,
                         captions_per_image=args.captions_per_image, seed=args.seed, domain=args.domain)
    out = Path(args.out)
    manifest = write_synthetic(spec, out)
    write_run_manifest(out, "gen-synth", dataclasses.asdict(spec), {}, [out], args.seed)
    print(f"wrote {manifest}")
    return 0


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = TrainConfig.tiny() if args.tiny else TrainConfig()
    overrides = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.strict_lambda:
        cfg.loss.strict_lambda = True
        cfg.grad_clip = None
    return cfg.validate()


def cmd_train(args) -> int:
    from . import engine
    from .data import Vocabulary

    out = Path(args.out)
    train, _, _ = load_dataset(args.manifest)
    if args.resume:
        state = engine.resume(args.resume, train, out, epochs=args.epochs)
        cfg = state.cfg
    else:
        cfg = _train_config(args)
        vocab = Vocabulary.load(args.vocab) if args.vocab else None
        state = engine.train(cfg, train, out, vocab=vocab)
    final = state.save(out / "final.npz")
    write_run_manifest(out, "train", cfg.to_dict(), {"manifest": args.manifest, "resume": args.resume},
                       [final], cfg.seed)
    print(json.dumps(state.history[-1]) if state.history else "no epochs run")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import cross_domain_evaluate, evaluate

    records = _split(args.manifest, args.split)
    fn = cross_domain_evaluate if args.cross_domain else evaluate
    result = fn(args.checkpoint, records)
    text = result.to_json()
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        write_run_manifest(out, "eval", {"split": args.split, "cross_domain": args.cross_domain},
                           {"checkpoint": args.checkpoint, "manifest": args.manifest}, [out])
    print(text)
    return 0


def cmd_retrieve(args) -> int:
    from .engine import TrainState
    from .evaluation import retrieve

    state = TrainState.load(args.checkpoint)
    hits = retrieve(state, args.query, _split(args.manifest, args.split), args.k)
    text = json.dumps([{"image": ref, "score": score} for ref, score in hits], indent=1)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        write_run_manifest(out, "retrieve", {"query": args.query, "k": args.k},
                           {"checkpoint": args.checkpoint, "manifest": args.manifest}, [out])
    print(text)
    return 0


def cmd_wam_inspect(args) -> int:
    from .evaluation import wam_inspect

    dump = wam_inspect(args.checkpoint, args.caption, heatmap=args.heatmap)
    text = json.dumps(dump)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        write_run_manifest(out, "wam-inspect", {"caption": args.caption},
                           {"checkpoint": args.checkpoint}, [out])
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssankit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-vocab", help="count training-split words into a vocabulary file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--dim", type=int, default=512, help="word embedding dimension V")
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("gen-synth", help="write a synthetic pedestrian corpus (PNGs + manifest)")
    s.add_argument("--identities", type=int, default=50)
    s.add_argument("--images", type=int, default=4)
    s.add_argument("--test-identities", type=int, default=None)
    s.add_argument("--captions-per-image", type=int, default=2)
    s.add_argument("--domain", choices=("source", "target"), default="source")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON TrainConfig; flags override it")
    s.add_argument("--vocab")
    s.add_argument("--tiny", action="store_true", help="desk-scale tiny-cnn preset")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--strict-lambda", action="store_true",
                   help="raw adaptive-margin ratio without clamping; disables gradient clipping")
    s.add_argument("--resume", metavar="CHECKPOINT")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "Rank-1/5/10 on a split"),
                                 ("retrieve", cmd_retrieve, "top-k images for a text query"),
                                 ("wam-inspect", cmd_wam_inspect, "word-part attention scores")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out")
        if name != "wam-inspect":
            s.add_argument("--manifest", required=True)
            s.add_argument("--split", choices=("train", "val", "test"), default="test")
        s.set_defaults(func=func)
    sub.choices["eval"].add_argument("--cross-domain", action="store_true")
    sub.choices["retrieve"].add_argument("--query", required=True)
    sub.choices["retrieve"].add_argument("--k", type=int, default=10)
    sub.choices["wam-inspect"].add_argument("--caption", required=True)
    sub.choices["wam-inspect"].add_argument("--heatmap", help="optional PNG heat-grid path")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "test_identities", "unset") is None:
        args.test_identities = max(1, args.identities // 5)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
