"""Command-line driver: gen-data, pretrain, train-stage1, train-stage2, run, report, selftest.

Every stage reads and writes inside one run directory
(``$KEDIT_RUN_DIR/<name>``, default ``./runs/<name>``) and leaves a JSON
manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import meme, metrics, model, pipeline
from .editor import (DEFAULT_GAPS, STRATEGIES, EditorConfig, Stage2Config, ledger_jsonl,
                     manifest, read_ledger, sequential_run, sha256_text,
                     train_connector_stage2)
from .synthworld import dumps_jsonl, read_jsonl, read_world, write_world

log = logging.getLogger("kedit_lab")

RUN_DIR_ENV = "KEDIT_RUN_DIR"

# config-file sections and the dataclass each one overrides
CONFIG_SECTIONS = {
    "world": pipeline.WorldConfig,
    "model": model.ModelConfig,
    "pretrain": model.PretrainConfig,
    "stage1": meme.Stage1Config,
    "stage2": Stage2Config,
    "editor": EditorConfig,
}


class DependencyError(RuntimeError):
    """A stage was invoked before the artifact it consumes exists."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    for section, body in cfg.items():
        if section not in CONFIG_SECTIONS:
            raise ValueError(f"unknown config section {section!r}")
        known = {f.name for f in fields(CONFIG_SECTIONS[section])} - {"vocab_size_text", "vocab_size_image"}
        bad = set(body) - known
        if bad:
            raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")
    return cfg


def _section(cfg: dict, name: str, **overrides):
    base = CONFIG_SECTIONS[name](**cfg.get(name, {}))
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path} (run `{stage}` first)")
    return path


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _connector_name(hit_rate: float) -> str:
    return f"connector_p{hit_rate:g}.npz"


# ---------------------------------------------------------------- stages

def cmd_gen_data(args, rd: Path, cfg: dict) -> None:
    wcfg = _section(cfg, "world", seed=args.seed)
    kb, _ = pipeline.build_world(wcfg)
    world_hash = write_world(rd / "world.json", kb)
    stream = pipeline.test_stream(kb, args.edits, args.stream_seed)
    text = dumps_jsonl(stream)
    (rd / "stream.jsonl").write_text(text)
    _write_json(rd / "data_manifest.json", {
        "world": asdict(wcfg), "world_sha256": world_hash, "stream_seed": args.stream_seed,
        "n_edits": len(stream), "stream_sha256": sha256_text(text)})
    print(f"wrote {len(kb.entities)} entities, {len(stream)} edits to {rd}")


def cmd_pretrain(args, rd: Path, cfg: dict) -> None:
    kb = read_world(_need(rd / "world.json", "gen-data"))
    vocab = pipeline.Vocab.for_world(kb)
    pcfg = _section(cfg, "pretrain", seed=args.seed, max_epochs=args.max_epochs)
    shape = {k: v for k, v in cfg.get("model", {}).items() if k != "seed"}
    w = pipeline.pretrain_base(kb, vocab, pcfg.seed, pcfg, **shape)
    model.save_model(rd / "model.npz", w, {"pretrain": asdict(pcfg)})
    _write_json(rd / "pretrain_manifest.json", {"pretrain": asdict(pcfg),
                                                "fingerprint": w.fingerprint()})
    print(f"pretrained model saved to {rd / 'model.npz'}")


def cmd_stage1(args, rd: Path, cfg: dict) -> None:
    kb = read_world(_need(rd / "world.json", "gen-data"))
    vocab = pipeline.Vocab.for_world(kb)
    scfg = _section(cfg, "stage1", seed=args.seed)
    enc = pipeline.train_stage1(kb, vocab, scfg.seed, scfg)
    acc = meme.retrieval_accuracy(enc, kb, kb.split_entities("test"))
    meme.save_encoders(rd / "encoders.npz", enc, {"stage1": asdict(scfg)})
    _write_json(rd / "stage1_manifest.json", {"stage1": asdict(scfg),
                                              "heldout_rephrase_top1": acc})
    print(f"encoders saved; held-out rephrase top-1 {acc:.4f}")


def cmd_stage2(args, rd: Path, cfg: dict) -> None:
    kb = read_world(_need(rd / "world.json", "gen-data"))
    w = model.load_model(_need(rd / "model.npz", "pretrain"))
    enc = meme.load_encoders(_need(rd / "encoders.npz", "train-stage1"))
    vocab = pipeline.Vocab.for_world(kb)
    scfg = _section(cfg, "stage2", seed=args.seed, hit_rate=args.hit_rate)
    episodes = pipeline.stage2_episodes(kb, scfg.n_pairs, scfg.seed)
    bank = train_connector_stage2(w, vocab, enc, episodes, scfg)
    out = rd / _connector_name(scfg.hit_rate)
    model.save_adapters(out, bank, {"stage2": asdict(scfg)})
    _write_json(rd / f"stage2_manifest_p{scfg.hit_rate:g}.json", {"stage2": asdict(scfg)})
    print(f"connector saved to {out}")


def cmd_run(args, rd: Path, cfg: dict) -> None:
    gaps = tuple(int(g) for g in args.gaps.split(",")) if args.gaps else None
    ecfg = _section(cfg, "editor", strategy=args.strategy, seed=args.seed, gap_schedule=gaps,
                    test_hit_rate=args.test_hit_rate, alpha=args.alpha)
    stream_path = _need(rd / "stream.jsonl", "gen-data")
    stream = read_jsonl(stream_path)
    if args.edits is not None:
        stream = stream[: args.edits]
    kb = read_world(_need(rd / "world.json", "gen-data"))
    vocab = pipeline.Vocab.for_world(kb)
    w = model.load_model(_need(rd / "model.npz", "pretrain"))
    enc = meme.load_encoders(_need(rd / "encoders.npz", "train-stage1")) if ecfg.uses_memory else None
    conn = None
    if ecfg.uses_connector:
        conn = model.load_adapters(_need(rd / _connector_name(args.connector_p), "train-stage2"))
    state = sequential_run(ecfg, stream, w, vocab, enc, conn)
    tag = args.tag or ecfg.strategy
    (rd / f"ledger_{tag}.jsonl").write_text(ledger_jsonl(state.ledger))
    (rd / f"trace_{tag}.jsonl").write_text(
        "".join(json.dumps(t, sort_keys=True) + "\n" for t in state.trace))
    report = metrics.evaluate_run(state.ledger, ecfg.gap_schedule)
    (rd / f"report_{tag}.csv").write_text(report.to_csv())
    _write_json(rd / f"run_manifest_{tag}.json", manifest(
        ecfg, sha256_text(stream_path.read_text()),
        {"n_edits": len(stream), "connector_p": args.connector_p if conn else None,
         "model_fingerprint": w.fingerprint()}))
    print(report.to_csv(), end="")


def cmd_report(args, rd: Path, cfg: dict) -> None:
    """Rows are labelled by run tag, so two runs of one strategy stay apart."""
    combined = metrics.MetricsReport()
    for tag in args.compare.split(","):
        rows = read_ledger(_need(rd / f"ledger_{tag}.jsonl", f"run --tag {tag}"))
        mpath = rd / f"run_manifest_{tag}.json"
        if mpath.exists():
            schedule = tuple(json.loads(mpath.read_text())["config"]["gap_schedule"])
        else:
            schedule = tuple(sorted({r["gap"] for r in rows}))
        for r in rows:
            r["strategy"] = tag
        combined.rows += metrics.evaluate_run(rows, schedule).rows
    text = combined.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_selftest(args, rd: Path, cfg: dict) -> None:
    from .selftest import run_selftest

    ok = run_selftest(seed=args.seed)
    if not ok:
        raise SystemExit(1)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kedit", description=__doc__.splitlines()[0])
    p.add_argument("--run-dir", help=f"run root (default ${RUN_DIR_ENV} or ./runs)")
    p.add_argument("--name", default="default", help="run name inside the root")
    p.add_argument("--config", help="JSON config file with per-stage sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-data", help="generate the world and the test edit stream")
    s.add_argument("--seed", type=int)
    s.add_argument("--stream-seed", type=int, default=0)
    s.add_argument("--edits", type=int, default=500)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pretrain", help="pretrain the frozen base model")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train-stage1", help="train the retrieval encoders")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_stage1)

    s = sub.add_parser("train-stage2", help="train the knowledge connector")
    s.add_argument("--seed", type=int)
    s.add_argument("--hit-rate", type=float)
    s.set_defaults(fn=cmd_stage2)

    s = sub.add_parser("run", help="sequential editing run with gap evaluation")
    s.add_argument("--strategy", choices=STRATEGIES, required=True)
    s.add_argument("--edits", type=int)
    s.add_argument("--gaps", help="comma list, default " + ",".join(map(str, DEFAULT_GAPS)))
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--test-hit-rate", type=float, help="adversarial retrieval at test time")
    s.add_argument("--connector-p", type=float, default=0.7,
                   help="which trained connector to load (by training hit rate)")
    s.add_argument("--tag", help="output name suffix (default: strategy)")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("report", help="one CSV over several run ledgers")
    s.add_argument("--compare", required=True, help="comma list of run tags")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("selftest", help="run the bundled property checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    pipeline.setup_determinism()
    root = Path(args.run_dir or os.environ.get(RUN_DIR_ENV, "runs"))
    rd = root / args.name
    if args.cmd != "selftest":
        rd.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load_config(args.config)
        args.fn(args, rd, cfg)
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, model.TrainingFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
