"""Command-line pipeline: define a space, search, extract, train, evaluate.

Every command that produces artifacts writes them into a run directory with
a ``manifest.json`` recorded before work begins and completed afterwards.
Spec files (space, bins, evo, train, distill) are JSON; flags given on the
command line override the matching file fields.

Exit codes: 0 success, 1 other error, 2 validation, 3 infeasible bin,
4 divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

from . import __version__
from .checkpoint import as_dense, load_model, save_model
from .config import SubnetworkConfig, SupernetConfig
from .data import load_corpus, save_corpus, synthetic_text, tokenize_bytes
from .errors import FormatError, SnforgeError, ValidationError
from .evolution import EvoParams, load_bins, run_search
from .fitness import PerplexityFitness
from .importance import ImportanceFitness, compute_tables, weight_magnitude_tables
from .losses import DistillSpec
from .model import Supernet, count_params, extract_dense
from .space import cardinality, load_space
from .train import TrainSpec, distill, evaluate_perplexity, pretrain

logger = logging.getLogger("snforge")

EXIT_OK, EXIT_INFEASIBLE = 0, 3


# -- helpers -----------------------------------------------------------------

def _read_json(path: str | Path | None, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{what} file {p} is not valid JSON: {exc}") from exc


def _overrides(args: argparse.Namespace, names: list[str]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{what} not found: {p}")
    return p


def content_hash(paths: list[Path]) -> str:
    """sha256 over (name, sha256(content)) of every input file, in order."""
    outer = hashlib.sha256()
    for p in paths:
        h = hashlib.sha256(p.read_bytes()).hexdigest()
        outer.update(f"{p.name}\0{h}\n".encode())
    return outer.hexdigest()


class Manifest:
    """Run record written before work starts and completed at the end."""

    def __init__(self, out: Path, command: str, argv: list[str], config: dict, seed: int | None,
                 inputs: list[Path]):
        self.out = out
        self.path = out / "manifest.json"
        self.data: dict[str, Any] = {
            "command": command,
            "argv": argv,
            "version": __version__,
            "config": config,
            "seed": seed,
            "inputs": {str(p): hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs},
            "input_hash": content_hash(inputs),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "status": "running",
            "artifacts": [],
        }
        out.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self) -> None:
        tmp = self.path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def finish(self, status: str, artifacts: list[Path], **extra) -> None:
        self.data["artifacts"] = sorted(str(p.relative_to(self.out)) for p in artifacts if p.exists())
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["status"] = status
        self.data.update(extra)
        self._write()


def _load_supernet(path: str) -> Supernet:
    model, _ = load_model(_require_file(path, "supernet checkpoint"))
    if not isinstance(model, Supernet):
        raise ValidationError(f"{path} holds a dense model, a supernet checkpoint is required")
    return model


def _parse_bins(text: str) -> list:
    """Bins from a JSON file or an inline ``lo:hi,lo:hi`` list."""
    p = Path(text)
    if p.is_file():
        data = _read_json(p, "bins")
        return load_bins(data["bins"] if isinstance(data, dict) else data)
    try:
        pairs = [item.split(":") for item in text.split(",") if item]
        return load_bins([(int(float(a)), int(float(b))) for a, b in pairs])
    except ValueError as exc:
        raise FormatError(f"bins must be a JSON file or 'lo:hi,...', got {text!r}") from exc


def _train_spec(args) -> TrainSpec:
    d = _read_json(args.train, "train spec")
    d.update(_overrides(args, ["total_tokens", "global_batch", "micro_batch", "seq_len", "lr", "min_lr",
                               "warmup_steps", "seed", "eval_interval", "save_interval"]))
    return TrainSpec.from_dict(d)


# -- commands ----------------------------------------------------------------

def cmd_make_corpus(args) -> int:
    if args.input:
        corpus = load_corpus(_require_file(args.input, "input text"))
    else:
        corpus = tokenize_bytes(synthetic_text(args.synthetic, seed=args.seed))
    save_corpus(corpus, args.out)
    print(f"{len(corpus)} tokens (vocab {corpus.vocab_size}) -> {args.out}")
    return EXIT_OK


def cmd_init_supernet(args) -> int:
    d = _read_json(args.config, "supernet config")
    d.update(_overrides(args, ["n_layer", "n_embd", "n_head", "head_size", "intermediate_size",
                               "n_query_groups", "vocab_size", "max_seq"]))
    sup = SupernetConfig.from_dict(d)
    net = Supernet(sup, seed=args.seed)
    save_model(args.out, net)
    print(f"supernet {sup.to_dict()} with {net.model.num_params()} parameters -> {args.out}")
    return EXIT_OK


def cmd_space(args) -> int:
    space = load_space(_require_file(args.space, "search space"))
    sup = _load_supernet(args.supernet).config
    print(f"{space.name}: {cardinality(space, sup)} configurations")
    return EXIT_OK


def cmd_importance(args) -> int:
    net = _load_supernet(args.supernet)
    if args.source == "weight":
        tables = weight_magnitude_tables(net)
    else:
        corpus = load_corpus(args.corpus)
        tables = compute_tables(net, corpus, args.batches, args.batch_size, args.seq_len, args.seed)
    tables.save(args.out)
    print(f"{args.source} importance tables -> {args.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    out = Path(args.out)
    inputs = [_require_file(args.space, "search space"), _require_file(args.supernet, "supernet checkpoint"),
              _require_file(args.corpus, "corpus")]
    if args.evo:
        inputs.append(_require_file(args.evo, "evo spec"))
    if Path(args.bins).is_file():
        inputs.append(Path(args.bins))
    space = load_space(args.space)
    net = _load_supernet(args.supernet)
    sup = net.config
    bins = _parse_bins(args.bins)
    evo_d = _read_json(args.evo, "evo spec")
    evo_d.update(_overrides(args, ["seed", "population", "elites", "epochs", "offspring", "random_samples",
                                   "mutation_prob", "crossover_prob", "max_attempts"]))
    evo = EvoParams.from_dict(evo_d)
    space = space.resolved(sup)
    config = {"space": space.to_dict(), "bins": [[b.lower, b.upper] for b in bins], "evo": evo.__dict__,
              "metric": args.metric, "eval_batches": args.eval_batches, "eval_batch_size": args.eval_batch_size,
              "seq_len": args.seq_len, "workers": args.workers}
    manifest = Manifest(out, "search", args.argv, config, evo.seed, inputs)
    corpus = load_corpus(args.corpus)
    if corpus.vocab_size > sup.vocab_size:
        raise ValidationError(f"corpus vocabulary {corpus.vocab_size} exceeds supernet vocabulary {sup.vocab_size}")
    artifacts = [out / "history.csv"]
    if args.metric == "importance":
        tables = compute_tables(net, corpus, args.eval_batches, args.eval_batch_size, args.seq_len, evo.seed)
        tables.save(out / "importance.snfw")
        artifacts.append(out / "importance.snfw")
        fitness = ImportanceFitness(tables, sup)
    else:
        fitness = PerplexityFitness(net, corpus, args.eval_batches, args.eval_batch_size, args.seq_len,
                                    workers=args.workers)
    logger.info("search %s over %d bins, cardinality %d", space.name, len(bins), cardinality(space, sup))
    result = run_search(space, sup, bins, evo, fitness, out_dir=out, resume=args.resume)

    status = []
    for i, br in enumerate(result.bins):
        entry = {"bin": i, "lower": br.bin.lower, "upper": br.bin.upper}
        if br.best is None:
            entry.update(status="infeasible", error=br.error)
            print(f"bin {i} [{br.bin.lower}, {br.bin.upper}]: INFEASIBLE ({br.error})")
        else:
            path = out / f"best_bin{i}.json"
            path.write_text(json.dumps({"config": br.best.cfg.to_dict(), "params": br.best.params,
                                        "fitness": br.best.fitness, "metric": args.metric},
                                       indent=2, sort_keys=True) + "\n")
            artifacts.append(path)
            entry.update(status="ok", params=br.best.params, fitness=br.best.fitness)
            print(f"bin {i} [{br.bin.lower}, {br.bin.upper}]: params={br.best.params} "
                  f"fitness={br.best.fitness:.6g} -> {path}")
        status.append(entry)
    failed = any(s["status"] != "ok" for s in status)
    manifest.finish("partial" if failed else "ok", artifacts, bins_status=status)
    return EXIT_INFEASIBLE if failed else EXIT_OK


def _load_config_file(path: str) -> SubnetworkConfig:
    d = _read_json(_require_file(path, "sub-network config"), "sub-network config")
    return SubnetworkConfig.from_dict(d["config"] if "config" in d else d)


def cmd_extract(args) -> int:
    net = _load_supernet(args.supernet)
    cfg = _load_config_file(args.config)
    cfg.validate(net.config)
    dense = extract_dense(net, cfg)
    n = count_params(net.config, cfg)
    save_model(args.out, dense, {"subnetwork": cfg.to_dict(), "supernet": net.config.to_dict()})
    print(n)
    return EXIT_OK


def _train_command(args, teacher_path: str | None) -> int:
    out = Path(args.out)
    inputs = [_require_file(args.model, "model checkpoint"), _require_file(args.corpus, "corpus")]
    for extra, what in ((teacher_path, "teacher checkpoint"), (args.train, "train spec"),
                        (getattr(args, "distill", None), "distill spec")):
        if extra:
            inputs.append(_require_file(extra, what))
    spec = _train_spec(args)
    dspec = None
    if teacher_path is not None:
        dd = _read_json(args.distill, "distill spec")
        dd.update(_overrides(args, ["alpha", "beta", "temperature", "logit_mode", "k"]))
        dspec = DistillSpec.from_dict(dd)
    config = {"train": spec.to_dict(), "init": args.init, "resume": args.resume}
    if dspec is not None:
        config["distill"] = dspec.__dict__
    manifest = Manifest(out, "distill" if teacher_path else "pretrain", args.argv, config, spec.seed, inputs)
    loaded, _ = load_model(args.model)
    model = as_dense(loaded)
    corpus = load_corpus(args.corpus)
    artifacts = [out / "model.snfw", out / "optimizer.snfw", out / "metrics.csv"]
    try:
        if teacher_path is None:
            res = pretrain(model, corpus, spec, out, init=args.init, resume=args.resume)
        else:
            teacher, _ = load_model(teacher_path)
            res = distill(model, teacher, corpus, spec, dspec, out, init=args.init, resume=args.resume)
    except SnforgeError as exc:
        manifest.finish("failed", artifacts, error=str(exc))
        raise
    if isinstance(loaded, Supernet):
        save_model(out / "model.snfw", loaded, {"step": spec.steps})
    manifest.finish("ok", artifacts, final_val_ppl=res.final_val_ppl)
    print(f"final val_ppl {res.final_val_ppl:.6g} after {spec.steps} steps -> {out / 'model.snfw'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_command(args, None)


def cmd_distill(args) -> int:
    return _train_command(args, args.teacher)


def cmd_eval(args) -> int:
    model, _ = load_model(_require_file(args.model, "model checkpoint"))
    corpus = load_corpus(args.corpus)
    spec = TrainSpec.from_dict(_read_json(args.train, "train spec")) if args.train else TrainSpec()
    batches = args.batches or spec.eval_batches
    batch_size = args.batch_size or spec.eval_batch_size
    seq_len = args.seq_len or spec.seq_len
    print(repr(evaluate_perplexity(as_dense(model), corpus, batches, batch_size, seq_len)))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("train overrides")
    g.add_argument("--total-tokens", dest="total_tokens", type=int)
    g.add_argument("--global-batch", dest="global_batch", type=int)
    g.add_argument("--micro-batch", dest="micro_batch", type=int)
    g.add_argument("--seq-len", dest="seq_len", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--min-lr", dest="min_lr", type=float)
    g.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    g.add_argument("--eval-interval", dest="eval_interval", type=int)
    g.add_argument("--save-interval", dest="save_interval", type=int)
    g.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snforge", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"snforge {__version__}")
    ap.add_argument("--log-level", default=os.environ.get("SNF_LOG_LEVEL", "WARNING"))
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="tokenize a text file (or synthesize one) into an SNFC cache")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--synthetic", type=int, metavar="N_BYTES")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("init-supernet", help="write a randomly initialised supernet checkpoint")
    p.add_argument("--config", help="JSON file with supernet dimensions")
    for name in ("n_layer", "n_embd", "n_head", "head_size", "intermediate_size", "n_query_groups",
                 "vocab_size", "max_seq"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_supernet)

    p = sub.add_parser("space", help="print the cardinality of a search space")
    p.add_argument("--space", required=True)
    p.add_argument("--supernet", required=True)
    p.set_defaults(func=cmd_space)

    p = sub.add_parser("importance", help="compute and store importance tables")
    p.add_argument("--supernet", required=True)
    p.add_argument("--corpus")
    p.add_argument("--source", choices=["activation", "weight"], default="activation")
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("search", help="bin-constrained evolutionary search")
    p.add_argument("--space", required=True)
    p.add_argument("--supernet", required=True)
    p.add_argument("--bins", required=True, help="JSON file or inline 'lo:hi,lo:hi'")
    p.add_argument("--evo", help="JSON file with evolution parameters")
    p.add_argument("--metric", choices=["ppl", "importance"], default="ppl")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--eval-batches", dest="eval_batches", type=int, default=4)
    p.add_argument("--eval-batch-size", dest="eval_batch_size", type=int, default=8)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=32)
    p.add_argument("--workers", type=int, default=int(os.environ.get("SNF_WORKERS", "1")))
    g = p.add_argument_group("evo overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--population", type=int)
    g.add_argument("--elites", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--offspring", type=int)
    g.add_argument("--random-samples", dest="random_samples", type=int)
    g.add_argument("--mutation-prob", dest="mutation_prob", type=float)
    g.add_argument("--crossover-prob", dest="crossover_prob", type=float)
    g.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("extract", help="extract a dense sub-network checkpoint")
    p.add_argument("--supernet", required=True)
    p.add_argument("--config", required=True, help="sub-network JSON (a best_bin file works too)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    for name, func in (("pretrain", cmd_pretrain), ("distill", cmd_distill)):
        p = sub.add_parser(name, help=f"{name} a model")
        p.add_argument("--model", required=True)
        if name == "distill":
            p.add_argument("--teacher", required=True)
            p.add_argument("--distill", help="JSON file with distillation settings")
            g = p.add_argument_group("distill overrides")
            g.add_argument("--alpha", type=float)
            g.add_argument("--beta", type=float)
            g.add_argument("--temperature", type=float)
            g.add_argument("--logit-mode", dest="logit_mode", choices=["full", "topk"])
            g.add_argument("--k", type=int)
        p.add_argument("--corpus", required=True)
        p.add_argument("--train", help="JSON file with training settings")
        p.add_argument("--out", required=True)
        p.add_argument("--init", choices=["checkpoint", "random"], default="checkpoint")
        p.add_argument("--resume", action="store_true")
        _add_train_overrides(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="print validation perplexity")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--train", help="train spec whose evaluation settings to reuse")
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args.argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return args.func(args)
    except SnforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
