"""Command-line entry point: ``momoe <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as sft
from .data import SentimentLabel
from .errors import ConfigError, InputError, MomoeError
from .metrics import evaluate
from .moa import build_agent, parse_agents_config, run_moa
from .model import (
    ModelConfig,
    TokenBatch,
    TrainConfig,
    build_model,
    forward,
    gradient_errors,
    load_model,
    make_batch,
    save_model,
    score_labels,
    train,
)
from .moe import MoEConfig, load_balance_loss

log = logging.getLogger("momoe")

GRADCHECK_TOL = 1e-4


@dataclass
class DataConfig:
    corpus: str | None = None  # JSON-lines; synthetic corpus when unset
    synth_n: int = 1000
    synth_seed: int = 0
    ratios: tuple[float, float] = (0.9, 0.1)
    test_count: int = 50
    policy: str = "round_robin"
    split_seed: int = 0

    def __post_init__(self):
        if self.policy not in sft.POLICIES:
            raise ConfigError(f"unknown template policy {self.policy!r}", "policy")
        if self.synth_n < 1:
            raise ConfigError("synth_n must be >= 1", "synth_n")
        if self.test_count < 0:
            raise ConfigError("test_count must be >= 0", "test_count")


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    agents: dict | None = None
    moa_parallelism: int = 4

    def to_json(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "agents": self.agents,
            "moa_parallelism": self.moa_parallelism,
        }


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    unknown = set(raw) - set(cls.__dataclass_fields__)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown setting {key!r}", f"{name}.{key}")
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(str(exc), f"{name}.{exc.field}" if exc.field else name) from None
    except TypeError as exc:
        raise ConfigError(str(exc), name) from None


def load_config(path: str | None, seed: int | None = None) -> CliConfig:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found", "--config")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})", "--config") from None
    unknown = set(raw) - {"model", "train", "data", "agents", "moa_parallelism"}
    if unknown:
        raise ConfigError(f"unknown top-level setting {sorted(unknown)[0]!r}", sorted(unknown)[0])
    try:
        model_cfg = ModelConfig.from_dict(raw.get("model") or {})
    except ConfigError as exc:
        fld = exc.field if exc.field and exc.field.startswith("model") else f"model.{exc.field}"
        raise ConfigError(str(exc), fld) from None
    except TypeError as exc:
        raise ConfigError(str(exc), "model") from None
    data_raw = dict(raw.get("data") or {})
    if "ratios" in data_raw:
        data_raw["ratios"] = tuple(data_raw["ratios"])
    cfg = CliConfig(
        model=model_cfg,
        train=_section(TrainConfig, raw.get("train"), "train"),
        data=_section(DataConfig, data_raw, "data"),
        agents=raw.get("agents"),
        moa_parallelism=int(raw.get("moa_parallelism", 4)),
    )
    if cfg.moa_parallelism < 1:
        raise ConfigError("moa_parallelism must be >= 1", "moa_parallelism")
    if seed is not None:
        cfg.model = replace(cfg.model, init_seed=seed)
        cfg.train = replace(cfg.train, shuffle_seed=seed)
        cfg.data = replace(cfg.data, synth_seed=seed, split_seed=seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: CliConfig, out: Path, command: str, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg.to_json(), **(extra or {})}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"{flag} is required", flag)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag} {path} does not exist", flag)
    return p


def cmd_build_dataset(args, cfg: CliConfig) -> int:
    dc = cfg.data
    corpus_path = args.corpus or dc.corpus
    if corpus_path:
        corpus = sft.load_corpus(_require_file(corpus_path, "--corpus"))
    else:
        corpus = sft.synth_corpus(dc.synth_n, dc.synth_seed)
    splits = sft.build_dataset(corpus, dc.policy, dc.ratios, dc.test_count, dc.split_seed)
    out = _out_dir(args)
    for name in ("train", "validation", "test"):
        sft.save_examples(getattr(splits, name), out / f"{name}.jsonl")
    sizes = {n: len(getattr(splits, n)) for n in ("train", "validation", "test")}
    _echo_config(cfg, out, "build-dataset", {"split_seed": splits.split_seed, "sizes": sizes})
    print(f"wrote {sizes['train']} train / {sizes['validation']} validation / {sizes['test']} test to {out}")
    return 0


def _load_split(path: str | Path, default_name: str = "train.jsonl") -> list:
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    if not p.is_file():
        raise ConfigError(f"dataset file {p} does not exist", "--data")
    examples = sft.load_examples(p)
    if not examples:
        raise InputError(f"{p} holds no examples")
    return examples


def cmd_train(args, cfg: CliConfig) -> int:
    examples = _load_split(args.data, "train.jsonl")
    tc = cfg.train
    if args.steps is not None:
        tc = replace(tc, max_steps=args.steps)
    if args.lr is not None:
        tc = replace(tc, learning_rate=args.lr)
    cfg.train = tc
    out = _out_dir(args)
    _echo_config(cfg, out, "train", {"seeds": {"init_seed": cfg.model.init_seed, "shuffle_seed": tc.shuffle_seed}})
    model = build_model(cfg.model)
    t0 = time.perf_counter()
    with open(out / "loss_log.jsonl", "w") as fh:

        def on_step(step, rec):
            fh.write(json.dumps({"step": step, "task_loss": rec.task, "balance_loss": rec.balance, "total": rec.total}) + "\n")
            if step % 10 == 0:
                log.info("step %d task %.4f balance %.4f", step, rec.task, rec.balance)

        history = train(model, examples, tc, on_step)
    save_model(model, out / "checkpoint.npz")
    if history:
        print(f"trained {len(history)} steps in {time.perf_counter() - t0:.1f}s; "
              f"task loss {history[0].task:.4f} -> {history[-1].task:.4f}")
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    out = _out_dir(args)
    if args.records:
        golds, preds = [], []
        with open(_require_file(args.records, "--records"), encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("gold") is None:
                    raise InputError("MoA record without a gold label cannot be evaluated")
                golds.append(SentimentLabel(rec["gold"]))
                preds.append(None if rec.get("final_label") is None else SentimentLabel(rec["final_label"]))
        source = {"records": str(args.records)}
    else:
        model = load_model(_require_file(args.checkpoint, "--checkpoint"))
        examples = _load_split(args.data, "test.jsonl")
        golds, preds = [], []
        with open(out / "predictions.jsonl", "w") as fh:
            for ex in examples:
                label, scores = score_labels(model, ex.prompt)
                golds.append(ex.label)
                preds.append(label)
                fh.write(json.dumps({
                    "prompt": ex.prompt, "gold": ex.label.value, "pred": label.value,
                    "logprobs": {k.value: v for k, v in scores.items()},
                }) + "\n")
        source = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    report = evaluate(golds, preds)
    _echo_config(cfg, out, "eval", source)
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    print(report.format_table())
    return 0


def _read_prompts(path: Path) -> list[tuple[str, SentimentLabel | None]]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            gold = SentimentLabel.parse(obj["label"]) if obj.get("label") else None
            if "prompt" in obj:
                items.append((obj["prompt"], gold))
            elif "text" in obj:
                items.append((sft.render_prompt(obj["text"], obj.get("q_idx", 0), obj.get("p_idx", 0)), gold))
            else:
                raise InputError(f"{path}:{lineno}: needs 'prompt' or 'text'")
    return items


def cmd_moa_run(args, cfg: CliConfig) -> int:
    if args.agents:
        doc = json.loads(_require_file(args.agents, "--agents").read_text(encoding="utf-8"))
    elif cfg.agents is not None:
        doc = cfg.agents
    else:
        raise ConfigError("no agents configured (use --agents or the config's 'agents' section)", "agents")
    proposer_specs, agg_spec = parse_agents_config(doc)
    models: dict = {}
    proposers = [build_agent(s, models) for s in proposer_specs]
    aggregator = build_agent(agg_spec, models)
    prompts = _read_prompts(_require_file(args.prompts, "--prompts"))
    out = _out_dir(args)
    _echo_config(cfg, out, "moa-run", {"agents": doc})

    def one(item):
        prompt, gold = item
        return run_moa(prompt, proposers, aggregator, gold=gold)

    with ThreadPoolExecutor(max_workers=cfg.moa_parallelism) as pool:
        records = list(pool.map(one, prompts))
    n_err = 0
    with open(out / "moa_records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            n_err += rec.status != "ok"
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
    print(f"wrote {len(records)} records ({n_err} failed) to {out / 'moa_records.jsonl'}")
    return 1 if n_err else 0


def cmd_route_stats(args, cfg: CliConfig) -> int:
    model = load_model(_require_file(args.checkpoint, "--checkpoint"))
    examples = _load_split(args.data, "test.jsonl")
    decisions = []
    for start in range(0, len(examples), cfg.train.batch_size):
        batch = make_batch(examples[start : start + cfg.train.batch_size])
        _, decs, _ = forward(model, batch)
        real = (batch.ids != sft.PAD).reshape(-1)
        decisions.extend(d for d, keep in zip(decs, real) if keep)
    mc = model.config.moe
    stats = load_balance_loss(decisions, mc.num_experts, mc.top_k)
    doc = {
        "tokens": len(decisions),
        "num_experts": mc.num_experts,
        "top_k": mc.top_k,
        "f": stats.f.tolist(),
        "p": stats.p.tolist(),
        "sum_f": float(stats.f.sum()),
        "sum_p": float(stats.p.sum()),
        "balance_loss": stats.loss,
        "uniform_loss": mc.top_k / mc.num_experts**2,
    }
    print(f"{doc['tokens']} tokens, E={mc.num_experts}, k={mc.top_k}")
    for e in range(mc.num_experts):
        bar = "#" * int(round(40 * stats.f[e] / mc.top_k))
        print(f"expert {e}: f={stats.f[e]:.4f} p={stats.p[e]:.4f} {bar}")
    print(f"L_balance {stats.loss:.6f} (uniform routing gives {doc['uniform_loss']:.6f})")
    if args.out:
        out = _out_dir(args)
        _echo_config(cfg, out, "route-stats", {"checkpoint": str(args.checkpoint)})
        (out / "route_stats.json").write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def gradcheck_config(seed: int) -> ModelConfig:
    return ModelConfig(
        model_dim=8, num_heads=2, num_layers=2, max_seq_len=16,
        moe=MoEConfig(num_experts=4, top_k=2, model_dim=8, expert_hidden=16), init_seed=seed,
    )


def gradcheck_batch(seed: int, batch: int = 2, length: int = 16) -> TokenBatch:
    """Random byte sequences with the back half masked for loss."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(sft.BYTE_OFFSET, sft.VOCAB_SIZE, size=(batch, length))
    mask = np.zeros((batch, length), dtype=np.int64)
    mask[:, length // 2 : length - 1] = 1
    return TokenBatch(ids, mask)


def cmd_gradcheck(args, cfg: CliConfig) -> int:
    seeds = args.seeds if args.seeds else [0, 1, 2]
    worst = 0.0
    for seed in seeds:
        m = build_model(gradcheck_config(seed))
        errs = gradient_errors(m, gradcheck_batch(seed), eps=args.eps, alpha=args.alpha)
        err = max(errs.values())
        worst = max(worst, err)
        print(f"seed {seed}: max relative error {err:.3e}")
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} < {GRADCHECK_TOL:g})")
    return 0 if ok else 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message, None)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="momoe", description="MoE fine-tuning and mixture-of-agents tools")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("build-dataset", parents=[common], help="render templates and split a corpus")
    s.add_argument("--corpus", help="JSON-lines corpus (synthetic if omitted)")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", parents=[common], help="fine-tune the MoE layer")
    s.add_argument("--data", required=True, help="dataset directory or train.jsonl")
    s.add_argument("--steps", type=int, help="stop after this many steps")
    s.add_argument("--lr", type=float, help="learning rate override")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics for a checkpoint or MoA records")
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="dataset directory or split file (defaults to test.jsonl)")
    s.add_argument("--records", help="moa_records.jsonl to score instead of a checkpoint")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("moa-run", parents=[common], help="run the agent ensemble over prompts")
    s.add_argument("--prompts", required=True)
    s.add_argument("--agents", help="agents JSON (overrides the config's agents section)")
    s.set_defaults(func=cmd_moa_run)

    s = sub.add_parser("route-stats", parents=[common], help="per-expert routing statistics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_route_stats, out=None)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of MoE gradients")
    s.add_argument("--seeds", type=int, nargs="*")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--alpha", type=float, default=None)
    s.set_defaults(func=cmd_gradcheck)
    return p


def run_command(argv: Sequence[str]) -> int:
    parser = make_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
        if args.command == "eval" and not args.records and not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --records", "--checkpoint")
        if args.command == "eval" and args.checkpoint and not args.data:
            raise ConfigError("eval with --checkpoint needs --data", "--data")
        cfg = load_config(args.config, args.seed)
        return args.func(args, cfg)
    except ConfigError as exc:
        where = f"{exc.field}: " if exc.field else ""
        print(f"momoe: config error: {where}{exc}", file=sys.stderr)
        return 2
    except (MomoeError, OSError, ValueError, KeyError) as exc:
        print(f"momoe: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
