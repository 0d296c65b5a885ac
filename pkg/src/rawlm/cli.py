"""Command-line entry point: ``rawlm {train,eval,generate,inspect}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import audio
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, RawLMError
from .generation import SamplerConfig, generate
from .model import ModelParams, layer_report, param_count
from .training import SAMPLER_STREAM, EVAL_STREAM, Trainer, derive_seed, evaluate_nll

OUTPUT_ROOT_ENV = "RAWLM_OUTPUT_ROOT"
log = logging.getLogger("rawlm")


def output_dir(cfg: RunConfig, override: Optional[str] = None) -> Path:
    target = Path(override or cfg.output_dir)
    if not target.is_absolute():
        target = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / target
    target.mkdir(parents=True, exist_ok=True)
    return target


def inspect_text(cfg: RunConfig) -> str:
    mc = cfg.model_config()
    lines = [cfg.to_text().rstrip(), "",
             f"tokens: {cfg.n_tokens}",
             f"conv lengths: {mc.conv_lengths()}",
             f"flatten dim: {mc.flat_dim}",
             f"parameters: {param_count(mc)}",
             "", "layer shapes:"]
    lines += [f"  {name:<10} {tuple(shape)}" for name, shape in layer_report(mc, cfg.n_tokens)]
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    cfg = load_config(args.config, args.set)
    sys.stdout.write(inspect_text(cfg))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if not cfg.train_manifest:
        raise ConfigError("train_manifest is not set")
    out = output_dir(cfg, args.out)
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    train_clips = audio.load_corpus(cfg.train_manifest, cfg.sample_rate)
    valid_clips = audio.load_corpus(cfg.valid_manifest, cfg.sample_rate) if cfg.valid_manifest else None
    trainer = Trainer(cfg.model_config(), cfg.train_settings(), train_clips, valid_clips, out_dir=out)
    log.info("parameters: %d", trainer.params.count())
    if args.resume:
        trainer.resume(args.resume)
    history = trainer.fit()
    last = history[-1] if history else None
    if last is not None:
        print(f"step {last.step}: train {last.loss_bits:.4f} bits/sample")
    print(f"checkpoint: {out / 'latest.ckpt'}")
    return 0


def _load_params(path) -> ModelParams:
    ckpt = load_checkpoint(path)
    return ModelParams.from_arrays(ckpt.config, ckpt.params)


def cmd_eval(args) -> int:
    params = _load_params(args.ckpt)
    mc = params.config
    context = args.context or mc.context_len
    clips = audio.load_corpus(args.manifest, args.sample_rate)
    total = int(audio.eligible_positions(clips, context).sum())
    if total == 0:
        raise ConfigError(f"no position in {args.manifest} has {context} samples of history")
    n = min(args.positions, total) if args.positions else total
    plan = audio.plan_epoch(clips, n, context, derive_seed(args.seed, EVAL_STREAM))
    bits, nats = evaluate_nll(params, clips, plan.pairs, context, return_nats=True)
    print(f"positions: {n}  context: {context}  nats/sample: {nats:.4f}")
    print(f"bits/sample: {bits:.4f}")
    return 0


def cmd_generate(args) -> int:
    params = _load_params(args.ckpt)
    context = args.context or params.config.context_len
    seed_clip = audio.quantize(audio.load_wav(args.seed_wav, expected_rate=args.sample_rate))
    scfg = SamplerConfig(temperature=args.temperature, top_k=args.top_k, greedy=args.greedy,
                         seed=derive_seed(args.seed, SAMPLER_STREAM), n_samples=args.n_samples,
                         cache_mode=args.cache_mode)
    out_path = Path(args.out) if args.out else output_dir(RunConfig(), None) / "generated.wav"
    clip = generate(params, seed_clip, scfg, context, entropies_path=args.entropies)
    continuation = audio.QuantizedClip(clip.codes[context:], seed_clip.sample_rate)
    audio.write_codes_wav(out_path, continuation)
    print(f"wrote {len(continuation)} samples ({len(continuation) / seed_clip.sample_rate:.3f} s) to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawlm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_set(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--config", required=False)
    sp.add_argument("--resume", metavar="CKPT")
    sp.add_argument("--out", help="output directory (default: config output_dir under $%s)" % OUTPUT_ROOT_ENV)
    add_set(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="bits/sample of a checkpoint on a manifest")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--context", type=int, default=0, help="context length in samples")
    sp.add_argument("--positions", type=int, default=0, help="sampled positions (0 = all)")
    sp.add_argument("--sample-rate", type=int, default=16000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("generate", help="continue a seed WAV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed-wav", required=True)
    sp.add_argument("--n-samples", type=int, required=True)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--top-k", type=int, default=0)
    sp.add_argument("--greedy", action="store_true")
    sp.add_argument("--cache-mode", choices=["exact", "stale-chunk"], default="exact")
    sp.add_argument("--context", type=int, default=0)
    sp.add_argument("--sample-rate", type=int, default=16000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output WAV path")
    sp.add_argument("--entropies", help="write per-step entropies (bits) here")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("inspect", help="print resolved config, parameter count and shapes")
    sp.add_argument("--config", required=False)
    add_set(sp)
    sp.set_defaults(func=cmd_inspect)
    return p


def dispatch(command: str, argv: Sequence[str]) -> int:
    return main([command, *argv])


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RawLMError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
