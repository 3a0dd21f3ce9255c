"""Command-line entry point: ``pairdiff {gen-corpus,train,sample,eval}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import collections
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as runcfg
from .corpus import CorpusError, export_dataset, generate_corpus, import_dataset
from .diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS, SAMPLER, UntrainedModelError, sample_pairs
from .model.checkpoint import CheckpointError
from .model.prompts import PROMPT_GRAMMAR, PromptError, PromptSpec
from .numerics.tensor import NonFiniteError
from .training import TrainingError, load_checkpoint, train

log = logging.getLogger("pairdiff")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _out(args, command: str) -> Path:
    return Path(args.out) if args.out else runcfg.default_out(command)


def _config(args) -> runcfg.RunConfig:
    return runcfg.load(args.config, args.set or ())


# -- commands ----------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    count = cfg.count if args.count is None else args.count
    if count < 1:
        raise UsageError("--count must be positive")
    out = _out(args, "corpus")
    samples = generate_corpus(count, seed, cfg.corpus, list(cfg.prompts) or None)
    manifest = export_dataset(samples, out, cfg.corpus)
    labels = collections.Counter(s.prompt.target_label for s in samples)
    pixels = np.bincount(np.concatenate([s.mask.ravel() for s in samples]), minlength=cfg.corpus.num_classes)
    print(f"wrote {len(manifest)} pairs to {out}")
    print("target labels: " + ", ".join(f"{k}={labels[k]}" for k in sorted(labels)))
    print("class pixel fractions: " + ", ".join(
        f"{k}={v / pixels.sum():.4f}" for k, v in enumerate(pixels)))
    return EXIT_OK


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    found = sorted(ckpt_dir.glob("ckpt_*.ckpt"))
    return found[-1] if found else None


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "train")
    samples = import_dataset(args.data)
    if samples and samples[0].image.shape != (cfg.corpus.channels, cfg.corpus.size, cfg.corpus.size):
        raise UsageError(f"corpus at {args.data} has image shape {samples[0].image.shape}, "
                         f"config expects {(cfg.corpus.channels, cfg.corpus.size, cfg.corpus.size)}")
    ckpt_dir = out / "checkpoints"
    params = state = None
    if args.resume:
        latest = _latest_checkpoint(ckpt_dir)
        if latest is None:
            raise UsageError(f"--resume: no checkpoint under {ckpt_dir}")
        params, saved, state = load_checkpoint(latest)
        if saved.config_hash() != cfg.train.config_hash():
            raise UsageError(f"--resume: {latest} was trained with a different config "
                             f"(hash {saved.config_hash()[:12]} vs {cfg.train.config_hash()[:12]})")
        print(f"resuming from {latest} at step {state.step}")
    runcfg.write_run_files(out, cfg, "train", {"data": str(args.data)})
    result = train(cfg.train, samples, params=params, state=state, out_dir=ckpt_dir,
                   log_path=out / "train_log.jsonl")
    final = result.checkpoints[-1] if result.checkpoints else _latest_checkpoint(ckpt_dir)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _sample_seeds(seed: int, n: int) -> list[int]:
    return [seed * 2 ** 20 + i for i in range(n)]


def cmd_sample(args) -> int:
    try:
        prompt = PromptSpec.parse(args.prompt)
    except PromptError as exc:
        raise UsageError(f"{exc}\nprompt grammar: {PROMPT_GRAMMAR}") from None
    if prompt.is_null:
        raise UsageError(f"the prompt needs at least a label; grammar: {PROMPT_GRAMMAR}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    params, tcfg, _ = load_checkpoint(args.checkpoint)
    out = _out(args, "sample")
    pairs = sample_pairs(params, [prompt] * args.n, _sample_seeds(args.seed, args.n),
                         steps=args.steps, guidance=args.guidance)
    export_dataset(pairs, out, tcfg.corpus)
    cfg = runcfg.RunConfig(seed=tcfg.seed, train=tcfg)
    runcfg.write_run_files(out, cfg, "sample", {"checkpoint": str(args.checkpoint), "prompt": prompt.to_string()},
                           {"steps": args.steps, "guidance": args.guidance, "seed": args.seed, "n": args.n})
    from .plotting import sample_grid
    sample_grid(pairs, out / "grid.png", title=prompt.to_string())
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import experiments as ex
    from .plotting import sample_grid

    cfg = _config(args)
    out = _out(args, "eval")
    mode = args.mode
    if mode in ("metrics", "augment") and not args.real:
        raise UsageError(f"--mode {mode} needs --real")
    if mode == "metrics" and not args.checkpoint:
        raise UsageError("--mode metrics needs --checkpoint")
    if mode == "augment" and not (args.checkpoint or args.synth):
        raise UsageError("--mode augment needs --synth or --checkpoint")
    if mode == "ablate" and (args.checkpoint or args.synth):
        raise UsageError("--mode ablate trains its own variants; drop --checkpoint/--synth")
    inputs = {k: str(getattr(args, k)) for k in ("checkpoint", "real", "synth") if getattr(args, k)}
    corpus = cfg.corpus

    params = None
    if args.checkpoint:
        params, tcfg, _ = load_checkpoint(args.checkpoint)
        corpus = tcfg.corpus
        cfg = runcfg.RunConfig(cfg.seed, cfg.count, cfg.prompts, tcfg, cfg.eval)

    if mode == "metrics":
        real = import_dataset(args.real)
        fx = ex.fit_feature_extractor(cfg.eval, corpus)
        pairs = ex.generate_eval_pairs(params, cfg.eval)
        gm = ex.generation_metrics(pairs, real, fx, corpus)
        from .evaluation.report import Report
        report = Report("Generation metrics", ["n_generated", "n_real", "proxy_fid", "proxy_is", "alignment"],
                        notes=[ex.GROUPING_NOTE, f"sampler {SAMPLER}, {cfg.eval.steps} steps, "
                               f"guidance {cfg.eval.guidance:g}; extractor accuracy {fx.accuracy:.3f}"])
        report.add(n_generated=len(pairs), n_real=len(real), **gm)
        report.write(out, "metrics")
        sample_grid(pairs[:16], out / "samples.png", title="generated pairs")
    elif mode == "augment":
        real = import_dataset(args.real)
        test = generate_corpus(cfg.eval.real_test_size, cfg.eval.real_test_seed + 1, corpus)
        synth = import_dataset(args.synth) if args.synth else ex.generate_eval_pairs(
            params, cfg.eval, n=len(ex.subsample(real, cfg.eval.real_fraction, cfg.eval.real_train_seed)))
        try:
            report = ex.run_augmentation_experiment(real, test, synth, cfg.eval, corpus)
        except ex.OverlapError as exc:
            raise UsageError(str(exc)) from None
        report.write(out, "augment")
        sample_grid(synth[:16], out / "synthetic.png", title="synthetic training pairs")
    else:
        grids: dict = {}
        report = ex.run_ablation(cfg.train, cfg.eval, cache_dir=out / "cache", samples_out=grids)
        report.write(out, "ablation")
        for name, pairs in grids.items():
            slug = name.replace("/", "").replace(" ", "_")
            sample_grid(pairs[:16], out / f"samples_{slug}.png", title=name)
    runcfg.write_run_files(out, cfg, f"eval-{mode}", inputs,
                           {"steps": cfg.eval.steps, "guidance": cfg.eval.guidance})
    print(report.to_markdown())
    print(f"reports written to {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairdiff", description="Paired image and mask diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"pairdiff {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML run config")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config entry, e.g. train.steps=200")
        sp.add_argument("--out", help=f"output directory (default: ${runcfg.OUT_ENV}/<command> or runs/<command>)")

    g = sub.add_parser("gen-corpus", help="render a phantom corpus to a dataset directory")
    common(g)
    g.add_argument("--seed", type=int, help="master seed (overrides the config)")
    g.add_argument("--count", type=int, help="number of pairs (overrides the config)")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train the denoiser on a dataset directory")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory written by gen-corpus")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate image and mask pairs from a checkpoint")
    common(s, config=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True, help=PROMPT_GRAMMAR)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="metrics, augmentation experiment or JCA ablation")
    common(e)
    e.add_argument("--mode", choices=("metrics", "augment", "ablate"), default="metrics")
    e.add_argument("--checkpoint")
    e.add_argument("--real", help="real dataset directory")
    e.add_argument("--synth", help="synthetic dataset directory (augment mode)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, runcfg.ConfigError, PromptError) as exc:
        print(f"pairdiff {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CorpusError, CheckpointError, TrainingError, UntrainedModelError,
            NonFiniteError, RuntimeError, ValueError) as exc:
        print(f"pairdiff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
