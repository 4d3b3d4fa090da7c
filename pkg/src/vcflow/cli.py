"""Command-line entry point: ``vcflow <command> [--config PATH] [--seed N] [--out DIR] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import datetime as _dt
import sys
import time
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .config import PipelineConfig
from .dsp import ConfigError, WavError, read_wav, write_wav
from .evaluate import EvalError, evaluate
from .pipeline import (
    CONTENT_CKPT,
    InsufficientPrompt,
    Models,
    RunDir,
    StageError,
    convert,
    load_content,
    load_models,
    load_pitch,
    new_flow_model,
    stage_fit_content,
    stage_make_corpus,
    stage_train_cfm,
    stage_train_pitch,
    PITCH_CKPT,
)

COMMANDS = ("make-corpus", "train-pitch", "fit-content", "train-cfm", "convert", "eval", "gradcheck")


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    return cfg


def resolve_run_dir(cfg: PipelineConfig, out: str | None, runs_root: Path = Path("runs")) -> Path:
    """``--out`` if given, else the newest ``runs/*-<hash>`` for this config, else a fresh one."""
    if out:
        return Path(out)
    h = cfg.hash("cfm")
    existing = sorted(runs_root.glob(f"*-{h}")) if runs_root.exists() else []
    if existing:
        return existing[-1]
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return runs_root / f"{stamp}-{h}"


class Logger:
    def __init__(self, run: RunDir, quiet: bool = False):
        self.run = run
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg, flush=True)
        self.run.log(msg)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'section.key = value' lines")
    common.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    common.add_argument("--out", help="run directory (default runs/<timestamp>-<confighash>)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override; repeatable")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="vcflow", description="Pitch-conditioned flow-matching voice conversion on a synthetic corpus.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("make-corpus", parents=[common], help="synthesize the corpus")
    sub.add_parser("train-pitch", parents=[common], help="train the pitch VQ-VAE")
    sub.add_parser("fit-content", parents=[common], help="fit the content k-means")
    sub.add_parser("train-cfm", parents=[common], help="train the flow-matching decoder")
    c = sub.add_parser("convert", parents=[common], help="convert source utterances to prompt voices")
    c.add_argument("--manifest", help="lines 'source.wav<TAB>prompt.wav<TAB>out.wav'")
    c.add_argument("--source")
    c.add_argument("--prompt")
    c.add_argument("--output")
    e = sub.add_parser("eval", parents=[common], help="evaluate on unseen-speaker conversion pairs")
    e.add_argument("--report", help="report path (default <run>/eval.tsv)")
    e.add_argument("--no-sweep", action="store_true", help="skip the ODE step sweep")
    e.add_argument("--untrained", action="store_true", help="evaluate a freshly initialized flow decoder")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable block")
    g.add_argument("--rtol", type=float, default=1e-4)
    return p


def _convert_jobs(args) -> list[tuple[str, str, str]]:
    if args.manifest:
        jobs = []
        for n, line in enumerate(Path(args.manifest).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{args.manifest}:{n}: expected 'source<TAB>prompt<TAB>out'")
            jobs.append(tuple(parts))
        return jobs
    if args.source and args.prompt and args.output:
        return [(args.source, args.prompt, args.output)]
    raise ConfigError("convert needs --manifest or all of --source, --prompt and --output")


def run_command(args) -> int:
    cfg = resolve_config(args)
    root = resolve_run_dir(cfg, args.out)
    run = RunDir(root, cfg)
    root.mkdir(parents=True, exist_ok=True)
    log = Logger(run, args.quiet)
    (root / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    log(f"[{_dt.datetime.now().isoformat(timespec='seconds')}] {args.command} seed={cfg.seed} config_hash={cfg.hash()} run={root}")
    t0 = time.time()
    cmd = args.command
    if cmd == "make-corpus":
        stage_make_corpus(run, log)
    elif cmd == "train-pitch":
        stage_train_pitch(run, log)
    elif cmd == "fit-content":
        stage_fit_content(run, log)
    elif cmd == "train-cfm":
        stage_train_cfm(run, log)
    elif cmd == "convert":
        models = load_models(run, "convert")
        for i, (src, prompt, out) in enumerate(_convert_jobs(args)):
            res = convert(read_wav(src), read_wav(prompt), models, seed=cfg.seed * 1000 + i)
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            write_wav(res.waveform, out)
            log(f"converted {src} with prompt {prompt} -> {out}")
    elif cmd == "eval":
        corpus = run.corpus("eval")
        if args.untrained:
            pitch_model, _ = load_pitch(run.require("eval", PITCH_CKPT, "train-pitch"), cfg)
            kmeans = load_content(run.require("eval", CONTENT_CKPT, "fit-content"), cfg)
            models = Models(pitch_model, kmeans, new_flow_model(cfg), cfg)
        else:
            models = load_models(run, "eval")
        report = evaluate(corpus, models, sweep=not args.no_sweep, log=log)
        path = Path(args.report) if args.report else root / "eval.tsv"
        path.write_text(report.to_tsv(), encoding="utf-8")
        for row in report.sweep:
            log(f"sweep ode_steps={row['ode_steps']} wall_clock_s={row['wall_clock_s']:.3f} content_match={row['content_match']:.4f}")
        log(report.summary_line())
    elif cmd == "gradcheck":
        from .gradsuite import run_suite

        results = run_suite(rtol=args.rtol, seed=cfg.seed, log=log)
        (root / "gradcheck.txt").write_text("\n\n".join(f"[{r.name}]\n{r.report}" for r in results) + "\n", encoding="utf-8")
        failed = [r.name for r in results if not r.passed]
        if failed:
            print(f"error: gradcheck failed for {', '.join(failed)}", file=sys.stderr)
            return 1
    log(f"{cmd} done in {time.time() - t0:.1f}s")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return run_command(args)
    except (StageError, ConfigError, CheckpointError, InsufficientPrompt, WavError, EvalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
