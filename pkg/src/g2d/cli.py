"""``g2d`` command line: synth, train, embed, eval, gradcheck, report, experiment.

Everything lives under one run directory (``--out``)::

    data/         faces/, masks/, masked/, manifest.tsv
    models/       teacher.g2dm, encoder.g2dm, reformer[_dis].g2dm, classifier[_ce|_dis].g2dm
    logs/         per-stage loss CSVs
    embeddings/   <variant>.emb + .emb.tsv
    eval/         <variant>_<protocol>/ report, roc, histogram, scores CSVs (+ PNGs after report)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, metrics, training
from .config import ConfigError, echo_config, load_config
from .modelio import EmbeddingRow, FormatError, load_model, read_embeddings, save_model, write_embeddings
from .networks import (Critic, DiscriminativeReformer, FeatureClassifier, GenerativeEncoder,
                       InpaintingDecoder, LinearMap, TeacherRecognizer)
from .synthesis import load_dataset, synthesize_dataset

log = logging.getLogger("g2d")


class CliError(RuntimeError):
    pass


# -- run directory layout ----------------------------------------------------

class Run:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.g2dm"

    def log(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.csv"

    def embeddings(self, variant: str) -> Path:
        return self.root / "embeddings" / f"{variant}.emb"

    def eval_dir(self, variant: str, protocol: str) -> Path:
        return self.root / "eval" / f"{variant}_{protocol}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what} artifact: {path}")
    return path


def _suffix(ablation: str) -> str:
    return "" if ablation == "full" else f"_{ablation}"


# -- rebuilding modules from disk ---------------------------------------------

def _load_into(path: Path, *modules) -> None:
    state = load_model(path)
    for m in modules:
        m.load_state(state)
        m.freeze()


def load_teacher(run: Run, cfg, ds) -> TeacherRecognizer:
    t = TeacherRecognizer(ds.n_identities, cfg.teacher.feat_dim, cfg.teacher.width, ds.faces.shape[-1])
    _load_into(_require(run.model("teacher"), "teacher model"), t)
    return t


def load_encoder(run: Run, cfg) -> GenerativeEncoder:
    e = GenerativeEncoder(cfg.encoder.grid_channels, cfg.encoder.width)
    _load_into(_require(run.model("encoder"), "encoder model"), e)
    return e


def load_reformer(run: Run, cfg, variant: str) -> DiscriminativeReformer:
    """Reformer for ``full``/``dis`` from its own file; ``ce`` lives in the CE classifier file."""
    r = cfg.reformer
    ref = DiscriminativeReformer(cfg.encoder.grid_channels, r.width, r.n_blocks, r.embed_dim)
    name = "classifier_ce" if variant == "ce" else f"reformer{_suffix(variant)}"
    _load_into(_require(run.model(name), f"{name} model"), ref)
    return ref


# -- subcommands -------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    run = Run(args.out)
    if (run.data / "manifest.tsv").exists() and not args.force:
        raise CliError(f"{run.data} already holds a dataset; use --force to overwrite")
    s = cfg.synthesis
    ds = synthesize_dataset(s.identities, s.views, s.templates, cfg.run.seed, out_dir=run.data,
                            threads=args.threads)
    echo_config(cfg, run.data)
    print(f"wrote {len(ds)} items ({s.identities} identities x {s.views} views) to {run.data}")
    return 0


def cmd_train(args, cfg) -> int:
    run = Run(args.out)
    ds = load_dataset(_require(run.data / "manifest.tsv", "dataset").parent)
    stage, ablation = args.stage, args.ablation or "full"
    (run.root / "models").mkdir(parents=True, exist_ok=True)
    (run.root / "logs").mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run.root / "models")
    if stage == "teacher":
        res = training.train_teacher(ds, cfg.teacher)
        save_model(run.model("teacher"), res.teacher)
        run.log("teacher").write_text(res.log.csv(), encoding="utf-8")
        for w in res.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"teacher: train acc {res.train_acc:.4f}, val acc {res.val_acc:.4f}")
    elif stage == "encoder":
        teacher = load_teacher(run, cfg, ds)
        res = training.pretrain_encoder(ds, cfg.encoder, teacher)
        save_model(run.model("encoder"), res.encoder)
        save_model(run.model("decoder"), res.decoder, res.critic)
        run.log("encoder").write_text(res.log.csv(), encoding="utf-8")
        print(f"encoder: val reconstruction {res.val_rec_initial:.3f} -> {res.val_rec_final:.3f}, "
              f"unmasked MAE {res.val_unmasked_mae:.4f}")
    elif stage == "reformer":
        if ablation == "ce":
            raise CliError("the CE ablation has no reformer stage; run `train classifier --ablation ce`")
        teacher = load_teacher(run, cfg, ds)
        encoder = load_encoder(run, cfg)
        res = training.train_reformer(ds, teacher, encoder, replace(cfg.reformer, ablation=ablation))
        name = f"reformer{_suffix(ablation)}"
        save_model(run.model(name), res.reformer, res.projection)
        run.log(name).write_text(res.log.csv(), encoding="utf-8")
        print(f"{name}: loss {res.log.rows[0][1]:.4f} -> {res.log.rows[-1][1]:.4f}")
    elif stage == "classifier":
        encoder = load_encoder(run, cfg)
        name = f"classifier{_suffix(ablation)}"
        if ablation == "ce":
            res = training.train_ce_baseline(ds, encoder, cfg.reformer, replace(cfg.classifier, ablation="ce"))
            save_model(run.model(name), res.reformer, res.classifier)
        else:
            reformer = load_reformer(run, cfg, ablation)
            res = training.finetune_classifier(ds, encoder, reformer, replace(cfg.classifier, ablation=ablation))
            save_model(run.model(name), res.classifier)
        run.log(name).write_text(res.log.csv(), encoding="utf-8")
        print(f"{name}: train acc {res.train_acc:.4f}, val acc {res.val_acc:.4f}")
    return 0


def cmd_embed(args, cfg) -> int:
    run = Run(args.out)
    ds = load_dataset(_require(run.data / "manifest.tsv", "dataset").parent)
    variant = args.ablation or "full"
    encoder = load_encoder(run, cfg)
    reformer = load_reformer(run, cfg, variant)
    split = args.split or cfg.eval.split
    part = ds if split == "all" else ds.subset(split)
    roles = ("masked", "unmasked") if args.role == "both" else (args.role,)
    vecs, rows = [], []
    paths = part.paths or [""] * len(part)
    for role in roles:
        if role == "masked":
            vecs.append(training.embed(encoder, reformer, part.masked, part.masks))
        else:
            vecs.append(training.embed(encoder, reformer, part.faces))
        rows += [EmbeddingRow(int(i), p, role == "masked", int(v))
                 for i, v, p in zip(part.identity, part.view, paths)]
    out = Path(args.output) if args.output else run.embeddings(variant)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, np.concatenate(vecs), rows)
    echo_config(cfg, out.parent)
    print(f"wrote {len(rows)} embeddings to {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    run = Run(args.out)
    variant = args.ablation or "full"
    src = Path(args.embeddings) if args.embeddings else run.embeddings(variant)
    vectors, rows = read_embeddings(_require(src, "embedding"))
    protocols = [args.protocol or cfg.eval.protocol] if args.protocol != "both" else list(metrics.PROTOCOLS)
    n_gen = args.n_genuine or cfg.eval.n_genuine
    n_imp = args.n_impostor or cfg.eval.n_impostor
    for protocol in protocols:
        pairs = metrics.build_pairs(rows, protocol, n_gen, n_imp, cfg.run.seed)
        ss = metrics.score_pairs(vectors, pairs)
        rep = metrics.report(ss, cfg.eval.bins)
        d = run.eval_dir(src.stem, protocol)
        metrics.emit(rep, ss, d)
        echo_config(cfg, d)
        print(f"{src.stem} {protocol}: ACC {rep.acc:.4f} EER {rep.eer:.4f} FDR {rep.fdr:.3f} -> {d}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import format_table, run_suite
    results, elapsed = run_suite(args.points, cfg.run.seed, args.corrupt)
    print(format_table(results))
    failed = [r.name for r in results if not r.ok]
    print(f"# {len(results)} checks x {args.points} points in {elapsed:.1f} s", file=sys.stderr)
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_report(args, cfg) -> int:
    from .plotting import render_tree
    root = Path(args.source) if args.source else Run(args.out).root / "eval"
    if not root.exists():
        raise CliError(f"missing evaluation artifact: {root}")
    lines = ["evaluation,metric,value,threshold"]
    for rep_path in sorted(root.rglob("report.csv")):
        for metric, (value, thr) in metrics.read_report(rep_path).items():
            lines.append(f"{rep_path.parent.relative_to(root)},{metric},{value!r},{thr}")
    (root / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    figures = render_tree(root)
    echo_config(cfg, root)
    print(f"{len(lines) - 1} metric rows in {root / 'summary.csv'}; {len(figures)} figures")
    return 0


def cmd_experiment(args, cfg) -> int:
    from .experiment import run_experiment
    from .plotting import render_tree
    out = Run(args.out).root / "experiment"
    res = run_experiment(cfg, args.seeds, out)
    render_tree(out)
    echo_config(cfg, out)
    for c in res.criteria(args.budget):
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return 0


# -- entry point -------------------------------------------------------------

def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand.

    The subcommand copy uses SUPPRESS defaults so that it cannot overwrite a
    value already given before the subcommand.
    """
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="INI config file")
    common.add_argument("--seed", type=int, default=d(None), help="overrides [global] seed")
    common.add_argument("--out", default=d("g2d_run"), help="run directory (default: g2d_run)")
    common.add_argument("--force", action="store_true", default=d(False),
                        help="allow overwriting an existing dataset")
    common.add_argument("--threads", type=int, default=d(None),
                        help="worker threads (fallback: $G2D_THREADS, then 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="g2d", parents=[_common_flags(False)],
                                description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"g2d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = _common_flags(True)

    sub.add_parser("synth", parents=[common], help="generate the procedural dataset")
    t = sub.add_parser("train", parents=[common], help="train one pipeline stage")
    t.add_argument("stage", choices=("teacher", "encoder", "reformer", "classifier"))
    t.add_argument("--ablation", choices=("ce", "dis"))
    e = sub.add_parser("embed", parents=[common], help="write reformed embeddings")
    e.add_argument("--ablation", choices=("ce", "dis"))
    e.add_argument("--split", choices=("train", "val", "all"))
    e.add_argument("--role", choices=("masked", "unmasked", "both"), default="both")
    e.add_argument("--output", help="embedding file (default: embeddings/<variant>.emb)")
    v = sub.add_parser("eval", parents=[common], help="verification metrics from embeddings")
    v.add_argument("--ablation", choices=("ce", "dis"))
    v.add_argument("--embeddings", help="embedding file (default: embeddings/<variant>.emb)")
    v.add_argument("--protocol", choices=(*metrics.PROTOCOLS, "both"))
    v.add_argument("--n-genuine", type=int)
    v.add_argument("--n-impostor", type=int)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--points", type=int, default=10)
    gc.add_argument("--corrupt", metavar="OP", help="test fixture: perturb one op's gradient")
    r = sub.add_parser("report", parents=[common], help="summary CSV and figures for evaluations")
    r.add_argument("--source", help="directory to scan (default: <out>/eval)")
    x = sub.add_parser("experiment", parents=[common], help="multi-seed toy reproduction")
    x.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    x.add_argument("--budget", type=float, default=600.0, help="runtime budget in seconds")
    return p


def resolve_threads(flag) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("G2D_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"G2D_THREADS must be an integer, got {env!r}") from None
    return 1


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "embed": cmd_embed, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "report": cmd_report, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        threads = resolve_threads(args.threads if args.threads is not None
                                  else (cfg.run.threads or None))
        args.threads = threads
        seed = cfg.run.seed if args.seed is None else args.seed
        cfg = cfg.with_seed(seed)
        cfg = replace(cfg, run=replace(cfg.run, threads=threads))
        return COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, FormatError, FileNotFoundError, OSError,
            metrics.MetricError, training.TrainingError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"g2d {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
