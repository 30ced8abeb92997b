"""Command-line entry point: ``cssl <subcommand> ...``.

Run-directory layout (one directory per pipeline run)::

    config.txt            exact configuration used (re-run with --config)
    stage1.npz            M1 after masked-autoencoder pretraining
    stage1_loss.tsv/.png  per-step loss and learning rate
    buffer.jsonl          rehearsal buffer manifest (header line + one record per sample)
    stage3.npz            M2 after continual pretraining
    stage3_loss.tsv/.png
    finetuned.npz         classifier (tokenizer, encoder, head)
    finetune_curve.tsv    per-epoch evaluation accuracy during fine-tuning
    metrics.json          ACC / AUC / F1 and confusion counts

Data directories written by ``gen-data`` hold ``d1/``, ``d2/``, ``ft_train/``
and ``ft_test/``, each with 16-bit PNGs and a ``manifest.jsonl``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .continual_trainer import continual_train_stage3, pretrain_stage1, write_loss_curve
from .datasets import export_dataset, load_dataset
from .errors import CheckpointError, InvalidArgument, MissingArtifact, TrainingDiverged
from .experiments import (TABLE2_GAMMAS, ExperimentPlan, build_datasets, convergence_curve,
                          format_summary, read_curves, read_results, run_plan, summarize,
                          write_curve, write_curves)
from .finetune_eval import Classifier, evaluate, finetune
from .mae_model import build_model, load_into, load_mae, save_checkpoint
from .rehearsal import build_buffer, derive_buffer_params, read_buffer_manifest, write_buffer_manifest

log = logging.getLogger("cssl")

SPLITS = ("d1", "d2", "ft_train", "ft_test")


# ---------------------------------------------------------------------------
# helpers


def _parse_sets(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidArgument(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = config_mod._parse_value(v)
    return out


def resolve_config(args, *fallbacks):
    """Preset, then an explicit --config or the first existing fallback file, then --set."""
    cfg = config_mod.preset(args.preset)
    source = getattr(args, "config", None)
    if source is None:
        source = next((p for p in fallbacks if p is not None and Path(p).exists()), None)
    if source is not None:
        cfg = config_mod.load(source, cfg)
    cfg = config_mod.apply_overrides(cfg, _parse_sets(args.set))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _require(path, producer):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _load_split(data_dir, name):
    return load_dataset(_require(Path(data_dir) / name / "manifest.jsonl", "gen-data").parent)


def _save_loss(history, run, stem):
    from .plotting import plot_loss_curve

    write_loss_curve(history, run / f"{stem}_loss.tsv")
    if history:
        plot_loss_curve(history, run / f"{stem}_loss.png")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    cfg = resolve_config(args)
    data = build_datasets(cfg)
    out.mkdir(exist_ok=True)
    for name in SPLITS:
        export_dataset(data[name], out / name)
    config_mod.save(cfg, out / "config.txt")
    for name in SPLITS:
        print(f"{name}\t{len(data[name])}")
    return 0


def cmd_pretrain(args):
    run = Path(args.run)
    cfg = resolve_config(args, run / "config.txt", Path(args.data) / "config.txt")
    d1 = _load_split(args.data, "d1")
    run.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, run / "config.txt")
    model = build_model(cfg.model, cfg.stage1.seed)
    history = pretrain_stage1(model, d1, cfg.stage1, out_dir=run)
    save_checkpoint(model, run / "stage1.npz", "stage1")
    _save_loss(history, run, "stage1")
    last = history[-1]["loss_mse"] if history else float("nan")
    print(f"stage1\tsteps={len(history)}\tfinal_loss={last:.6f}")
    return 0


def cmd_build_buffer(args):
    n1, alpha, beta = (getattr(args, k, None) for k in ("n1", "alpha", "beta"))
    if n1 is not None:
        K, T = derive_buffer_params(n1, 0.01 if alpha is None else alpha,
                                    0.05 if beta is None else beta)
        print(f"K={K}\tT={T}")
        return 0
    run = Path(args.run)
    cfg = resolve_config(args, run / "config.txt", Path(args.data) / "config.txt")
    reh = cfg.rehearsal
    if alpha is not None or beta is not None:
        reh = replace(reh, alpha=reh.alpha if alpha is None else alpha,
                      beta=reh.beta if beta is None else beta)
    model, _ = load_mae(_require(run / "stage1.npz", "pretrain"), cfg.model)
    d1, d2 = _load_split(args.data, "d1"), _load_split(args.data, "d2")
    buf = build_buffer(model, d1, d2, reh.alpha, reh.beta, reh.gamma, reh.seed, reh.strategy)
    write_buffer_manifest(buf, run / "buffer.jsonl")
    h = buf.header
    print(f"K={h['K']}\tT={h['T']}\tgroups={':'.join(map(str, buf.group_counts()))}")
    return 0


def cmd_continual(args):
    run = Path(args.run)
    cfg = resolve_config(args, run / "config.txt")
    m1, _ = load_mae(_require(run / "stage1.npz", "pretrain"), cfg.model)
    buf = read_buffer_manifest(_require(run / "buffer.jsonl", "build-buffer"))
    d1, d2 = _load_split(args.data, "d1"), _load_split(args.data, "d2")
    m2, history = continual_train_stage3(m1, d2, d1, buf, cfg.stage3, out_dir=run)
    save_checkpoint(m2, run / "stage3.npz", "stage3")
    _save_loss(history, run, "stage3")
    print(f"stage3\tsteps={len(history)}\tbuffer={len(buf)}")
    return 0


def cmd_finetune(args):
    run = Path(args.run)
    cfg = resolve_config(args, run / "config.txt", Path(args.data) / "config.txt")
    run.mkdir(parents=True, exist_ok=True)
    if args.init == "init":
        model = build_model(cfg.model, cfg.stage1.seed)
        config_mod.save(cfg, run / "config.txt")
    else:
        producer = "continual" if args.init == "stage3" else "pretrain"
        model, _ = load_mae(_require(run / f"{args.init}.npz", producer), cfg.model)
    ft_cfg = cfg.finetune
    if args.freeze_encoder:
        ft_cfg = replace(ft_cfg, freeze_encoder=True)
    train, test = _load_split(args.data, "ft_train"), _load_split(args.data, "ft_test")
    clf, curve = finetune(model, train, ft_cfg, test)
    save_checkpoint(clf, run / "finetuned.npz", "finetuned", extra={"init": args.init})
    write_curve(curve, run / "finetune_curve.tsv")
    print(f"finetuned\tinit={args.init}\tepochs={len(curve)}\tlast_acc={curve[-1]:.3f}"
          if curve else f"finetuned\tinit={args.init}")
    return 0


def cmd_evaluate(args):
    run = Path(args.run)
    path = _require(run / "finetuned.npz", "finetune")
    model, meta = load_mae_for_classifier(path)
    test = _load_split(args.data, "ft_test")
    curve_path = run / "finetune_curve.tsv"
    from .experiments import read_curve

    curve = read_curve(curve_path) if curve_path.exists() else []
    report = evaluate(model, test, curve)
    (run / "metrics.json").write_text(report.to_json() + "\n")
    print("method\torder\tACC\tAUC\tF1")
    print(report.row(args.method, args.order))
    return 0


def load_mae_for_classifier(path):
    from .mae_model import ModelConfig, read_checkpoint

    meta, _ = read_checkpoint(path)
    if meta["stage"] != "finetuned":
        raise CheckpointError(f"{path} holds a {meta['stage']} model, not a classifier")
    cfg = ModelConfig(**meta["config"])
    clf = Classifier(build_model(cfg))
    load_into(clf, path, cfg)
    return clf, meta


def cmd_run(args):
    """Whole pipeline into one run directory."""
    for fn in (cmd_pretrain, cmd_build_buffer, cmd_continual):
        fn(args)
    args.init = "stage3"
    args.freeze_encoder = False
    cmd_finetune(args)
    return cmd_evaluate(args)


def _parse_gammas(text):
    out = []
    for part in text.split(","):
        vals = tuple(float(x) if "." in x else int(x) for x in part.strip().split(":"))
        if len(vals) != 3:
            raise InvalidArgument(f"gamma {part!r} needs three ':'-separated weights")
        out.append(vals)
    return tuple(out)


def cmd_ablate(args):
    from .plotting import plot_convergence, plot_summary

    out = Path(args.run)
    cfg = resolve_config(args, out / "config.txt")
    gammas = TABLE2_GAMMAS if args.table2 else _parse_gammas(args.gammas)
    plan = ExperimentPlan(methods=tuple(args.methods.split(",")),
                          orders=tuple(args.orders.split(",")), gammas=gammas,
                          seeds=tuple(int(s) for s in args.seeds.split(",")))
    ran = run_plan(plan, cfg, out, jobs=args.jobs)
    records = [r for r in read_results(out / "results.tsv") if r["cell"] in
               {c.key for c in plan.cells()}]
    failed = [r for r in ran if r["status"] != "ok"]
    rows = summarize(records)
    table = format_summary(rows)
    (out / "summary.tsv").write_text(table)
    series = convergence_curve(records)
    write_curves(series, out / "convergence.tsv")
    plot_convergence(series, out / "convergence.png")
    if rows:
        plot_summary(rows, out / "summary.png")
    print(f"cells run: {len(ran)}\tfailed: {len(failed)}")
    print(table, end="")
    return 1 if failed else 0


def cmd_plot(args):
    from .plotting import plot_convergence

    series = read_curves(_require(args.curves, "ablate"))
    plot_convergence(series, args.out)
    if args.data_out:
        write_curves(series, args.data_out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _config_args(p):
    p.add_argument("--preset", default="tiny", choices=("tiny", "full", "paper"),
                   help="base configuration (default: tiny)")
    p.add_argument("--config", help="config file (section.key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key, e.g. stage1.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, help="derive all training seeds from this value")


def build_parser():
    parser = argparse.ArgumentParser(prog="cssl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic two-domain datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    _config_args(p)
    p.set_defaults(fn=cmd_gen_data)

    def with_run(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=name != "build-buffer", help="gen-data output directory")
        p.add_argument("--run", required=name != "build-buffer", help="run directory")
        _config_args(p)
        p.set_defaults(fn=fn)
        return p

    with_run("pretrain", cmd_pretrain, "stage 1: masked-autoencoder pretraining on d1")
    p = with_run("build-buffer", cmd_build_buffer, "stage 2: select the rehearsal buffer")
    p.add_argument("--alpha", type=float, help="cluster ratio, K = floor(N1 * alpha)")
    p.add_argument("--beta", type=float, help="buffer ratio, T = floor(N1 * beta)")
    p.add_argument("--n1", type=int, help="only print K and T for this N1")
    with_run("continual", cmd_continual, "stage 3: continual pretraining on d2 + buffer")
    p = with_run("finetune", cmd_finetune, "fine-tune a classifier on ft_train")
    p.add_argument("--init", default="stage3", choices=("stage3", "stage1", "init"),
                   help="which encoder to start from (init = no pretraining)")
    p.add_argument("--freeze-encoder", action="store_true")
    for name, fn, h in (("evaluate", cmd_evaluate, "ACC / AUC / F1 on ft_test"),
                        ("run", cmd_run, "pretrain, build-buffer, continual, finetune, evaluate")):
        p = with_run(name, fn, h)
        p.add_argument("--method", default="ours")
        p.add_argument("--order", default="d1_then_d2")

    p = sub.add_parser("ablate", help="run an experiment plan and write tables and figures")
    p.add_argument("--run", required=True, help="output directory (resumable)")
    p.add_argument("--methods", default="ours,no_pretrain,random_buffer")
    p.add_argument("--orders", default="d1_then_d2")
    p.add_argument("--gammas", default="6:3:1")
    p.add_argument("--table2", action="store_true", help="use the six-ratio gamma grid")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    _config_args(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="render a convergence TSV to an image")
    p.add_argument("curves")
    p.add_argument("--out", required=True)
    p.add_argument("--data-out", help="also re-write the curve data here")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (InvalidArgument, CheckpointError, TrainingDiverged, MissingArtifact,
            FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
