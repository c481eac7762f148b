"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 I/O or data error,
3 numeric or training error. Diagnostics go to stderr, results to stdout.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import __version__, kernels
from .checkpoint import load_checkpoint, make_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, load_config
from .efficiency import audit_forward
from .errors import (CorruptCheckpoint, FsnnError, InvalidConfig, ManifestError, VersionMismatch,
                     VolumeError)
from .lif import LifConfig
from .metrics import (evaluate_predictions, format_table, paired_bootstrap, report_json, roc_csv)
from .model import ModelConfig, build_model
from .training import (Dataset, JsonlLog, TrainState, cross_validate, fit, predict)
from .volume_io import (ManifestEntry, Volume3D, load_volume, preprocess, read_manifest,
                        stratified_split, synth_dataset, write_manifest, write_rvol)

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


def _err(msg):
    print(f"fastersnn: {msg}", file=sys.stderr)


# -- data ------------------------------------------------------------------
def encode_entries(entries, model_cfg, data_cfg):
    samples = []
    for i, e in enumerate(entries):
        vol = load_volume(e.path)
        samples.append(preprocess(vol, model_cfg.input_dims, model_cfg.T, data_cfg.noise_sigma,
                                  seed=data_cfg.seed * 1_000_003 + i, label=e.label))
    return Dataset.from_samples(samples)


def split_entries(entries, data_cfg):
    """Group manifest entries by split tag; untagged manifests get a stratified holdout."""
    if all(not e.split for e in entries):
        plan = stratified_split([e.label for e in entries], data_cfg.holdout, data_cfg.seed)
        tags = ["train"] * len(entries)
        for i in plan.test_indices:
            tags[i] = "test"
        entries = [ManifestEntry(e.path, e.label, t) for e, t in zip(entries, tags)]
    groups = {}
    for e in entries:
        groups.setdefault(e.split or "train", []).append(e)
    return groups


def _model_from_ckpt(ckpt):
    d = dict(ckpt.model_config)
    d["lif"] = LifConfig(**d["lif"])
    model = build_model(ModelConfig.from_dict(d))
    return restore_model(model, ckpt)


# -- commands --------------------------------------------------------------
def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    dims = tuple(args.dims) * 3 if len(args.dims) == 1 else tuple(args.dims)
    vols, labels = synth_dataset(args.n_per_class, classes=args.classes, dims=dims, seed=args.seed)
    plan = stratified_split(labels, args.split, seed=args.seed) if args.split else None
    entries, counters = [], {}
    for i, (v, y) in enumerate(zip(vols, labels)):
        k = counters[y] = counters.get(y, -1) + 1
        path = os.path.join(args.out, f"class{y}_{k:03d}.rvol")
        write_rvol(v, path)
        tag = "" if plan is None else ("test" if plan.fold_assignments[i] else "train")
        entries.append(ManifestEntry(path, y, tag))
    manifest = os.path.join(args.out, "manifest.tsv")
    write_manifest(entries, manifest)
    print(manifest)
    return 0


def cmd_train(args):
    run = load_config(args.config)
    if args.epochs is not None:
        run = RunConfig(run.model, run.train.__class__.from_dict({**run.train.to_dict(),
                                                                  "max_epochs": args.epochs}),
                        run.data)
    if args.deterministic:
        kernels.set_threads(1)
    if not run.data.manifest:
        raise InvalidConfig("data.manifest is not set")
    manifest = run.data.manifest
    if not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(args.config)), manifest)
    groups = split_entries(read_manifest(manifest), run.data)
    if "train" not in groups:
        raise ManifestError("manifest has no 'train' split")
    os.makedirs(args.out, exist_ok=True)
    header = {"tool_version": __version__, "config": run.to_dict()}
    log = JsonlLog(os.path.join(args.out, "train.log.jsonl"), header, append=bool(args.resume))
    train_all = encode_entries(groups["train"], run.model, run.data)
    extra = {"run_config": run.to_dict()}

    if args.kfold:
        cv = cross_validate(train_all, run.model, run.train, k=args.kfold, out_dir=args.out,
                            log=log, header_extra=extra)
        out = {"tool_version": __version__, "config": run.to_dict(), "kfold": args.kfold,
               "summary": cv.summary, "folds": [r.to_dict() for r in cv.reports]}
        _write(os.path.join(args.out, "metrics.json"), json.dumps(out, indent=2, sort_keys=True))
        print(format_table({f"{args.kfold}-fold": cv.summary}), end="")
        return 0

    if "val" in groups:
        train_ds, val_ds = train_all, encode_entries(groups["val"], run.model, run.data)
    else:
        try:
            plan = stratified_split(train_all.y, run.data.val_holdout, seed=run.data.seed)
            train_ds, val_ds = train_all.subset(plan.train_indices), train_all.subset(plan.test_indices)
        except FsnnError:
            _err("training split too small for a validation holdout; validating on train")
            train_ds, val_ds = train_all, None

    model = build_model(run.model)
    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.model_config != run.model.to_dict():
            raise InvalidConfig("--resume checkpoint was written for a different model config")
        restore_model(model, ckpt)
        state = TrainState.from_checkpoint(ckpt)
    res = fit(model, train_ds, run.train, val_ds=val_ds, state=state, out_dir=args.out, log=log,
              header_extra=extra)
    if res.best_checkpoint is None and os.path.exists(os.path.join(args.out, "best.ckpt")):
        restore_model(model, load_checkpoint(os.path.join(args.out, "best.ckpt")))
    elif res.best_checkpoint is not None:
        restore_model(model, res.best_checkpoint)
    out = {"tool_version": __version__, "config": run.to_dict(), "best_epoch": res.best_epoch,
           "best_val_accuracy": res.best_accuracy}
    if "test" in groups:
        test = encode_entries(groups["test"], run.model, run.data)
        probs, *_ = predict(model, test, run.train.batch_size)
        rep = evaluate_predictions(test.y, probs, run.model.n_classes)
        out["test"] = rep.to_dict()
        _write(os.path.join(args.out, "roc.csv"), roc_csv(probs, test.y))
        print(format_table({"test": rep}), end="")
    _write(os.path.join(args.out, "metrics.json"), json.dumps(out, indent=2, sort_keys=True))
    return 0


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _eval_split(ckpt_path, entries, data_cfg):
    ckpt = load_checkpoint(ckpt_path)
    model = _model_from_ckpt(ckpt)
    ds = encode_entries(entries, model.cfg, data_cfg)
    probs, *_ = predict(model, ds)
    return model, ds, probs


def cmd_eval(args):
    run = load_config(args.config) if args.config else RunConfig()
    groups = split_entries(read_manifest(args.manifest), run.data)
    if args.split not in groups:
        raise ManifestError(f"manifest has no '{args.split}' split (found: {sorted(groups)})")
    model, ds, probs = _eval_split(args.ckpt, groups[args.split], run.data)
    rep = evaluate_predictions(ds.y, probs, model.cfg.n_classes)
    extra = {"split": args.split, "checkpoint": args.ckpt, "tool_version": __version__}
    rows = {os.path.basename(args.ckpt): rep}
    if args.compare:
        other, _, probs_b = _eval_split(args.compare, groups[args.split], run.data)
        rep_b = evaluate_predictions(ds.y, probs_b, other.cfg.n_classes)
        p = paired_bootstrap(np.argmax(probs, 1), np.argmax(probs_b, 1), ds.y,
                             iterations=args.iterations, seed=args.seed)
        extra.update(compare=args.compare, compare_metrics=rep_b.to_dict(), p_value=p,
                     bootstrap_iterations=args.iterations)
        rows[os.path.basename(args.compare) + " (B)"] = rep_b
    text = report_json(rep, **extra)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "metrics.json"), text)
        _write(os.path.join(args.out, "roc.csv"), roc_csv(probs, ds.y))
    if args.json:
        print(text)
    else:
        print(format_table(rows), end="")
        if args.compare:
            print(f"paired bootstrap p = {extra['p_value']:.4f} ({args.iterations} iterations)")
    return 0


def cmd_report(args):
    if args.ckpt:
        model = _model_from_ckpt(load_checkpoint(args.ckpt))
    else:
        run = load_config(args.config) if args.config else RunConfig()
        model = build_model(run.model)
    cfg = model.cfg
    if args.input:
        sample = preprocess(load_volume(args.input), cfg.input_dims, cfg.T, args.noise_sigma,
                            seed=args.seed)
        x = sample.tensor[:, None, None]
    else:
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((cfg.T, 1, cfg.in_channels) + cfg.input_dims).astype(np.float32)
    report = audit_forward(model, x)
    print(report.to_text(), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "efficiency.json"), report.to_json())
        _write(os.path.join(args.out, "efficiency.csv"), report.to_csv())
        for name, vol in export_attention(model, x).items():
            path = os.path.join(args.out, f"attention_{name}.rvol")
            write_rvol(Volume3D.from_array(vol), path)
            print(f"wrote {path} {vol.shape}", file=sys.stderr)
    return 0


def export_attention(model, x):
    """Spatial SWA maps per stage, averaged over timesteps: name -> (d, h, w)."""
    from .tensor import no_grad
    model.eval()
    with no_grad():
        out = model.forward(x, attention=True)
    steps = x.shape[0]
    maps = {}
    for name, ws in out.attention.items():
        ws = ws.reshape((steps, -1) + ws.shape[1:])[:, 0, 0]
        maps[name.replace(".swa", "").replace(".", "")] = ws.mean(axis=0)
    return maps


def cmd_inspect(args):
    ckpt = load_checkpoint(args.ckpt)
    n = sum(int(a.size) for a in ckpt.params.values())
    print(json.dumps({"header": ckpt.header, "n_params": n, "n_tensors": len(ckpt.params),
                      "n_buffers": len(ckpt.buffers), "has_optimizer": bool(ckpt.adam_m)},
                     indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fastersnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--backend", choices=kernels.available_backends(), help="kernel backend")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="write a synthetic 3-class dataset as .rvol + manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=8)
    s.add_argument("--dims", type=int, nargs="+", default=[32])
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="holdout(8:2)",
                   help="split scheme for the manifest's split column ('' for none)")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint with optimizer state (e.g. last.ckpt)")
    t.add_argument("--kfold", type=int, help="run k-fold cross-validation instead")
    t.add_argument("--epochs", type=int, help="override train.max_epochs")
    t.add_argument("--deterministic", action="store_true", help="single-threaded kernels")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--config", help="data settings (noise, seeds); defaults otherwise")
    e.add_argument("--split", default="test")
    e.add_argument("--compare", help="second checkpoint for a paired bootstrap test")
    e.add_argument("--iterations", type=int, default=5000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--json", action="store_true", help="print JSON instead of the table")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="efficiency audit and attention export for one input")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--input", help=".nii or .rvol volume")
    src.add_argument("--random", action="store_true", help="seeded Gaussian input (default)")
    r.add_argument("--ckpt")
    r.add_argument("--config", help="build a fresh model from this config when no --ckpt")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--noise-sigma", type=float, default=0.1)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    i = sub.add_parser("inspect", help="print a checkpoint's header and tensor summary")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    if args.backend:
        kernels.set_backend(args.backend)
    try:
        return args.fn(args)
    except InvalidConfig as e:
        _err(f"config error: {e}")
        return EXIT_CONFIG
    except (OSError, VolumeError, ManifestError, CorruptCheckpoint, VersionMismatch) as e:
        _err(f"i/o error: {e}")
        return EXIT_IO
    except (FsnnError, ArithmeticError) as e:
        _err(f"{type(e).__name__}: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
