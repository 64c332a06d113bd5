"""Command-line entry point: ``ecg-tinynet <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dsp
from .bench import benchmark
from .config import RunConfig, load_config, with_overrides
from .datasets import CacheDataset
from .ecg_io import (EcgRecord, Manifest, SplitPlan, build_manifest, default_label_map, make_splits,
                     read_cache, read_record, write_cache, write_record)
from .evaluation import cross_validate, evaluate
from .exceptions import (ConfigError, DataError, EcgError, LeadCountMismatch, NameSetMismatch,
                         NumericError)
from .model import (VARIANTS, ModelConfig, ModelParams, build, canonical_names, count_params,
                    predict_proba, variant, variant_name)
from .synth import CLASS_ORDER, synth_ecg
from .train import fit
from .weights import load_weights, save_weights

log = logging.getLogger("ecg_tinynet")

RUN_DIR_ENV = "ECG_TINYNET_RUN_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# helpers

def make_run_dir(base, seed: int, command: str) -> Path:
    """Fresh ``<base>/<timestamp>_<command>_seed<seed>``; never reuses an existing path."""
    base = Path(base or os.environ.get(RUN_DIR_ENV) or "runs")
    stem = f"{time.strftime('%Y%m%d-%H%M%S')}_{command}_seed{seed}"
    path, n = base / stem, 1
    while True:
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            path, n = base / f"{stem}-{n}", n + 1


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, args.seed, args.leads, args.variant)


def _seed(cfg: RunConfig) -> int:
    return cfg.train.seed


def _manifest(cfg: RunConfig) -> Manifest:
    return Manifest.from_csv(cfg.data.path("manifest"), cfg.label_map().class_names)


def _dataset(cfg: RunConfig, manifest: Manifest, ids=None) -> CacheDataset:
    primary = dict(zip(manifest.ids, manifest.primary_labels.tolist()))
    ids = manifest.ids if ids is None else ids
    labels = [primary[i] for i in ids]
    cache = cfg.data.path("cache_dir")
    if not cache.is_dir():
        raise DataError(f"cache directory not found: {cache} (run `preprocess` first)")
    ds = CacheDataset(cache, ids, labels, list(cfg.lead_selection()) if cfg.lead_selection() else None)
    leads = ds.sample_shape[0]
    if leads != cfg.leads:
        raise LeadCountMismatch(f"cache holds {leads}-lead signals but the run expects {cfg.leads} lead(s)")
    return ds


def _split(cfg: RunConfig, manifest: Manifest) -> SplitPlan:
    path = cfg.data.path("splits")
    plan = SplitPlan.from_csv(path) if path.exists() else make_splits(manifest, _seed(cfg))
    if plan.mode != "holdout":
        plan = make_splits(manifest, _seed(cfg))
    return plan


def _lead_label(n: int) -> str:
    return "12-lead" if n == 12 else "Lead-I" if n == 1 else f"{n}-lead"


def check_leads(params: ModelParams, n_leads: int, source: str) -> None:
    want = params.config.input_leads
    if want != n_leads:
        raise LeadCountMismatch(
            f"lead-count mismatch: the weights are a {_lead_label(want)} model ({want} input lead(s)) "
            f"but {source} provides {n_leads} lead(s); use {_lead_label(n_leads)} weights or --leads {want}")


def _load_inputs(paths, cfg: RunConfig, params: ModelParams, leads_flag: int | None):
    """Read, condition and lead-select records for a loaded model."""
    lm = cfg.label_map()
    want = params.config.input_leads
    if leads_flag is not None:
        check_leads(params, leads_flag, "--leads")
    files = []
    for p in map(Path, paths):
        files += sorted(p.glob("*.hea")) if p.is_dir() else [p]
    if not files:
        raise DataError("no input records given")
    out = []
    for f in files:
        if f.suffix == ".ecgs":
            sig, _ = read_cache(f)
            rec_id = f.stem
        else:
            rec = read_record(f, lm) if f.suffix == ".hea" else None
            if rec is None:
                raise DataError(f"unsupported input {f}; expected .hea or .ecgs")
            sig, rec_id = dsp.preprocess(rec.signal, rec.fs, cfg.preprocess), rec.id
        if want == 1 and sig.shape[0] > 1:
            sig = sig[:1]  # single-lead models read Lead I
        check_leads(params, sig.shape[0], f"record {rec_id}")
        out.append((rec_id, sig))
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    names = [c.strip() for c in args.classes.split(",")] if args.classes else list(CLASS_ORDER)
    unknown = set(names) - set(CLASS_ORDER)
    if unknown:
        raise ConfigError(f"unknown classes {sorted(unknown)}")
    lm = default_label_map()
    seed = args.seed or 0
    for name in names:
        cid = CLASS_ORDER.index(name)
        for i in range(args.per_class):
            rec = synth_ecg(cid, args.fs, args.seconds, seed * 100_003 + i, args.leads or 12)
            rec = EcgRecord(f"{name}{i:04d}", rec.signal, rec.fs, (cid,), rec.fs)
            write_record(out, rec, lm)
    print(f"wrote {len(names) * args.per_class} records to {out}")
    if args.write_config:
        target_len = max(8, int(args.seconds * 250) // 8 * 8)
        text = (f"[data]\ndata_dir = {out.resolve()}\nclasses = {','.join(names)}\n\n"
                f"[preprocess]\ntarget_len = {target_len}\nleads = {args.leads or 12}\n\n"
                "[model]\npreset = tiny\nwidth = 8\nhidden = 8\n\n"
                "[train]\nlr0 = 0.01\nl2 = 0\nplateau_enabled = false\nmax_epochs = 60\n"
                "early_stop_patience = 20\nbatch_size = 16\n")
        Path(args.write_config).write_text(text)
        print(f"wrote quick-start config {args.write_config}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    lm = cfg.label_map()
    manifest = build_manifest(cfg.data.data_dir, lm, cfg.data.workers)
    mpath = cfg.data.path("manifest")
    mpath.parent.mkdir(parents=True, exist_ok=True)
    manifest.to_csv(mpath)
    manifest.skipped_to_csv(mpath.with_name("skipped.csv"))
    plan = make_splits(manifest, _seed(cfg), cfg.data.split_mode, cfg.data.folds)
    plan.to_csv(cfg.data.path("splits"))
    counts = ", ".join(f"{n}={c}" for n, c in zip(manifest.class_names, manifest.class_counts))
    print(f"{len(manifest)} records ({len(manifest.skipped)} skipped): {counts}")
    print(f"manifest: {mpath}\nsplits: {cfg.data.path('splits')} ({plan.mode})")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    lm = cfg.label_map()
    manifest = _manifest(cfg)
    cache = cfg.data.path("cache_dir")
    cache.mkdir(parents=True, exist_ok=True)

    def one(row):
        rec = read_record(row.path, lm)
        write_cache(cache / f"{row.id}.ecgs", dsp.preprocess(rec.signal, rec.fs, cfg.preprocess),
                    cfg.preprocess.target_fs)

    with ThreadPoolExecutor(max_workers=max(1, cfg.data.workers)) as pool:
        list(pool.map(one, manifest.rows))
    print(f"cached {len(manifest)} records under {cache}")
    return EXIT_OK


def _train_val_test(cfg: RunConfig):
    manifest = _manifest(cfg)
    plan = _split(cfg, manifest)
    sets = {s: _dataset(cfg, manifest, plan.ids_where(s)) for s in ("train", "val")}
    test_ids = plan.ids_where("test")
    sets["test"] = _dataset(cfg, manifest, test_ids) if test_ids else None
    return manifest, sets


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest, sets = _train_val_test(cfg)
    run_dir = make_run_dir(args.run_dir, _seed(cfg), "train")
    (run_dir / "config.ini").write_text(cfg.to_ini())
    model_cfg = cfg.model_config(manifest.num_classes)
    params = build(model_cfg, _seed(cfg))
    best, runlog = fit(params, sets["train"], sets["val"], cfg.train, run_dir)
    save_weights(best, run_dir / "best.ecgw")
    print(f"run dir: {run_dir}")
    print(f"best epoch {runlog.best_epoch}: val macro-F1 {runlog.best_f1:.4f} ({runlog.stop_reason})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = load_weights(args.weights)
    check_leads(params, cfg.leads, "the configured dataset")
    manifest = _manifest(cfg)
    ids = manifest.ids if args.split == "all" else _split(cfg, manifest).ids_where(args.split)
    ds = _dataset(cfg, manifest, ids)
    report = evaluate(params, ds, manifest.class_names, args.split, variant_name(params.config),
                      cfg.eval.n_jobs, cfg.eval.batch_size)
    run_dir = make_run_dir(args.run_dir, _seed(cfg), "eval")
    report.write_all(run_dir, f"eval_{args.split}")
    print(f"run dir: {run_dir}")
    print(f"{args.split}: macro-F1 {report.macro_f1:.4f} over {report.num_samples} records")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg)
    ds = _dataset(cfg, manifest)
    run_dir = make_run_dir(args.run_dir, _seed(cfg), "crossval")
    (run_dir / "config.ini").write_text(cfg.to_ini())
    res = cross_validate(ds, cfg.model_config(manifest.num_classes), cfg.train, cfg.data.folds,
                         _seed(cfg), manifest.class_names, cfg.eval.n_jobs, run_dir)
    res.write_csv(run_dir / "crossval.csv")
    print(f"run dir: {run_dir}")
    print(f"mean macro-F1 {res.mean_f1:.4f} +/- {res.std_f1:.4f} over {len(res.reports)} folds")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    params = load_weights(args.weights)
    names = cfg.label_map().class_names
    if len(names) != params.config.num_classes:
        names = tuple(str(i) for i in range(params.config.num_classes))
    for rec_id, sig in _load_inputs(args.input, cfg, params, args.leads):
        probs = predict_proba(params, sig[None])[0]
        top = np.argsort(-probs, kind="stable")[:args.top_k]
        print(rec_id + "\t" + "\t".join(f"{names[i]}:{probs[i]:.4f}" for i in top))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    manifest, sets = _train_val_test(cfg)
    test = sets["test"] or sets["val"]
    run_dir = make_run_dir(args.run_dir, _seed(cfg), "ablate")
    rows = []
    for which in VARIANTS:
        model_cfg = variant(cfg.model_config(manifest.num_classes), which)
        best, _ = fit(build(model_cfg, _seed(cfg)), sets["train"], sets["val"], cfg.train, run_dir / which)
        report = evaluate(best, test, manifest.class_names, "test", which, cfg.eval.n_jobs)
        rows.append((which, count_params(model_cfg), report.macro_f1,
                     report.macro_auc if report.macro_auc is not None else float("nan")))
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "params", "macro_f1", "macro_auc"])
        w.writerows([(v, n, f"{f:.6f}", f"{a:.6f}") for v, n, f, a in rows])
    print(f"run dir: {run_dir}")
    for v, n, f, _ in rows:
        print(f"{v:14s} {n:9d} params  macro-F1 {f:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    params = load_weights(args.weights)
    inputs = _load_inputs([args.input], cfg, params, args.leads)
    report = benchmark(params, inputs[0][1], args.runs, args.weights)
    run_dir = make_run_dir(args.run_dir, args.seed or 0, "bench")
    (run_dir / "bench.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_export(args) -> int:
    if args.weights:
        params = load_weights(args.weights)
        arrays = params.state_dict()
        np.savez(args.out, __config__=np.array(params.config.to_json()), **arrays)
        print(f"exported {len(arrays)} arrays to {args.out}")
    else:
        with np.load(args.import_npz, allow_pickle=False) as z:
            config = ModelConfig.from_json(str(z["__config__"]))
            state = {k: z[k] for k in z.files if k != "__config__"}
        if set(state) != set(canonical_names(config)):
            raise NameSetMismatch("npz arrays do not match the model layout")
        size = save_weights(ModelParams.from_state_dict(config, state), args.out)
        print(f"imported {args.import_npz} -> {args.out} ({size} bytes)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides [train] seed")
    common.add_argument("--run-dir", help=f"base directory for run outputs (default ${RUN_DIR_ENV} or ./runs)")
    common.add_argument("--leads", type=int, choices=(12, 1), help="12-lead or Lead-I mode")
    common.add_argument("--variant", choices=VARIANTS, help="architecture variant")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ecg-tinynet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="scan headers, write manifest and splits")
    sub.add_parser("preprocess", parents=[common], help="condition records into the signal cache")
    sub.add_parser("train", parents=[common], help="fit a model on the train/val split")
    e = sub.add_parser("eval", parents=[common], help="evaluate weights on a split")
    e.add_argument("--weights", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    sub.add_parser("crossval", parents=[common], help="stratified k-fold cross-validation")
    i = sub.add_parser("infer", parents=[common], help="classify records")
    i.add_argument("--weights", required=True)
    i.add_argument("--top-k", type=int, default=3)
    i.add_argument("input", nargs="+", help=".hea/.ecgs files or directories")
    sub.add_parser("ablate", parents=[common], help="train and score all four variants")
    b = sub.add_parser("bench", parents=[common], help="inference latency and memory")
    b.add_argument("--weights", required=True)
    b.add_argument("--input", required=True)
    b.add_argument("--runs", type=int, default=100)
    x = sub.add_parser("export", parents=[common], help="convert weights between .ecgw and .npz")
    src = x.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help=".ecgw archive to export")
    src.add_argument("--import", dest="import_npz", help=".npz to import")
    x.add_argument("--out", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=30)
    s.add_argument("--seconds", type=float, default=4.0)
    s.add_argument("--fs", type=int, default=500)
    s.add_argument("--classes", default="", help="comma-separated subset, e.g. SNR,LBBB")
    s.add_argument("--write-config", help="also write a quick-start config here")
    return p


COMMANDS = {
    "ingest": cmd_ingest, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
    "crossval": cmd_crossval, "infer": cmd_infer, "ablate": cmd_ablate, "bench": cmd_bench,
    "export": cmd_export, "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EcgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
