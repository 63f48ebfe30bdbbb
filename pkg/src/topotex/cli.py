"""Command-line front end: ``topotex <subcommand> [options]``.

Every subcommand writes into ``--out-dir`` and leaves the fully resolved
configuration (including the master seed) there as ``run_config.json``;
passing that file back through ``--config`` reproduces the outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import (ConfigError, RunConfig, derive_seed, load_config, resolve_seed, save_config,
                     to_dict)
from .descriptors import PiParams
from .eval import (EvaluationSet, class_average_pi, diagonal_locality, displacement_stability,
                   half_max_regions, importance_maps, noise_stability, pooled_dsc, rasterize,
                   run_protocol, sample_patches)
from .features import (FeatureTable, MapFeatures, describe, extract_table, feature_hash,
                       fit_channel_limits, patch_diagrams, read_external, read_table, write_table)
from .grid_io import (DepthMap, GridFormatError, LabelMask, extract_patches, load_depth_map,
                      load_label_mask, patch_label, save_depth_map, save_label_mask,
                      z_standardize_global)
from .learn import BoostParams, load_model, rusboost_train, save_model
from .synth import SynthConfig, surface_triple, synthetic_dataset

CONFIG_NAME = "run_config.json"


def _out(args) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _finish(cfg: RunConfig, out_dir: str, summary: Optional[dict] = None) -> None:
    save_config(cfg, os.path.join(out_dir, CONFIG_NAME))
    if summary is not None:
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# inputs

def _read_manifest(path: str, split: str) -> List[Tuple[str, Optional[str]]]:
    with open(path) as fh:
        man = json.load(fh)
    if split not in man:
        raise ConfigError(f"{path}: no split {split!r}; available {sorted(k for k in man if isinstance(man[k], list))}")
    base = os.path.dirname(os.path.abspath(path))
    return [(os.path.join(base, e["depth"]), os.path.join(base, e["mask"]) if e.get("mask") else None)
            for e in man[split]]


def _inputs(args) -> List[Tuple[str, Optional[str]]]:
    if getattr(args, "dataset", None):
        return _read_manifest(args.dataset, args.split)
    inputs = args.input or []
    masks = args.mask or []
    if not inputs:
        raise ConfigError("no inputs: pass --input (with optional --mask) or --dataset")
    if masks and len(masks) != len(inputs):
        raise ConfigError(f"{len(inputs)} inputs but {len(masks)} masks; give one mask per input or none")
    return [(p, masks[k] if masks else None) for k, p in enumerate(inputs)]


def _load(pairs) -> List[Tuple[DepthMap, Optional[LabelMask]]]:
    out = []
    for path, mpath in pairs:
        m = load_depth_map(path)
        name = os.path.splitext(os.path.basename(path))[0]
        m = DepthMap(m.values, m.pixel_pitch, name)
        out.append((m, None if mpath is None else load_label_mask(mpath)))
    return out


def _truths(t: FeatureTable) -> List[LabelMask]:
    """Recorded masks when still on disk, else the rasterized patch labels."""
    out = []
    for m in t.maps:
        if m.mask_path and os.path.exists(m.mask_path):
            out.append(load_label_mask(m.mask_path))
        elif m.labels is not None:
            out.append(rasterize(m.shape, m.origins, m.patch_size, m.labels))
        else:
            raise ConfigError(f"test map {m.source_id} carries no labels")
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_extract(args, cfg: RunConfig) -> int:
    out = _out(args)
    items = _load(_inputs(args))
    fcfg = cfg.features
    if fcfg.prefilter != "none" and fcfg.channel_limits is None:
        fcfg = fit_channel_limits([z_standardize_global(m) for m, _ in items], fcfg)
    mask_paths = [os.path.abspath(mp) if mp else "" for _, mp in _inputs(args)]
    table = extract_table(items, fcfg, mask_paths)
    write_table(table, os.path.join(out, "features.csv"))
    cfg = replace(cfg, features=fcfg)
    _finish(cfg, out, {"rows": int(sum(len(m.X) for m in table.maps)), "columns": len(table.columns) + 1,
                       "params_hash": table.hash})
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out(args)
    table = read_table(args.features)
    X = table.matrix()
    seed = derive_seed(cfg.seed, "train")
    model = rusboost_train(X, BoostParams(cfg.learner.rounds, cfg.learner.max_depth), seed)
    model.meta["feature_hash"] = table.hash
    save_model(model, os.path.join(out, "model.txt"))
    _write_csv(os.path.join(out, "train_log.csv"), ["round", "alpha", "n_class1", "n_class2"],
               [[t, _g(a), n1, n2] for t, (a, (n1, n2)) in enumerate(zip(model.alphas, model.subset_log))])
    cfg = replace(cfg, features=table.cfg)
    _finish(cfg, out, {"feature_hash": table.hash, "rows": X.n_rows, "rounds": len(model.trees)})
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out(args)
    model = load_model(args.model)
    table = read_table(args.features)
    want = model.meta.get("feature_hash")
    if want != table.hash:
        raise ConfigError(f"feature hash {table.hash} does not match the model's {want}; "
                          "re-extract with the training configuration")
    rows, pairs = [], []
    for m in table.maps:
        margins = model.margins(m.X)
        labels = np.where(margins >= 0, 1, 2)
        for (r, c), lab, mg in zip(m.origins, labels, margins):
            rows.append([m.source_id, r, c, lab, _g(mg)])
        pred = rasterize(m.shape, m.origins, m.patch_size, labels)
        save_label_mask(pred, os.path.join(out, f"{m.source_id}_pred.pgm"))
        if m.labels is not None:
            pairs.append((pred, rasterize(m.shape, m.origins, m.patch_size, m.labels)))
    _write_csv(os.path.join(out, "predictions.csv"), ["source", "row", "col", "class", "margin"], rows)
    summary = {"feature_hash": table.hash, "patches": len(rows)}
    if pairs and len(pairs) == len(table.maps):
        summary["dsc"] = pooled_dsc(pairs)
    _finish(replace(cfg, features=table.cfg), out, summary)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out(args)
    train, test = read_table(args.train), read_table(args.test)
    if train.hash != test.hash:
        raise ConfigError(f"train features {train.hash} and test features {test.hash} were extracted "
                          "with different configurations")
    truths = _truths(test)
    for ext in args.external_features or []:
        extra = read_external(ext)
        train, test = train.with_columns(extra), test.with_columns(extra)
    ev = EvaluationSet.from_table(test, truths)
    report = run_protocol(train.matrix(), ev, cfg.protocol, cfg.seed)
    with open(os.path.join(out, "protocol.csv"), "w") as fh:
        fh.write(report.to_csv())
    summary = report.summary()
    summary["feature_hash"] = train.hash
    summary["columns"] = len(train.columns)
    _finish(replace(cfg, features=train.cfg), out, summary)
    return 0


def _synth_cfg(cfg: RunConfig, seed: int) -> SynthConfig:
    s = cfg.synth
    return SynthConfig(size=s.size, spacing_mean=s.spacing_mean, spacing_jitter=s.spacing_jitter,
                       pit_depth=s.pit_depth, pit_sigma=s.pit_sigma, noise_rms=s.noise_rms,
                       noise_corr_len=s.noise_corr_len, seed=seed)


_EXT = {"csv": ".csv", "pgm16": ".pgm", "f64raw": ".f64"}


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out(args)
    s = cfg.synth
    manifest = {"format": s.format}
    for split in ("train", "test"):
        seed = derive_seed(cfg.seed, f"synth/{split}")
        surfs = synthetic_dataset(_synth_cfg(cfg, seed), s.n_natural, s.n_engraved_i, s.n_engraved_ii,
                                  seed=seed, prefix=f"{split}_")
        manifest[split] = _save_surfaces(out, split, surfs, s.format)
    triple = surface_triple(_synth_cfg(cfg, derive_seed(cfg.seed, "synth/triple")))
    manifest["triple"] = _save_surfaces(out, "triple", triple, s.format)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    kinds = sorted({e["kind"] for e in manifest["triple"]})
    _finish(cfg, out, {"classes": kinds, "train": len(manifest["train"]), "test": len(manifest["test"])})
    return 0


def _save_surfaces(out: str, split: str, surfs, fmt: str) -> List[dict]:
    os.makedirs(os.path.join(out, split), exist_ok=True)
    entries = []
    for srf in surfs:
        d = os.path.join(split, srf.name + _EXT[fmt])
        mk = os.path.join(split, srf.name + "_mask.pgm")
        save_depth_map(srf.depth, os.path.join(out, d), fmt)
        save_label_mask(srf.mask, os.path.join(out, mk))
        entries.append({"name": srf.name, "kind": srf.kind, "depth": d, "mask": mk})
    return entries


def cmd_stability(args, cfg: RunConfig) -> int:
    out = _out(args)
    maps = [z_standardize_global(m) for m, _ in _load(_inputs(args))]
    st, f = cfg.stability, cfg.features
    size = f.patch_size
    picks = sample_patches(maps, st.n_patches, size, derive_seed(cfg.seed, "stability/patches"))
    patches = [m.values[r:r + size, c:c + size] for m, r, c in picks]
    noise_rows, disp_rows, summary = [], [], {"noise": {}, "displacement": {}}
    for mode in st.modes:
        rep = noise_stability(patches, st.snr_levels, f.pi, mode, derive_seed(cfg.seed, "stability/noise"),
                              cfg=f if mode == f.prefilter else None)
        noise_rows += [[mode, p, format(lev, "g"), _g(dp), _g(di)] for p, lev, dp, di in rep.rows]
        summary["noise"][mode] = {format(lev, "g"): rep.mean_pi_difference(lev) for lev in rep.levels()}
        rep = displacement_stability(maps, st.offsets, f.pi, mode, st.n_patches, size,
                                     derive_seed(cfg.seed, "stability/displacement"),
                                     cfg=f if mode == f.prefilter else None)
        disp_rows += [[mode, p, int(lev), _g(dp), _g(di)] for p, lev, dp, di in rep.rows]
        summary["displacement"][mode] = {str(int(lev)): rep.mean_pi_difference(lev) for lev in rep.levels()}
    _write_csv(os.path.join(out, "noise.csv"), ["mode", "patch", "snr", "d_patch", "d_pi"], noise_rows)
    _write_csv(os.path.join(out, "displacement.csv"), ["mode", "patch", "offset", "d_patch", "d_pi"], disp_rows)
    _finish(cfg, out, summary)
    return 0


def _diagram_maps(items, fcfg):
    """Per map: (source, shape, origins, labels, per-patch diagram lists)."""
    out = []
    for m, mask in items:
        ps = extract_patches(z_standardize_global(m), fcfg.patch_size, fcfg.stride)
        diags = [patch_diagrams(p.values, fcfg) for p in ps]
        labels = None if mask is None else np.array([patch_label(mask, p, fcfg.label_threshold) for p in ps])
        out.append((m, mask, np.array([p.origin for p in ps]).reshape(-1, 2), labels, diags))
    return out


def _table_from_diagrams(dmaps, fcfg) -> FeatureTable:
    maps = [MapFeatures(m.source_id, m.shape, fcfg.patch_size, fcfg.stride, origins,
                        np.array([describe(d, fcfg) for d in diags]), labels)
            for m, _, origins, labels, diags in dmaps]
    return FeatureTable(fcfg, maps)


def cmd_sweep(args, cfg: RunConfig) -> int:
    """Protocol DSC over the resolution x sigma grid; diagrams are computed once."""
    out = _out(args)
    train_items = _load(_read_manifest(args.dataset, "train"))
    test_items = _load(_read_manifest(args.dataset, "test"))
    fcfg = cfg.features
    if fcfg.prefilter != "none" and fcfg.channel_limits is None:
        fcfg = fit_channel_limits([z_standardize_global(m) for m, _ in train_items], fcfg)
    dtrain, dtest = _diagram_maps(train_items, fcfg), _diagram_maps(test_items, fcfg)
    truths = [mask for _, mask in test_items]
    rows = []
    for r in cfg.sweep.resolutions:
        for sigma in cfg.sweep.sigmas:
            cell = replace(fcfg, pi=replace(fcfg.pi, resolution=r, sigma_x=sigma, sigma_y=sigma))
            tr, te = _table_from_diagrams(dtrain, cell), _table_from_diagrams(dtest, cell)
            rep = run_protocol(tr.matrix(), EvaluationSet.from_table(te, truths), cfg.protocol,
                               derive_seed(cfg.seed, f"sweep/{r}/{sigma!r}"))
            rows.append([r, format(sigma, "g"), len(tr.columns), _g(rep.mean), _g(rep.std)]
                        + [_g(v) for v in rep.dsc])
    n = cfg.protocol.repetitions
    _write_csv(os.path.join(out, "sweep.csv"),
               ["resolution", "sigma", "features", "mean_dsc", "std_dsc"] + [f"dsc_{i}" for i in range(n)], rows)
    _finish(replace(cfg, features=fcfg), out, {"cells": len(rows)})
    return 0


def cmd_importance(args, cfg: RunConfig) -> int:
    out = _out(args)
    table = read_table(args.features)
    X = table.matrix()
    if args.model:
        model = load_model(args.model)
        if model.meta.get("feature_hash") != table.hash:
            raise ConfigError("model was trained on features with a different configuration")
    else:
        model = rusboost_train(X, BoostParams(cfg.learner.rounds, cfg.learner.max_depth),
                               derive_seed(cfg.seed, "importance"))
    fisher, gini = importance_maps(X, model, args.channel)
    np.savetxt(os.path.join(out, "fisher_map.csv"), fisher, delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out, "gini_map.csv"), gini, delimiter=",", fmt="%.17g")
    summary = {"locality": {}, "half_max_regions": {}}
    for name, grid in (("fisher", fisher), ("gini", gini)):
        top, overall = diagonal_locality(grid)
        summary["locality"][name] = {"top_decile_median_distance": top, "overall_median_distance": overall}
    for k, grid in class_average_pi(X, args.channel).items():
        np.savetxt(os.path.join(out, f"class_average_{k}.csv"), grid, delimiter=",", fmt="%.17g")
        summary["half_max_regions"][str(k)] = half_max_regions(grid)
    _finish(replace(cfg, features=table.cfg), out, summary)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="topotex", description="Topological surface-texture features and classification.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
        p.add_argument("--seed", type=int, help="master seed; overrides TOPOTEX_SEED and the config file")
        if out:
            p.add_argument("--out-dir", required=True, help="output directory")

    def inputs(p):
        p.add_argument("--input", action="append", help="depth map (csv, pgm16 or f64raw); repeatable")
        p.add_argument("--mask", action="append", help="label mask matching each --input; repeatable")
        p.add_argument("--dataset", help="manifest.json written by 'synth' (alternative to --input)")
        p.add_argument("--split", default="train", help="manifest split to read (default: train)")

    p = sub.add_parser("extract", help="per-patch feature matrix CSV")
    common(p)
    inputs(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit a RUSBoost model on a feature CSV")
    common(p)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify patches and write predicted label masks")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="run the repeated evaluation protocol")
    common(p)
    p.add_argument("--train", required=True, help="training feature CSV")
    p.add_argument("--test", required=True, help="test feature CSV")
    p.add_argument("--external-features", action="append",
                   help="CSV 'source,row,col,...' appended per patch to train and test; repeatable")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate synthetic natural and engraved surfaces")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stability", help="noise and displacement stability CSVs")
    common(p)
    inputs(p)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("sweep", help="protocol DSC over the PI resolution x sigma grid")
    common(p)
    p.add_argument("--dataset", required=True, help="manifest.json with train and test splits")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("importance", help="Fisher/Gini importance maps and class-average PIs")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--model", help="trained model; a fresh one is fitted when omitted")
    p.add_argument("--channel", type=int, default=0, help="PI channel to map (default 0)")
    p.set_defaults(func=cmd_importance)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_seed(load_config(args.config), args.seed)
        return args.func(args, cfg)
    except (ConfigError, GridFormatError, ValueError, KeyError, OSError) as exc:
        print(f"topotex {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
