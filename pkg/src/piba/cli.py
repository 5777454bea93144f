"""Command-line front end: data generation, training, attribution,
evaluation, and report emission with reproducible run manifests."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evalsuite as ev
from . import models as md
from . import synthdata as sd
from .attribmap import read_map, render_heatmap, write_map
from .methods import attribute_one, target_logit_fn, target_prob_fn
from .numcore import NumericError, RngStream
from .synthdata import FormatError


class ConfigError(Exception):
    exit_code = 2


class MissingArtifact(Exception):
    exit_code = 3


class NumericFailure(Exception):
    exit_code = 4


# ---------------------------------------------------------------------------
# config handling: line-based `key = value` files, flags win

SCHEMAS = {
    "gen-data": {"kind": (str, "image"), "seed": (int, 7), "n": (int, 300)},
    "train": {"data": (str, None), "epochs": (int, 30), "lr": (float, None),
              "seed": (int, 0), "batch_size": (int, 8),
              "optimizer": (str, "adam")},
    "attribute": {"model": (str, None), "data": (str, None),
                  "method": (str, "inputiba"), "split": (str, "test"),
                  "index": (int, 0), "count": (int, 1), "seed": (int, 0)},
    "eval-sensn": {"model": (str, None), "data": (str, None),
                   "maps": (str, None), "split": (str, "test"),
                   "count": (int, 50), "k_sets": (int, 200), "seed": (int, 11),
                   "n_grid": (str, "1,2,4,8,16,32,64,128"),
                   "pct_grid": (str, "0.1,0.25,0.5,0.75,0.9")},
    "eval-insdel": {"model": (str, None), "data": (str, None),
                    "maps": (str, None), "split": (str, "test"),
                    "count": (int, 100), "batch": (int, 10)},
    "eval-ehr": {"data": (str, None), "maps": (str, None),
                 "split": (str, "test"), "count": (int, 100),
                 "n_thresholds": (int, 101)},
    "eval-roar": {"data": (str, None), "maps": (str, None),
                  "rates": (str, "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"),
                  "epochs": (int, 30), "lr": (float, 1e-3), "seed": (int, 900)},
    "sanity-check": {"model": (str, None), "data": (str, None),
                     "method": (str, "inputiba"), "split": (str, "test"),
                     "count": (int, 20), "seed": (int, 5)},
    "report": {},
}


def parse_config_file(path):
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg[key] = value
    return cfg


def resolve_config(command, file_cfg, flag_cfg):
    schema = SCHEMAS[command]
    resolved = {}
    for source in (file_cfg, flag_cfg):
        for key in source:
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} for {command}")
    for key, (typ, default) in schema.items():
        raw = flag_cfg.get(key, file_cfg.get(key, default))
        if raw is None:
            raise ConfigError(f"missing required key {key!r} for {command}")
        try:
            resolved[key] = typ(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    return resolved


# ---------------------------------------------------------------------------
# artifacts


def write_atomic(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data if isinstance(data, bytes) else data.encode())
    os.replace(tmp, path)


def write_csv(path, xs, ys, extra=None):
    lines = ["x,y" + (",std" if extra is not None else "")]
    for i, (x, y) in enumerate(zip(xs, ys)):
        row = f"{x},{y}"
        if extra is not None:
            row += f",{extra[i]}"
        lines.append(row)
    write_atomic(path, "\n".join(lines) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command, config, artifacts):
    manifest = {
        "experiment_id": f"{command}-" + hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest()[:12],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "command": command,
        "config": config,
        "seeds": [config[k] for k in config if k == "seed"],
        "artifacts": {name: sha256_file(out_dir / name) for name in artifacts},
    }
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2))
    # resolved config in config-file syntax, reusable via --config
    lines = [f"{k} = {v}" for k, v in config.items()]
    write_atomic(out_dir / f"{command}.config", "\n".join(lines) + "\n")


def load_data(cfg):
    path = Path(cfg["data"])
    if path.is_dir():
        path = path / "dataset.piba"
    if not path.exists():
        raise MissingArtifact(f"dataset not found: {path}")
    try:
        return sd.load_dataset(path)
    except FormatError as e:
        raise MissingArtifact(f"unreadable dataset {path}: {e}") from e


def load_model(cfg):
    path = Path(cfg["model"])
    if path.is_dir():
        path = path / "model.pibc"
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    try:
        return md.load_checkpoint(path)
    except FormatError as e:
        raise MissingArtifact(f"unreadable checkpoint {path}: {e}") from e


def map_name(split, index):
    return f"map_{split}_{index:04d}.pibm"


def load_maps(maps_dir, split, count):
    maps_dir = Path(maps_dir)
    out = []
    for i in range(count):
        path = maps_dir / map_name(split, i)
        if not path.exists():
            raise MissingArtifact(f"attribution map not found: {path}")
        out.append(read_map(path))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, out_dir, workers):
    if cfg["kind"] not in ("image", "token"):
        raise ConfigError("kind must be image or token")
    gen = sd.gen_patch_dataset if cfg["kind"] == "image" else sd.gen_token_dataset
    ds = gen(cfg["seed"], cfg["n"])
    sd.save_dataset(ds, out_dir / "dataset.piba")
    return ["dataset.piba"]


def cmd_train(cfg, out_dir, workers):
    ds = load_data(cfg)
    model = md.SmallCnn(seed=cfg["seed"]) if ds.kind == "image" else md.SmallRnn(seed=cfg["seed"])
    try:
        history = md.train_classifier(model, ds, epochs=cfg["epochs"],
                                      lr=cfg["lr"], seed=cfg["seed"],
                                      batch_size=cfg["batch_size"],
                                      optimizer=cfg["optimizer"])
    except md.TrainingDiverged as e:
        raise NumericFailure(str(e)) from e
    md.save_checkpoint(model, out_dir / "model.pibc",
                       meta=json.dumps(cfg, sort_keys=True))
    epochs = list(range(1, len(history) + 1))
    write_csv(out_dir / "accuracy.csv", epochs, [h[0] for h in history],
              extra=[h[1] for h in history])
    return ["model.pibc", "accuracy.csv"]


def _attribute_job(args):
    model, ds, split, index, method, seed = args
    amap = attribute_one(model, ds, split, index, method, seed)
    return index, amap


def cmd_attribute(cfg, out_dir, workers):
    ds = load_data(cfg)
    model = load_model(cfg)
    indices = range(cfg["index"], cfg["index"] + cfg["count"])
    jobs = [(model, ds, cfg["split"], i, cfg["method"],
             cfg["seed"] + i) for i in indices]
    try:
        results = _run_jobs(_attribute_job, jobs, workers)
    except NumericError as e:
        raise NumericFailure(str(e)) from e
    artifacts = []
    for index, amap in sorted(results):
        name = map_name(cfg["split"], index)
        write_map(amap, out_dir / name)
        artifacts.append(name)
        if amap.values.ndim == 2:
            pgm = name.replace(".pibm", ".pgm")
            render_heatmap(amap, out_dir / pgm, scale=8)
            artifacts.append(pgm)
    return artifacts


def _run_jobs(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def cmd_eval_sensn(cfg, out_dir, workers):
    ds = load_data(cfg)
    model = load_model(cfg)
    maps = load_maps(cfg["maps"], cfg["split"], cfg["count"])
    s = ds[cfg["split"]]
    curves = []
    if ds.kind == "image":
        grid = [int(v) for v in cfg["n_grid"].split(",")]
        for i, amap in enumerate(maps):
            score = target_logit_fn(model, int(s.labels[i]))
            curves.append(ev.sensitivity_n(
                score, s.images[i], amap.values, grid, k_sets=cfg["k_sets"],
                stream=RngStream(cfg["seed"], stream=1000 + i),
                on_degenerate="zero"))
    else:
        grid = [float(v) for v in cfg["pct_grid"].split(",")]
        for i, amap in enumerate(maps):
            score = target_logit_fn(model, int(s.labels[i]))
            curves.append(ev.sensitivity_pct(
                score, s.sequences[i], amap.values, grid, k_sets=cfg["k_sets"],
                stream=RngStream(cfg["seed"], stream=1000 + i)))
    mean = np.mean([c.ys for c in curves], axis=0)
    write_csv(out_dir / "sensn_mean.csv", grid, [float(v) for v in mean])
    report = ev.EvalReport("eval-sensn", cfg)
    report.add_scalar("maps", "sensn_mean_pcc",
                      [float(np.mean(c.ys)) for c in curves])
    write_atomic(out_dir / "sensn.json", json.dumps(report.to_dict(), indent=2))
    return ["sensn_mean.csv", "sensn.json"]


def cmd_eval_insdel(cfg, out_dir, workers):
    ds = load_data(cfg)
    model = load_model(cfg)
    maps = load_maps(cfg["maps"], cfg["split"], cfg["count"])
    s = ds[cfg["split"]]
    baseline = "blur" if ds.kind == "image" else "unk"
    ins_aucs, del_aucs, ins_curves, del_curves = [], [], [], []
    for i, amap in enumerate(maps):
        prob = target_prob_fn(model, int(s.labels[i]))
        input_ = s.images[i] if ds.kind == "image" else s.sequences[i]
        ins, ins_auc, dele, del_auc = ev.insertion_deletion(
            prob, input_, amap.values, batch=cfg["batch"], baseline_kind=baseline)
        ins_aucs.append(ins_auc)
        del_aucs.append(del_auc)
        ins_curves.append(ins.ys)
        del_curves.append(dele.ys)
    report = ev.EvalReport("eval-insdel", cfg)
    report.add_scalar("maps", "insertion_auc", ins_aucs)
    report.add_scalar("maps", "deletion_auc", del_aucs)
    write_csv(out_dir / "insertion_mean.csv", ins.xs,
              [float(v) for v in np.mean(ins_curves, axis=0)])
    write_csv(out_dir / "deletion_mean.csv", dele.xs,
              [float(v) for v in np.mean(del_curves, axis=0)])
    write_atomic(out_dir / "insdel.json", json.dumps(report.to_dict(), indent=2))
    return ["insertion_mean.csv", "deletion_mean.csv", "insdel.json"]


def cmd_eval_ehr(cfg, out_dir, workers):
    ds = load_data(cfg)
    if ds.kind != "image":
        raise ConfigError("eval-ehr requires an image dataset")
    maps = load_maps(cfg["maps"], cfg["split"], cfg["count"])
    s = ds[cfg["split"]]
    ehrs = [ev.ehr(m.values, s.bboxes[i], cfg["n_thresholds"])
            for i, m in enumerate(maps)]
    ratios = [ev.bbox_ratio(m.values, s.bboxes[i]) for i, m in enumerate(maps)]
    report = ev.EvalReport("eval-ehr", cfg)
    report.add_scalar("maps", "ehr", ehrs)
    report.add_scalar("maps", "bbox_ratio", ratios)
    write_atomic(out_dir / "ehr.json", json.dumps(report.to_dict(), indent=2))
    return ["ehr.json"]


def _roar_job(args):
    ds, maps_by_split, rate, train_cfg, seed = args
    curve = ev.roar(ds, maps_by_split, [rate], train_cfg, seed=seed)
    return rate, curve.ys[0]


def cmd_eval_roar(cfg, out_dir, workers):
    ds = load_data(cfg)
    if ds.kind != "image":
        raise ConfigError("eval-roar requires an image dataset")
    maps_by_split = {}
    for split in ("train", "val", "test"):
        count = ds[split].images.shape[0]
        maps_by_split[split] = np.stack(
            [m.values for m in load_maps(cfg["maps"], split, count)])
    rates = [float(v) for v in cfg["rates"].split(",")]
    train_cfg = {"epochs": cfg["epochs"], "lr": cfg["lr"]}
    jobs = [(ds, maps_by_split, rate, train_cfg, cfg["seed"] + i)
            for i, rate in enumerate(rates)]
    try:
        results = sorted(_run_jobs(_roar_job, jobs, workers))
    except md.TrainingDiverged as e:
        raise NumericFailure(str(e)) from e
    write_csv(out_dir / "roar.csv", [r for r, _ in results],
              [a for _, a in results])
    return ["roar.csv"]


def cmd_sanity_check(cfg, out_dir, workers):
    ds = load_data(cfg)
    if ds.kind != "image":
        raise ConfigError("sanity-check requires an image dataset")
    model = load_model(cfg)
    s = ds[cfg["split"]]
    inputs = list(s.images[:cfg["count"]])
    targets = [int(t) for t in s.labels[:cfg["count"]]]

    def attributor(m, x, t):
        index = next(i for i, xi in enumerate(inputs) if xi is x)
        return attribute_one(m, ds, cfg["split"], index,
                             cfg["method"], cfg["seed"]).values

    curve, stds = ev.sanity_check(model, attributor, inputs, targets,
                                  seed=cfg["seed"])
    write_csv(out_dir / "sanity.csv", curve.xs, curve.ys, extra=stds)
    return ["sanity.csv"]


def cmd_report(cfg, out_dir, workers):
    merged = {"report_version": 1, "sections": {}}
    for path in sorted(out_dir.glob("*.json")):
        if path.name in ("report.json", "manifest.json"):
            continue
        merged["sections"][path.stem] = json.loads(path.read_text())
    for path in sorted(out_dir.glob("*.csv")):
        merged["sections"].setdefault("curves", []).append(path.name)
    write_atomic(out_dir / "report.json", json.dumps(merged, indent=2))
    return ["report.json"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "eval-sensn": cmd_eval_sensn,
    "eval-insdel": cmd_eval_insdel,
    "eval-ehr": cmd_eval_ehr,
    "eval-roar": cmd_eval_roar,
    "sanity-check": cmd_sanity_check,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="piba")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=os.environ.get("PIBA_OUT_DIR"))
        p.add_argument("--workers", type=int, default=1)
        for key in schema:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        file_cfg = parse_config_file(args.config) if args.config else {}
        flag_cfg = {k: v for k, v in vars(args).items()
                    if k in SCHEMAS[command] and v is not None}
        cfg = resolve_config(command, file_cfg, flag_cfg)
        if not args.out:
            raise ConfigError("missing --out directory (or PIBA_OUT_DIR)")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[command](cfg, out_dir, args.workers)
        write_manifest(out_dir, command, cfg, artifacts)
    except (ConfigError, MissingArtifact, NumericFailure) as e:
        print(json.dumps({"error": {"code": e.exit_code,
                                    "kind": type(e).__name__,
                                    "message": str(e)}}))
        return e.exit_code
    except NumericError as e:
        print(json.dumps({"error": {"code": 4, "kind": "NumericFailure",
                                    "message": str(e)}}))
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
