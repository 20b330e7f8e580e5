"""Command-line entry point: ``diffrep <subcommand> [--config FILE] [--set key=value ...]``.

Every run writes ``config.resolved.json`` (the full resolved config) and
``report.json`` plus task-specific CSV / SVG / binary files into ``--out``.
Failures print one JSON line ``{"status": "error", "type": ..., "message": ...}``
to stderr and exit with status 1; usage errors and a missing config file
exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from ..analysis import GridSpec, cka_grid, grid_search, knn_classify, probe_cell
from ..ddpm import build_linear_schedule, generate
from ..diffeed import (
    build_feedback_net,
    choose_final_block,
    DifFeedSource,
    feedback_param_count,
    make_feedback_plan,
)
from ..features import FeatureRequest, Standardizer, precompute_features
from ..heads import (
    AttentionHead,
    AttentionHeadConfig,
    BackboneSource,
    DifFormerConfig,
    HeadKind,
    MultiStoreSource,
    ProbeProtocol,
    StoreSource,
    build_difformer,
    build_head,
    train_probe,
)
from ..rng import derive_seed, seeded_init
from ..unet import build_unet, mini_config, paper_config, toy_config
from .checkpoint import load_checkpoint, save_container
from .config import TASKS, ConfigError, dump_json, load_config, payload_config
from .data import load_image_directory, load_packed, synthesize_dataset, to_uint8
from .report import emit_report
from .train import train_diffusion

log = logging.getLogger("diffrep")

PRESETS = {"toy": toy_config, "mini": mini_config, "paper": paper_config}


# --------------------------------------------------------------------------
# shared loaders
# --------------------------------------------------------------------------

def load_model(cfg: dict):
    ck = cfg["model"]["checkpoint"]
    sc = cfg["schedule"]
    if ck:
        model, schedule, _ = load_checkpoint(ck)
        if schedule is None:
            schedule = build_linear_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    else:
        preset = cfg["model"]["preset"]
        if preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
        model = build_unet(PRESETS[preset](), seed=derive_seed(cfg["seed"], "unet-init"))
        schedule = build_linear_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    model.eval()
    return model, schedule


def load_data(cfg: dict):
    d = cfg["data"]
    if d["source"] == "synthetic":
        return synthesize_dataset(d["classes"], d["per_class"], d["size"], derive_seed(cfg["seed"], "data"),
                                  num_shapes=d["num_shapes"] or None, difficulty=d["difficulty"],
                                  separable=d["separable"], eval_fraction=d["eval_fraction"])
    if d["source"] == "image-directory":
        return load_image_directory(d["path"], d["size"], flip=d["flip"], eval_fraction=d["eval_fraction"],
                                    seed=derive_seed(cfg["seed"], "data"))
    if d["source"] == "packed":
        return load_packed(d["path"])
    raise ConfigError(f"unknown data source {d['source']!r}")


def _pool(v):
    return int(v) if v else None


def _protocol(p: dict) -> ProbeProtocol:
    return ProbeProtocol(epochs=p["epochs"], lr=p["lr"], step_gamma=p["gamma"], step_every=p["step_every"],
                         batch_size=p["batch_size"])


def _read_labels(path: str) -> torch.Tensor:
    text = Path(path).read_text().split()
    try:
        return torch.tensor([int(v) for v in text], dtype=torch.long)
    except ValueError as exc:
        raise ValueError(f"label file {path}: {exc}") from exc


def _head_kind(p: dict) -> HeadKind:
    if p["head"] == "attention":
        return HeadKind("attention", {"d_model": p["d_model"], "num_layers": p["num_layers"],
                                      "num_heads": p["num_heads"], "pool_threshold": p["pool_threshold"]})
    return HeadKind(p["head"])


def _epoch_table(rep):
    return (["epoch", "loss", "lr"],
            [{"epoch": i + 1, "loss": l, "lr": r} for i, (l, r) in enumerate(zip(rep.epoch_losses, rep.lr_trace))])


# --------------------------------------------------------------------------
# tasks; each returns (results, tables, heatmaps, curves)
# --------------------------------------------------------------------------

def task_train_diffusion(cfg, out: Path, workers: int):
    tr = cfg["train"]
    model, schedule = load_model(cfg)
    data = load_data(cfg).split("train")
    res = train_diffusion(model, schedule, data.images, steps=tr["steps"], batch_size=tr["batch_size"], lr=tr["lr"],
                          seed=derive_seed(cfg["seed"], "train"), flip=data.flip,
                          checkpoint_every=tr["checkpoint_every"], out_dir=str(out), window=tr["window"])
    results = {"steps": tr["steps"], "initial_running_loss": res.initial_running,
               "final_running_loss": res.final_running, "running_loss": res.running,
               "checkpoints": [Path(p).name for p in res.checkpoints]}
    table = (["step", "loss"], [{"step": i + 1, "loss": v} for i, v in enumerate(res.losses)])
    return results, {"losses": table}, {}, {"loss_curve": (res.running, "running training loss")}


def task_sample(cfg, out: Path, workers: int):
    sp = cfg["sample"]
    model, schedule = load_model(cfg)
    c = model.config
    with torch.no_grad():
        x = generate(model, schedule, (sp["count"], c.in_channels, c.image_size, c.image_size),
                     derive_seed(cfg["seed"], "sample"), noise_scale=sp["noise_scale"])
    save_container(out / "samples.bin", {"samples": x}, {"kind": "samples"})
    try:
        from PIL import Image

        tiles = to_uint8(x.numpy()).transpose(0, 2, 3, 1)
        Image.fromarray(np.concatenate(list(tiles), axis=1)).save(out / "samples.png")
    except ImportError:  # pillow is optional for this output
        pass
    results = {"count": sp["count"], "mean": float(x.mean()), "std": float(x.std())}
    return results, {}, {}, {}


def task_extract(cfg, out: Path, workers: int):
    ex = cfg["extract"]
    model, schedule = load_model(cfg)
    data = load_data(cfg).split(ex["split"])
    req = FeatureRequest(ex["t"], ex["b"], _pool(ex["pool"]))
    store = precompute_features(model, schedule, data.images, data.labels, req, derive_seed(cfg["seed"], "noise", ex["split"]),
                                flatten=ex["flatten"], workers=workers)
    store.save(out / "features.bin")
    results = {"n": len(store), "shape": list(store.features.shape), "meta": store.meta}
    return results, {}, {}, {}


def _split_data(cfg):
    data = load_data(cfg)
    return data.split("train"), data.split("eval"), data.descriptor.num_classes


def task_probe(cfg, out: Path, workers: int):
    p = cfg["probe"]
    model, schedule = load_model(cfg)
    train, ev, classes = _split_data(cfg)
    labels = _read_labels(p["labels"]) if p["labels"] else train.labels
    if labels.shape[0] != train.labels.shape[0]:
        raise ValueError(f"feature count {train.labels.shape[0]} does not match label count {labels.shape[0]}")
    protocol = _protocol(p)
    seed = derive_seed(cfg["seed"], "probe")
    req = FeatureRequest(p["t"], p["b"], _pool(p["pool"]))
    if p["mode"] == "finetune":
        if p["standardize"]:
            raise ConfigError("probe.standardize needs precomputed features (mode = 'frozen')")
        src = BackboneSource(model, schedule, train.images, req, derive_seed(seed, "train"))
        ev_src = BackboneSource(model, schedule, ev.images, req, derive_seed(seed, "eval"))
        shape = src.batch(torch.arange(1))[0].shape
    else:
        tr_store = precompute_features(model, schedule, train.images, labels, req, derive_seed(seed, "train"),
                                       flatten=False, workers=workers)
        ev_store = precompute_features(model, schedule, ev.images, ev.labels, req, derive_seed(seed, "eval"),
                                       flatten=False, workers=workers)
        ftr, fev = tr_store.features, ev_store.features
        if p["standardize"]:
            z = Standardizer.fit(ftr)
            ftr, fev = z(ftr), z(fev)
        src, ev_src = StoreSource(ftr), StoreSource(fev)
        shape = tr_store.features.shape[1:]
    head = build_head(_head_kind(p), shape, classes, seed)
    rep = train_probe(head, src, labels, protocol, p["mode"], seed, eval_source=ev_src, eval_labels=ev.labels,
                      provenance={"t": p["t"], "b": p["b"], "pool": _pool(p["pool"])})
    return rep.to_dict(), {"epochs": _epoch_table(rep)}, {}, {"loss_curve": (rep.epoch_losses, "probe loss per epoch")}


def _taps(model, schedule, images, taps, seed, workers):
    out = {}
    for t, b in taps:
        out[(t, b)] = precompute_features(model, schedule, images, None, FeatureRequest(t, b), seed,
                                          flatten=False, workers=workers).features
    return out


def task_difformer(cfg, out: Path, workers: int):
    p, d = cfg["probe"], cfg["difformer"]
    model, schedule = load_model(cfg)
    train, ev, classes = _split_data(cfg)
    seed = derive_seed(cfg["seed"], "difformer")
    protocol = _protocol(p)
    taps = [(int(t), int(b)) for t in d["time_set"] for b in d["block_set"]]
    single = (int(p["t"]), int(p["b"]))
    if single not in taps:
        taps.append(single)
    tr = _taps(model, schedule, train.images, taps, derive_seed(seed, "train"), workers)
    ev_f = _taps(model, schedule, ev.images, taps, derive_seed(seed, "eval"), workers)
    chans = {b: model.catalog.entry(int(b)).channels for b in d["block_set"]}
    dcfg = DifFormerConfig(tuple(d["time_set"]), tuple(d["block_set"]), chans, classes, d_model=d["d_model"],
                           num_layers=d["num_layers"], num_heads=d["num_heads"], pool_threshold=d["pool_threshold"])
    fused = build_difformer(dcfg, seed)
    keys = [(int(t), int(b)) for t in d["time_set"] for b in d["block_set"]]
    rep = train_probe(fused, MultiStoreSource({k: tr[k] for k in keys}), train.labels, protocol, "frozen", seed,
                      eval_source=MultiStoreSource({k: ev_f[k] for k in keys}), eval_labels=ev.labels,
                      provenance={"time_set": list(d["time_set"]), "block_set": list(d["block_set"])})
    acfg = AttentionHeadConfig(model.catalog.entry(single[1]).channels, classes, d_model=d["d_model"],
                               num_layers=d["num_layers"], num_heads=d["num_heads"], pool_threshold=d["pool_threshold"])
    with seeded_init(derive_seed(seed, "head", "attention")):
        att = AttentionHead(acfg)
    base = train_probe(att, StoreSource(tr[single]), train.labels, protocol, "frozen", seed,
                       eval_source=StoreSource(ev_f[single]), eval_labels=ev.labels,
                       provenance={"t": single[0], "b": single[1]})
    results = {"difformer": rep.to_dict(), "attention": base.to_dict(),
               "fused_dim": dcfg.fused_dim}
    rows = [{"head": "difformer", "top1": rep.top1, "top5": rep.top5},
            {"head": "attention", "top1": base.top1, "top5": base.top5}]
    return results, {"summary": (["head", "top1", "top5"], rows)}, {}, {}


def run_diffeed(model, schedule, train, ev, classes, strategy, t, final_block, protocol, head_params, seed):
    """Train (feedback net + attention head) and a zero-feedback baseline head."""
    plan = make_feedback_plan(strategy, model.catalog, final_block, t)
    acfg = AttentionHeadConfig(model.catalog.entry(final_block).channels, classes, **head_params)

    def new_head():
        with seeded_init(derive_seed(seed, "head", "attention")):
            return AttentionHead(acfg)

    zero_net = build_feedback_net(plan, model.catalog, seed)
    zero_net.requires_grad_(False)
    zero_net.eval()
    base = train_probe(new_head(), DifFeedSource(model, schedule, zero_net, plan, train.images, derive_seed(seed, "train")),
                       train.labels, protocol, "frozen", seed,
                       eval_source=DifFeedSource(model, schedule, zero_net, plan, ev.images, derive_seed(seed, "eval")),
                       eval_labels=ev.labels, provenance={"feedback": "zero"})
    net = build_feedback_net(plan, model.catalog, seed)
    fed = train_probe(new_head(), DifFeedSource(model, schedule, net, plan, train.images, derive_seed(seed, "train")),
                      train.labels, protocol, "frozen", seed,
                      eval_source=DifFeedSource(model, schedule, net, plan, ev.images, derive_seed(seed, "eval")),
                      eval_labels=ev.labels, extra_modules=[net], provenance={"feedback": "trained"})
    return plan, base, fed, net


def task_diffeed(cfg, out: Path, workers: int):
    p, d = cfg["probe"], cfg["diffeed"]
    model, schedule = load_model(cfg)
    train, ev, classes = _split_data(cfg)
    seed = derive_seed(cfg["seed"], "diffeed")
    protocol = _protocol(p)
    selection = None
    final = int(d["final_block"])
    if not final:
        cands = [int(c) for c in d["candidates"]] or model.catalog.decoder_ids

        def score(b):
            return probe_cell(model, schedule, train.images, train.labels, ev.images, ev.labels, d["t"], b,
                              _pool(p["pool"]) or 4, protocol, derive_seed(seed, "select")).top1

        selection = choose_final_block(model.catalog, cands, score)
        final = selection["selected"]
    head_params = {"d_model": p["d_model"], "num_layers": p["num_layers"], "num_heads": p["num_heads"],
                   "pool_threshold": p["pool_threshold"]}
    plan, base, fed, net = run_diffeed(model, schedule, train, ev, classes, d["strategy"], d["t"], final,
                                       protocol, head_params, seed)
    save_container(out / "feedback.bin", dict(net.state_dict()), {"kind": "feedback-net", "plan": plan.to_dict()})
    results = {"plan": plan.to_dict(), "feedback_params": feedback_param_count(plan, model.catalog),
               "selection": selection, "baseline": base.to_dict(), "diffeed": fed.to_dict()}
    rows = [{"run": "zero-feedback", "top1": base.top1, "top5": base.top5},
            {"run": "diffeed", "top1": fed.top1, "top5": fed.top5}]
    tables = {"summary": (["run", "top1", "top5"], rows)}
    if selection:
        tables["selection"] = (["block", "accuracy"], selection["rows"])
    return results, tables, {}, {}


def task_cka(cfg, out: Path, workers: int):
    c = cfg["cka"]
    model, schedule = load_model(cfg)
    ev = load_data(cfg).split("eval")
    n = min(int(c["sample"]), len(ev))
    images = ev.images[:n]
    ids = list(range(n))
    seed = derive_seed(cfg["seed"], "cka")
    external = None
    if c["axis"] == "blocks":
        entries = [int(e) for e in c["entries"]] or [e.block_id for e in model.catalog]
    elif c["axis"] == "timesteps":
        entries = [int(e) for e in c["entries"]] or [10, 50, 90, 150, 300, 500, 900]
    else:
        if not c["external"]:
            raise ConfigError("cka.external must name an .npz feature dump for the cross axis")
        with np.load(c["external"]) as z:
            external = {k: z[k][:n] for k in z.files}
        entries = [tuple(e) for e in c["entries"]] or [(int(c["t"]), int(c["b"]))]
    mat = cka_grid(model, schedule, images, c["axis"], entries, t=c["t"], b=c["b"], seed=seed, workers=workers,
                   external=external, sample_ids=ids)
    rows = [{"row": str(r), **{str(col): float(mat.values[i, j]) for j, col in enumerate(mat.col_labels)}}
            for i, r in enumerate(mat.row_labels)]
    header = ["row", *[str(col) for col in mat.col_labels]]
    heat = (mat.values, mat.row_labels, mat.col_labels, f"linear CKA ({c['axis']})", 0.0, 1.0)
    return mat.to_dict(), {"cka": (header, rows)}, {"cka": heat}, {}


def task_knn(cfg, out: Path, workers: int):
    k = cfg["knn"]
    model, schedule = load_model(cfg)
    train, ev, classes = _split_data(cfg)
    seed = derive_seed(cfg["seed"], "knn")
    req = FeatureRequest(k["t"], k["b"], _pool(k["pool"]))
    tr = precompute_features(model, schedule, train.images, train.labels, req, derive_seed(seed, "train"), workers=workers)
    q = precompute_features(model, schedule, ev.images, ev.labels, req, derive_seed(seed, "eval"), workers=workers)
    res = knn_classify(tr.features, tr.labels, q.features, int(k["k"]), k["metric"], query_labels=q.labels,
                       num_classes=classes)
    results = {"top1": res.top1, "top5": res.top5, "predictions": res.predictions, **res.meta}
    return results, {}, {}, {}


def task_grid(cfg, out: Path, workers: int):
    g, p = cfg["grid"], cfg["probe"]
    model, schedule = load_model(cfg)
    train, ev, _ = _split_data(cfg)
    spec = GridSpec([int(t) for t in g["t_values"]], [int(b) for b in g["b_values"]],
                    [_pool(v) for v in g["pool_sizes"]], _protocol(p), p["head"])
    res = grid_search(model, schedule, train.images, train.labels, ev.images, ev.labels, spec,
                      derive_seed(cfg["seed"], "grid"), workers)
    header = ["t", "b", "pool", "top1", "top5", "train_top1", "error"]
    heat = {}
    for pool in spec.pool_sizes:
        vals = np.full((len(spec.t_values), len(spec.b_values)), np.nan)
        for r in res.rows:
            if r["pool"] == pool and r["top1"] is not None:
                vals[spec.t_values.index(r["t"]), spec.b_values.index(r["b"])] = r["top1"]
        heat[f"grid_pool{pool or 'none'}"] = (vals, [f"t={t}" for t in spec.t_values],
                                              [f"b={b}" for b in spec.b_values], f"top-1, pool {pool}", 0.0, 1.0)
    results = {"rows": res.rows, "best": res.best, "spec": res.spec}
    return results, {"grid": (header, res.rows)}, heat, {}


TASK_FUNCS = {
    "train-diffusion": task_train_diffusion,
    "sample": task_sample,
    "extract": task_extract,
    "probe": task_probe,
    "difformer": task_difformer,
    "diffeed": task_diffeed,
    "cka": task_cka,
    "knn": task_knn,
    "grid": task_grid,
}
assert set(TASK_FUNCS) == set(TASKS)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, repeatable (e.g. probe.t=150)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, help="worker threads for fan-out jobs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="diffrep", description="Diffusion U-Net representation experiments.")
    sub = parser.add_subparsers(dest="task", metavar="SUBCOMMAND")
    sub.required = True
    for name in TASKS:
        sub.add_parser(name, parents=[common], help=f"run the {name} task")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    line = json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except FileNotFoundError as exc:
        return _fail(exc, 2)
    except ConfigError as exc:
        return _fail(exc, 2)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.workers is not None:
        cfg["workers"] = args.workers
    workers = max(1, int(cfg["workers"]))
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(dump_json(cfg))
        results, tables, heatmaps, curves = TASK_FUNCS[args.task](cfg, out, workers)
        emit_report(out, args.task, payload_config(cfg), results, tables, heatmaps, curves)
    except Exception as exc:
        if args.verbose:
            log.exception("task %s failed", args.task)
        return _fail(exc, 1)
    print(json.dumps({"status": "ok", "task": args.task, "out": str(out)}))
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
