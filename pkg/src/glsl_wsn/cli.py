"""``glsl-wsn`` command line: ingest, train, eval, sweep, inject, clustered, export-curves.

Every subcommand resolves one run configuration (defaults < YAML file given
with ``--config`` < flags), writes it to ``<out>/run_config.yaml`` and then
does its work. Failures print one ``error: {...}`` JSON line to stderr.
Exit codes: 0 success, 1 runtime or configuration error, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .data import (
    DEFAULT_MODES,
    NormStats,
    SynthSpec,
    UniformGrid,
    load_grid,
    parse_ibrl,
    read_layout,
    resample_grid,
    save_grid,
    split_train_test,
    synth_generate,
    zscore_apply,
)
from .injection import KINDS, InjectionContext, inject
from .model import GLSLModel
from .pipeline import TopologySpec, prepare
from .plus import run_clustered
from .training import (
    EvalConfig,
    ModelDetector,
    TrainConfig,
    evaluate,
    sensitivity_sweep,
    train_two_phase,
)

log = logging.getLogger("glsl_wsn")

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/latest",
    "data": {
        "source": "synthetic",  # synthetic | ibrl
        "path": None,
        "layout": None,
        "nodes": list(range(1, 11)),
        "modes": list(DEFAULT_MODES),
        "period": 31.0,
        "ticks": 2000,
        "start": None,
        "grid_cache": None,
        "train_fraction": 0.6,
        "synthetic": {"n_nodes": 10, "n_modes": 3, "n_ticks": 2000, "noise": 0.02},
    },
    "topology": {"kind": "topk", "cd": None, "k": 3},
    "train": {
        "epochs": 100, "lr": 5e-4, "window": 20, "d": 32, "d_g": 32, "kernel": "gat",
        "heads": 2, "quota": 0.5, "tau": 10, "p": 40.0, "k_neighbors": 3, "kinds": list(KINDS),
    },
    "eval": {"n_checkpoints": 100, "delaystep": None, "tau": 10, "p": 40.0, "k_neighbors": 3, "kinds": list(KINDS)},
    "sweep": {"p_values": [10.0, 20.0, 40.0, 80.0]},
    "clustered": {"k": 3, "paa": "1"},
    "inject": {"kind": "random", "t_start": None, "count": 1, "node": None, "mode": None},
    "export": {"node": 0, "mode": 0, "range": None},
}


PROVENANCE_KEYS = ("command", "derived_seeds")


class CliError(Exception):
    """Runtime or configuration failure; ``field`` names the offending setting."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str, field: str | None = None) -> None:
    payload = {"kind": kind, "message": message}
    if field:
        payload["field"] = field
    print("error: " + json.dumps(payload, sort_keys=True), file=sys.stderr)


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise CliError(f"unknown config key {path + k!r}", path + k)
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


# flag dest -> (config path, converter)
FLAG_MAP = {
    "seed": ("seed", int),
    "out": ("out", str),
    "data": ("data.path", str),
    "layout": ("data.layout", str),
    "nodes": ("data.nodes", _int_list),
    "modes": ("data.modes", lambda s: s.split(",")),
    "period": ("data.period", float),
    "ticks": ("data.ticks", int),
    "grid_cache": ("data.grid_cache", str),
    "synth_nodes": ("data.synthetic.n_nodes", int),
    "synth_modes": ("data.synthetic.n_modes", int),
    "synth_ticks": ("data.synthetic.n_ticks", int),
    "synth_noise": ("data.synthetic.noise", float),
    "topology": ("topology.kind", str),
    "cd": ("topology.cd", float),
    "topk": ("topology.k", int),
    "epochs": ("train.epochs", int),
    "lr": ("train.lr", float),
    "window": ("train.window", int),
    "d": ("train.d", int),
    "d_g": ("train.d_g", int),
    "kernel": ("train.kernel", str),
    "heads": ("train.heads", int),
    "quota": ("train.quota", float),
    "T": ("eval.n_checkpoints", int),
    "delaystep": ("eval.delaystep", int),
    "tau": (("train.tau", "eval.tau"), int),
    "p": (("train.p", "eval.p"), float),
    "kinds": (("train.kinds", "eval.kinds"), lambda s: s.split(",")),
    "p_values": ("sweep.p_values", _float_list),
    "k": ("clustered.k", int),
    "paa": ("clustered.paa", str),
    "kind": ("inject.kind", str),
    "t_start": ("inject.t_start", int),
    "count": ("inject.count", int),
    "node": (("inject.node", "export.node"), int),
    "mode": (("inject.mode", "export.mode"), int),
    "range": ("export.range", str),
}


def _set(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = cfg
    for k in keys[:-1]:
        cur = cur[k]
    cur[keys[-1]] = value


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", "config") from exc
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a mapping", "config")
        # provenance keys written next to outputs; accepted so a run_config.yaml replays as-is
        for key in PROVENANCE_KEYS:
            loaded.pop(key, None)
        cfg = _merge(cfg, loaded)
    for dest, (paths, conv) in FLAG_MAP.items():
        raw = getattr(args, dest, None)
        if raw is None:
            continue
        value = conv(raw) if isinstance(raw, str) and conv is not str else raw
        for p in (paths,) if isinstance(paths, str) else paths:
            _set(cfg, p, value)
    if getattr(args, "data", None):
        cfg["data"]["source"] = "ibrl"
    if getattr(args, "synthetic", False):
        cfg["data"]["source"] = "synthetic"
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    t, e = cfg["train"], cfg["eval"]
    if cfg["data"]["source"] not in ("synthetic", "ibrl"):
        raise CliError(f"data.source must be synthetic or ibrl, got {cfg['data']['source']!r}", "data.source")
    if cfg["data"]["source"] == "ibrl" and not cfg["data"]["path"]:
        raise CliError("ibrl source needs data.path (--data)", "data.path")
    if t["d"] <= 0 or t["d"] % 2:
        raise CliError(f"d must be a positive even number, got {t['d']}", "train.d")
    if t["kernel"] not in ("gat", "gcn"):
        raise CliError(f"kernel must be gat or gcn, got {t['kernel']!r}", "train.kernel")
    if t["kernel"] == "gat" and (t["d"] // 2) % t["heads"]:
        raise CliError(f"heads={t['heads']} must divide d/2={t['d'] // 2}", "train.heads")
    for name, sec in (("train", t), ("eval", e)):
        for k in sec["kinds"]:
            if k not in KINDS:
                raise CliError(f"unknown anomaly kind {k!r}", f"{name}.kinds")
        if sec["tau"] < 1:
            raise CliError("tau must be >= 1", f"{name}.tau")
        if sec["p"] <= 0:
            raise CliError("p must be positive", f"{name}.p")
    if t["epochs"] < 1:
        raise CliError("epochs must be >= 1", "train.epochs")
    if t["window"] < 2:
        raise CliError("window must be >= 2", "train.window")
    if not 0.0 <= t["quota"] <= 1.0:
        raise CliError("quota must be in [0, 1]", "train.quota")
    if cfg["topology"]["kind"] not in ("complete", "coverage", "topk"):
        raise CliError(f"unknown topology {cfg['topology']['kind']!r}", "topology.kind")


def split_seeds(root: int) -> dict[str, int]:
    """Independent per-consumer seeds derived from the root seed."""
    init, injection, data = np.random.SeedSequence(root).generate_state(3)
    return {"init": int(init), "injection": int(injection), "data": int(data)}


def _train_cfg(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["kinds"] = tuple(t["kinds"])
    return TrainConfig(**t, seed=split_seeds(cfg["seed"])["init"])


def _eval_cfg(cfg: dict) -> EvalConfig:
    e = dict(cfg["eval"])
    e["kinds"] = tuple(e["kinds"])
    return EvalConfig(**e, seed=split_seeds(cfg["seed"])["injection"])


# --------------------------------------------------------------------------
# data


def load_data(data_cfg: dict, root_seed: int) -> tuple[UniformGrid, np.ndarray]:
    """Grid and node coordinates for a data section; honours ``grid_cache``."""
    if data_cfg["source"] == "synthetic":
        s = data_cfg["synthetic"]
        spec = SynthSpec(
            n_nodes=s["n_nodes"], n_modes=s["n_modes"], n_ticks=s["n_ticks"], noise=s["noise"],
            seed=split_seeds(root_seed)["data"],
        )
        cache = data_cfg.get("grid_cache")
        if cache and Path(cache).exists():
            coords = synth_generate(spec).coords
            return _checked_cache(cache, spec.n_nodes), coords
        synth = synth_generate(spec)
        if cache:
            save_grid(cache, synth.grid)
        return synth.grid, synth.coords

    nodes = list(data_cfg["nodes"])
    if not data_cfg.get("layout"):
        raise CliError("ibrl source needs a node layout file (--layout)", "data.layout")
    ids, xy = read_layout(data_cfg["layout"])
    pos = {i: p for i, p in zip(ids, xy)}
    missing = [n for n in nodes if n not in pos]
    if missing:
        raise CliError(f"nodes {missing} missing from layout", "data.nodes")
    coords = np.array([pos[n] for n in nodes])
    cache = data_cfg.get("grid_cache")
    if cache and Path(cache).exists():
        return _checked_cache(cache, len(nodes)), coords
    parsed = parse_ibrl(data_cfg["path"])
    grid = resample_grid(
        parsed.readings, nodes, data_cfg["modes"], data_cfg["period"], data_cfg["ticks"], data_cfg.get("start")
    )
    if cache:
        save_grid(cache, grid)
    return grid, coords


def _checked_cache(path, n_nodes: int) -> UniformGrid:
    grid = load_grid(path)
    if grid.n_nodes != n_nodes:
        raise CliError(f"grid cache {path} has {grid.n_nodes} nodes, expected {n_nodes}", "data.grid_cache")
    return grid


def _topology(cfg: dict) -> TopologySpec:
    t = cfg["topology"]
    return TopologySpec(t["kind"], t["cd"], t["k"])


# --------------------------------------------------------------------------
# output helpers


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: dict, command: str) -> None:
    record = {"command": command, **cfg, "derived_seeds": split_seeds(cfg["seed"])}
    (out / "run_config.yaml").write_text(yaml.safe_dump(record, sort_keys=True))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(cfg: dict, out: Path) -> None:
    grid, coords = load_data(cfg["data"], cfg["seed"])
    target = Path(cfg["data"]["grid_cache"] or out / "grid.bin")
    if not target.exists():
        save_grid(target, grid)
    _write_json(out / "ingest.json", {
        "grid": str(target), "shape": list(grid.shape), "node_ids": grid.node_ids,
        "modes": grid.mode_names, "period": grid.period, "coords": coords.tolist(),
    })


def cmd_train(cfg: dict, out: Path) -> None:
    grid, coords = load_data(cfg["data"], cfg["seed"])
    prep = prepare(grid, coords, _topology(cfg), cfg["data"]["train_fraction"])
    tc = _train_cfg(cfg)
    ctx = InjectionContext(prep.ctx.upper, prep.ctx.lower, prep.distances, tc.p, tc.k_neighbors)
    result = train_two_phase(prep.train, prep.adjacency, ctx, tc)
    meta = {
        "data": cfg["data"], "root_seed": cfg["seed"], "coords": np.asarray(coords).tolist(),
        "norm": prep.stats.to_dict(), "train": cfg["train"], "topology": cfg["topology"],
    }
    result.model.save(out / "model.ckpt", meta)
    _write_csv(
        out / "loss_history.csv", ["epoch", "rec", "ce", "blended"],
        [[h.epoch, _fmt(h.rec), _fmt(h.ce), _fmt(h.blended)] for h in result.history],
    )
    _write_json(out / "timing.json", {"train_seconds": result.seconds})


def _load_checkpoint(cfg: dict, args) -> tuple[GLSLModel, dict, np.ndarray, InjectionContext, np.ndarray]:
    """Model plus the standardised test array it is evaluated on."""
    if not args.checkpoint:
        raise CliError("--checkpoint is required", "checkpoint")
    try:
        model, meta = GLSLModel.load(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", "checkpoint") from exc
    data_cfg = dict(meta["data"])
    if args.grid_cache:
        data_cfg["grid_cache"] = args.grid_cache
    if args.data:
        data_cfg.update(source="ibrl", path=args.data, layout=args.layout or data_cfg.get("layout"))
    grid, coords = load_data(data_cfg, meta["root_seed"])
    if grid.shape[:2] != (model.config.n_modes, model.config.n_nodes):
        raise CliError(f"data shape {grid.shape[:2]} does not match the checkpoint", "data")
    stats = NormStats.from_dict(meta["norm"])
    z = zscore_apply(grid, stats).values
    _, te = split_train_test(grid.n_ticks, data_cfg["train_fraction"])
    from .topology import NodeLayout, distance_matrix

    dist = distance_matrix(NodeLayout.from_points(coords))
    ctx = InjectionContext(stats.upper, stats.lower, dist)
    return model, meta, z[:, :, te[0] : te[1]], ctx, z


def cmd_eval(cfg: dict, out: Path, args) -> None:
    model, _, test, ctx, _ = _load_checkpoint(cfg, args)
    ec = _eval_cfg(cfg)
    res = evaluate(ModelDetector(model), test, model.config.window, ctx, ec)
    _write_json(out / "metrics.json", res.report.to_dict())
    _write_csv(
        out / "decisions.csv", ["checkpoint", "set", "kind", "decision_window", "verdict"],
        [[d.checkpoint, d.set, d.kind, d.decision_window, d.verdict] for d in res.decisions],
    )
    _write_json(out / "timing.json", {
        "seconds_total": res.seconds_total,
        "seconds_per_checkpoint": res.seconds_per_checkpoint,
        "latency_per_checkpoint": res.latency_per_checkpoint,
    })


def cmd_sweep(cfg: dict, out: Path, args) -> None:
    model, _, test, ctx, _ = _load_checkpoint(cfg, args)
    rows = sensitivity_sweep(ModelDetector(model), test, model.config.window, ctx, _eval_cfg(cfg),
                             cfg["sweep"]["p_values"])
    _write_csv(
        out / "sweep.csv", ["p", "precision", "recall", "f1", "accuracy", "tp", "fp", "tn", "fn"],
        [[_fmt(r.p), _fmt(r.report.precision), _fmt(r.report.recall), _fmt(r.report.f1),
          _fmt(r.report.accuracy), *asdict(r.report.counts).values()] for r in rows],
    )


def cmd_inject(cfg: dict, out: Path) -> None:
    """Corrupt the raw grid; only the injected cells are rewritten."""
    grid, coords = load_data(cfg["data"], cfg["seed"])
    prep = prepare(grid, coords, _topology(cfg), cfg["data"]["train_fraction"])
    stats = prep.stats
    z = zscore_apply(grid, stats).values
    ic = cfg["inject"]
    tau = cfg["eval"]["tau"]
    ctx = InjectionContext(stats.upper, stats.lower, prep.distances, cfg["eval"]["p"], cfg["eval"]["k_neighbors"],
                           tuple(cfg["eval"]["kinds"]))
    rng = np.random.default_rng(split_seeds(cfg["seed"])["injection"])
    raw = grid.values.copy()
    rows = []
    for _ in range(ic["count"]):
        t_s = ic["t_start"] if ic["t_start"] is not None else int(rng.integers(0, grid.n_ticks - tau))
        t_e = t_s + tau
        if t_e >= grid.n_ticks:
            raise CliError(f"interval [{t_s}, {t_e}] runs past the end of the grid", "inject.t_start")
        kind = ic["kind"]
        if kind == "random":
            kind = ctx.kinds[int(rng.integers(len(ctx.kinds)))]
        res = inject(kind, z, t_s, t_e, ctx, rng, ic["node"], ic["mode"])
        cells = (res.mode, res.node, slice(t_s, t_e + 1))
        z = res.data
        raw[cells] = z[cells] * stats.std[res.mode, res.node] + stats.mean[res.mode, res.node]
        rows.append([t_s, t_e, res.kind, grid.node_ids[res.node], grid.mode_names[res.mode]])
    save_grid(out / "injected.grid", grid.with_values(raw))
    _write_csv(out / "labels.csv", ["t_s", "t_e", "kind", "injnode", "injmodal"], rows)


def cmd_clustered(cfg: dict, out: Path) -> None:
    grid, coords = load_data(cfg["data"], cfg["seed"])
    c = cfg["clustered"]
    res = run_clustered(grid, coords, c["k"], c["paa"], _train_cfg(cfg), _eval_cfg(cfg), _topology(cfg))
    clusters = [
        {"cluster": r.cluster, "node_ids": [grid.node_ids[i] for i in r.nodes], **r.report.to_dict()}
        for r in res.clusters
    ]
    _write_json(out / "clusters.json", {"clusters": clusters, "aggregate": res.report.to_dict()})
    row = res.aggregate_row()
    _write_csv(out / "aggregate.csv", list(row), [[row["k"], row["paa"], _fmt(row["f1"]),
                                                   _fmt(row["avg_running_time"])]])


def _parse_range(text: str | None, n: int) -> tuple[int, int]:
    if not text:
        return 0, n
    lo, hi = (int(x) for x in text.split(":"))
    if not 0 <= lo < hi <= n:
        raise CliError(f"range {text} outside 0:{n}", "export.range")
    return lo, hi


def cmd_export_curves(cfg: dict, out: Path, args) -> None:
    model, meta, _, _, z = _load_checkpoint(cfg, args)
    stats = NormStats.from_dict(meta["norm"])
    c = model.config
    node, mode = cfg["export"]["node"], cfg["export"]["mode"]
    if not 0 <= node < c.n_nodes:
        raise CliError(f"node index {node} outside 0..{c.n_nodes - 1}", "export.node")
    if not 0 <= mode < c.n_modes:
        raise CliError(f"mode index {mode} outside 0..{c.n_modes - 1}", "export.mode")
    lo, hi = _parse_range(cfg["export"]["range"], z.shape[-1])
    w = c.window
    state = model.init_state()
    rows = []
    for t in range(max(lo, w - 1), hi):
        o = model.forward(z[:, :, t - w + 1 : t + 1], state)
        state = o.state
        raw = z[mode, node, t] * stats.std[mode, node] + stats.mean[mode, node]
        rows.append([t, _fmt(raw), _fmt(z[mode, node, t]), _fmt(o.recon.data[mode, node, -1]),
                     *(_fmt(v) for v in o.z.data[node]), _fmt(o.probs.data[1])])
    header = ["t", "raw", "standardized", "reconstruction", *(f"latent_{i}" for i in range(c.d_g)), "p_anomaly"]
    _write_csv(out / "curves.csv", header, rows)


COMMANDS = ("ingest", "train", "eval", "sweep", "inject", "clustered", "export-curves")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="YAML file with run settings")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, help="root seed")
    g.add_argument("--verbose", "-v", action="store_true")
    d = common.add_argument_group("data")
    d.add_argument("--synthetic", action="store_true", help="use the synthetic generator (default)")
    d.add_argument("--data", help="IBRL data.txt path")
    d.add_argument("--layout", help="node layout file (id x y per line)")
    d.add_argument("--nodes", help="node ids, e.g. 1-10 or 1,3,5")
    d.add_argument("--modes", help="comma separated mode names")
    d.add_argument("--period", type=float, help="resampling period in seconds")
    d.add_argument("--ticks", type=int, help="number of resampled ticks")
    d.add_argument("--grid-cache", dest="grid_cache", help="grid cache file to reuse or create")
    d.add_argument("--synth-nodes", dest="synth_nodes", type=int)
    d.add_argument("--synth-modes", dest="synth_modes", type=int)
    d.add_argument("--synth-ticks", dest="synth_ticks", type=int)
    d.add_argument("--synth-noise", dest="synth_noise", type=float)
    t = common.add_argument_group("topology")
    t.add_argument("--topology", choices=["complete", "coverage", "topk"])
    t.add_argument("--cd", type=float, help="coverage distance")
    t.add_argument("--topk", type=int, help="neighbours per node for topk")
    m = common.add_argument_group("model and training")
    m.add_argument("--epochs", type=int)
    m.add_argument("--lr", type=float)
    m.add_argument("--window", "-W", type=int)
    m.add_argument("--d", type=int)
    m.add_argument("--dg", dest="d_g", type=int)
    m.add_argument("--kernel", choices=["gat", "gcn"])
    m.add_argument("--heads", type=int)
    m.add_argument("--quota", type=float)
    m.add_argument("--tau", type=int)
    m.add_argument("--p", type=float)
    m.add_argument("--kinds", help="comma separated anomaly kinds")
    e = common.add_argument_group("evaluation")
    e.add_argument("--checkpoint", help="trained model checkpoint")
    e.add_argument("--T", type=int, help="number of evaluation checkpoints")
    e.add_argument("--delaystep", type=int)

    parser = _Parser(prog="glsl-wsn", description="GLSL anomaly detection for wireless sensor networks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="build a grid cache")
    sub.add_parser("train", parents=[common], help="train a model")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp = sub.add_parser("sweep", parents=[common], help="recall versus deviation factor p")
    sp.add_argument("--p-values", dest="p_values", help="comma separated, ascending")
    ip = sub.add_parser("inject", parents=[common], help="inject anomalies into a grid")
    ip.add_argument("--kind", choices=["random", *KINDS])
    ip.add_argument("--t-start", dest="t_start", type=int)
    ip.add_argument("--count", type=int)
    ip.add_argument("--node", type=int, help="node index")
    ip.add_argument("--mode", type=int, help="mode index")
    cp = sub.add_parser("clustered", parents=[common], help="GLSL+ per-cluster runs")
    cp.add_argument("--k", type=int)
    cp.add_argument("--paa", help="PAA ratio such as 2/5")
    xp = sub.add_parser("export-curves", parents=[common], help="dump raw/reconstruction/latent series")
    xp.add_argument("--node", type=int, help="node index")
    xp.add_argument("--mode", type=int, help="mode index")
    xp.add_argument("--range", help="tick range lo:hi")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = _out_dir(cfg)
        _write_config(out, cfg, args.command)
        handler = {
            "ingest": lambda: cmd_ingest(cfg, out),
            "train": lambda: cmd_train(cfg, out),
            "eval": lambda: cmd_eval(cfg, out, args),
            "sweep": lambda: cmd_sweep(cfg, out, args),
            "inject": lambda: cmd_inject(cfg, out),
            "clustered": lambda: cmd_clustered(cfg, out),
            "export-curves": lambda: cmd_export_curves(cfg, out, args),
        }[args.command]
        handler()
    except CliError as exc:
        _emit_error("config" if exc.field else "runtime", str(exc), exc.field)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        _emit_error("runtime", f"{type(exc).__name__}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
