"""Command-line entry point: ``graphalign {generate,align,sweep,train,oracle-check}``.

Every flag can also be given in a flat ``key = value`` config file passed with
``--config``; flags win over file values. The environment variable
``GRAPHALIGN_SEED`` replaces every seed. The effective configuration, minus
output paths and the worker count, is echoed into each report.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import io as gio
from .bench import AlignmentReport, SweepGrid, complexity_estimate, evaluate, sweep, \
    time_pipeline, training_examples
from .errors import EXIT_CODES, ConfigError, GraphAlignError, OracleMismatchError, UsageError
from .geometry import PointSet
from .graph import GraphConfig, PadMode, build_graph
from .oracles import run_oracle_checks
from .pipeline import Method, PipelineConfig, run_pipeline
from .safa import AttentionMode, init_params, train_selector
from .scene import GroundTruth, PerturbationSpec, Scene, SceneSpec, class_embeddings, generate, \
    perturb

MAX_K = 64
SEED_ENV = "GRAPHALIGN_SEED"
SEED_KEYS = ("seed", "perturb_seed", "attn_seed")
# never echoed: they differ between otherwise identical runs
UNECHOED = {"config", "workers", "out", "out_dir", "report", "dump_fused", "graph_out"}


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _str_list(text) -> tuple[str, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


@dataclass(frozen=True)
class Option:
    name: str
    type: object
    default: object
    help: str
    commands: tuple[str, ...]


ALL_METHODS = ",".join(m.value for m in Method)
SCENE = ("generate", "sweep", "train")
RUN = ("align", "sweep", "train")

OPTIONS = [
    Option("workers", int, None, "worker threads (default: CPU count, at most 8)",
           ("generate", "align", "sweep", "train", "oracle-check")),
    # scene
    Option("seed", int, 0, "scene seed (first of consecutive seeds for multi-scene runs)",
           (*SCENE, "oracle-check")),
    Option("n_objects", int, 12, "boxes per scene", SCENE),
    Option("n_classes", int, 3, "object classes", (*SCENE, "align")),
    Option("range_min", float, 5.0, "nearest box distance, m", SCENE),
    Option("range_max", float, 70.0, "farthest box distance, m", SCENE),
    Option("points_per_object", int, 2000, "points on a box at 10 m", SCENE),
    Option("ground_points", int, 12000, "ground returns", SCENE),
    Option("image_width", int, 320, "feature-map width", SCENE),
    Option("image_height", int, 96, "feature-map height", SCENE),
    Option("channels", int, 12, "feature channels", SCENE),
    Option("scale", float, 0.25, "image down-sampling scale", SCENE),
    Option("focal", float, 720.0, "focal length, full-resolution pixels", SCENE),
    Option("scan_order", _bool, True, "store points in sensor scan order (else shuffled)", SCENE),
    # perturbation
    Option("translation_sigma", float, 0.0, "extrinsic translation noise per axis, m", RUN),
    Option("rotation_sigma", float, 0.0, "extrinsic rotation noise, rad", RUN),
    Option("timing_skew", float, 0.0, "lateral camera offset, m", RUN),
    Option("perturb_seed", int, 1000, "perturbation seed (scene i uses perturb_seed + i)", RUN),
    # graph and attention
    Option("k", int, 16, f"neighbors per point (1..{MAX_K})", ("align", "train")),
    Option("chunk", int, 1000, "points per KNN subspace", ("align", "train")),
    Option("pad_mode", str, PadMode.SELF_INDEX.value, "padding for short subspaces: "
           "self_index or literal_zero", RUN),
    Option("heads", int, 1, "attention heads (must divide channels)", ("align", "train")),
    Option("mode", str, AttentionMode.LITERAL.value, "attention mode: literal or standard", RUN),
    Option("params", str, None, "GASA attention parameter file (default: seeded init)",
           ("align", "sweep")),
    Option("attn_seed", int, 0, "seed for attention initialisation", RUN),
    # generate
    Option("out_dir", str, "scene", "output directory", ("generate",)),
    # align
    Option("input_dir", str, None, "directory holding points.gapc, features.gafm, "
           "calib.txt, truth.csv", ("align",)),
    Option("points", str, None, "GAPC point cloud", ("align",)),
    Option("fmap", str, None, "GAFM image feature map", ("align",)),
    Option("calib", str, None, "calibration text file", ("align",)),
    Option("truth", str, None, "ground-truth CSV", ("align",)),
    Option("methods", _str_list, ALL_METHODS, "comma-separated methods", ("align", "sweep")),
    Option("report", str, "report.txt", "report output path", ("align",)),
    Option("dump_fused", str, None, "write fused features of the last method as GAPC",
           ("align",)),
    Option("graph_out", str, None, "write the neighbor graph as GAGR", ("align",)),
    Option("repetitions", int, 0, "timing repetitions (0 = no timing, else at least 3)",
           ("align",)),
    # sweep
    Option("k_values", _int_list, "16", "comma-separated K grid", ("sweep",)),
    Option("chunk_values", _int_list, "1000", "comma-separated chunk grid", ("sweep",)),
    Option("heads_values", _int_list, "1", "comma-separated H grid", ("sweep",)),
    Option("scenes", int, 1, "number of scenes (consecutive seeds)", ("sweep", "train")),
    Option("sweep_repetitions", int, 3, "timing repetitions per cell (0 = no timing)",
           ("sweep",)),
    Option("out", str, None, "output path", ("sweep", "train")),
    # train
    Option("steps", int, 200, "gradient steps", ("train",)),
    Option("learning_rate", float, 30.0, "gradient-descent step size", ("train",)),
    Option("gradient", str, "analytic", "analytic or fd", ("train",)),
    Option("max_points", int, 2000, "points sampled per training scene", ("train",)),
]

# sweep grid flags read as --k / --chunk / --heads on the command line
FLAG_NAMES = {"k_values": "k", "chunk_values": "chunk", "heads_values": "heads",
              "sweep_repetitions": "repetitions"}
BY_NAME = {}
for _o in OPTIONS:
    BY_NAME.setdefault(_o.name, []).append(_o)

COMMAND_HELP = {
    "generate": "write a synthetic scene: GAPC points, GAFM features, calibration, truth CSV",
    "align": "run alignment methods on scene files and write a report",
    "sweep": "evaluate a K / chunk / H grid over seeded scenes and write CSV",
    "train": "fit attention parameters on seeded scenes and write GASA",
    "oracle-check": "compare every fast path against its brute-force oracle",
}


def _exit_code_help() -> str:
    return "exit codes:\n" + "\n".join(f"  {v:3d}  {k}" for k, v in
                                       sorted(EXIT_CODES.items(), key=lambda kv: kv[1]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphalign", description="Graph-based LiDAR/camera feature alignment.",
        epilog=_exit_code_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, text in COMMAND_HELP.items():
        p = sub.add_parser(cmd, help=text, description=text, epilog=_exit_code_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key = value file; flags override it")
        for opt in OPTIONS:
            if cmd not in opt.commands:
                continue
            flag = "--" + FLAG_NAMES.get(opt.name, opt.name).replace("_", "-")
            p.add_argument(flag, dest=opt.name, help=f"{opt.help} [default: {opt.default}]")
    return parser


def load_config_file(path) -> dict[str, str]:
    text = Path(path).read_text()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, _, value = line.partition(sep)
                break
        else:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _convert(opt: Option, value):
    if value is None:
        return None
    try:
        return opt.type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {opt.name}: {value!r} ({exc})") from None


def resolve_config(command: str, flags: dict, env=None) -> dict:
    """Defaults, then config file, then flags, then the seed environment variable."""
    env = os.environ if env is None else env
    opts = {o.name: o for o in OPTIONS if command in o.commands}
    # sweep spells its grid flags --k/--chunk/--heads; accept both spellings in files
    aliases = {v: k for k, v in FLAG_NAMES.items() if k in opts}
    values = {name: o.default for name, o in opts.items()}
    if flags.get("config"):
        known = set(BY_NAME) | set(FLAG_NAMES.values())
        for key, value in load_config_file(flags["config"]).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in {flags['config']}")
            key = aliases.get(key, key)
            if key in opts:  # keys for other commands are ignored
                values[key] = value
    for key, value in flags.items():
        if key in opts:
            values[key] = value
    if env.get(SEED_ENV, "") != "":
        for key in SEED_KEYS:
            if key in opts:
                values[key] = env[SEED_ENV]
    values = {name: _convert(opts[name], v) for name, v in values.items()}
    if values.get("workers") is None and "workers" in opts:
        values["workers"] = default_workers()
    if flags.get("config"):
        values["config"] = flags["config"]
    return values


def _echo(cfg: dict) -> dict[str, str]:
    out = {}
    for k, v in cfg.items():
        if k in UNECHOED or v is None:
            continue
        if isinstance(v, tuple):
            out[k] = ",".join(map(str, v))
        elif isinstance(v, bool):
            out[k] = str(v).lower()
        else:
            out[k] = str(v)
    return out


def _check_ranges(cfg: dict):
    for key in ("k", "k_values"):
        vals = cfg.get(key)
        if vals is None:
            continue
        for k in (vals if isinstance(vals, tuple) else (vals,)):
            if not 1 <= k <= MAX_K:
                raise ConfigError(f"K={k} outside 1..{MAX_K}")
    if cfg.get("workers") is not None and cfg["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    for key in ("mode", "pad_mode", "gradient"):
        if key in cfg:
            allowed = {"mode": [m.value for m in AttentionMode],
                       "pad_mode": [m.value for m in PadMode],
                       "gradient": ["analytic", "fd"]}[key]
            if cfg[key] not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}")
    for m in cfg.get("methods", ()):
        if m not in [x.value for x in Method]:
            raise ConfigError(f"unknown method {m!r}")


def _scene_spec(cfg: dict, seed: int) -> SceneSpec:
    return SceneSpec(seed=seed, n_objects=cfg["n_objects"], n_classes=cfg["n_classes"],
                     range_min=cfg["range_min"], range_max=cfg["range_max"],
                     points_per_object=cfg["points_per_object"],
                     ground_points=cfg["ground_points"], image_width=cfg["image_width"],
                     image_height=cfg["image_height"], channels=cfg["channels"],
                     scale=cfg["scale"], focal=cfg["focal"], scan_order=cfg["scan_order"])


def _perturbation(cfg: dict, offset: int = 0) -> PerturbationSpec:
    return PerturbationSpec(cfg["translation_sigma"], cfg["rotation_sigma"], cfg["timing_skew"],
                            seed=cfg["perturb_seed"] + offset)


def _load_params(cfg: dict, channels: int, heads: int):
    if cfg.get("params"):
        params = gio.decode_params(gio.read_bytes(cfg["params"]))
        if params.heads != heads or params.channels != channels:
            raise ConfigError(f"{cfg['params']}: parameters are C={params.channels} "
                              f"H={params.heads}, run needs C={channels} H={heads}")
        return params
    return init_params(channels, heads, seed=cfg["attn_seed"])


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    scene = generate(_scene_spec(cfg, cfg["seed"]))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    gio.write_bytes(out / "points.gapc", gio.encode_points(scene.points))
    gio.write_bytes(out / "features.gafm", gio.encode_feature_map(scene.fmap))
    (out / "calib.txt").write_text(gio.format_calibration(scene.rig))
    (out / "truth.csv").write_text(gio.format_ground_truth(scene.truth.labels, scene.truth.pixel))
    print(f"wrote {len(scene.points)} points to {out}")
    return 0


def _align_inputs(cfg: dict) -> dict[str, str]:
    names = {"points": "points.gapc", "fmap": "features.gafm", "calib": "calib.txt",
             "truth": "truth.csv"}
    paths = {}
    for key, name in names.items():
        if cfg.get(key):
            paths[key] = cfg[key]
        elif cfg.get("input_dir"):
            paths[key] = str(Path(cfg["input_dir"]) / name)
        else:
            raise UsageError(f"align needs --{key} or --input-dir")
    return paths


def cmd_align(cfg: dict) -> int:
    paths = _align_inputs(cfg)
    cfg.update(paths)
    points = gio.decode_points(gio.read_bytes(paths["points"]))
    fmap = gio.decode_feature_map(gio.read_bytes(paths["fmap"]))
    clean = gio.parse_calibration(Path(paths["calib"]).read_text())
    labels, pixel = gio.parse_ground_truth(Path(paths["truth"]).read_text())
    if len(labels) != len(points):
        raise ConfigError(f"{paths['truth']} has {len(labels)} rows, point cloud has "
                          f"{len(points)}")
    if labels.size and (labels.min() < 0 or labels.max() > cfg["n_classes"]):
        raise ConfigError(f"{paths['truth']}: labels outside 0..n_classes={cfg['n_classes']}")
    if fmap.channels != points.channels:
        raise ConfigError(f"feature map has {fmap.channels} channels, points have "
                          f"{points.channels}")
    if (fmap.width, fmap.height) != (clean.image_width, clean.image_height):
        raise ConfigError("feature map size does not match the calibration image size")
    c = points.channels
    spec = SceneSpec(n_classes=cfg["n_classes"], channels=c, image_width=fmap.width,
                     image_height=fmap.height)
    truth = GroundTruth(labels, pixel, class_embeddings(cfg["n_classes"], c))
    scene = Scene(spec, PointSet(points.coords, points.features, labels), fmap, clean, truth)
    rig = perturb(clean, _perturbation(cfg))

    methods = [Method(m) for m in cfg["methods"]]
    if not methods:
        raise UsageError("no methods selected")
    graph = GraphConfig(cfg["k"], cfg["chunk"], PadMode(cfg["pad_mode"]))
    params = _load_params(cfg, c, cfg["heads"]) if Method.GRAPH_SAFA_MAX in methods else None
    pcfg = PipelineConfig(graph, params, AttentionMode(cfg["mode"]), workers=cfg["workers"])
    if 0 < cfg["repetitions"] < 3 or cfg["repetitions"] < 0:
        raise ConfigError("repetitions must be 0 or at least 3")

    report = AlignmentReport(config=_echo(cfg))
    safa_macs = None
    for m in methods:
        part = evaluate(scene, rig, m, pcfg)
        safa_macs = part.complexity.get("instrumented_safa_macs", safa_macs)
        part.complexity = {}
        report.merge(part)
        if cfg["repetitions"]:
            report.timing_ms[m.value] = time_pipeline(scene, rig, m, pcfg, cfg["repetitions"])
    n_surv = next(iter(report.surviving.values()))
    report.complexity = complexity_estimate(n_surv, graph.k, c, fmap.width, fmap.height)
    if safa_macs is not None:
        report.complexity["instrumented_safa_macs"] = safa_macs
    problems = report.check_invariants()
    if problems:
        raise GraphAlignError("report invariant violated: " + "; ".join(problems))
    Path(cfg["report"]).write_text(gio.format_report(report))

    if cfg.get("dump_fused"):
        res = run_pipeline(scene.points, fmap, rig, methods[-1], pcfg)
        dump = PointSet(points.coords, res.output, labels)
        gio.write_bytes(cfg["dump_fused"], gio.encode_points(dump))
    if cfg.get("graph_out"):
        g = build_graph(scene.points, graph, workers=cfg["workers"])
        gio.write_bytes(cfg["graph_out"], gio.encode_graph(g))
    far = [b for b in report.buckets if b.bucket == "40m-inf"]
    print("; ".join(f"{b.method} far accuracy {b.accuracy:.4f}" for b in far))
    return 0


def _scenes_and_rigs(cfg: dict):
    scenes = [generate(_scene_spec(cfg, cfg["seed"] + i)) for i in range(cfg["scenes"])]
    rigs = [perturb(s.rig, _perturbation(cfg, i)) for i, s in enumerate(scenes)]
    return scenes, rigs


def cmd_sweep(cfg: dict) -> int:
    if cfg["scenes"] < 1:
        raise UsageError("sweep needs at least one scene")
    if not cfg.get("out"):
        raise UsageError("sweep needs --out")
    try:
        grid = SweepGrid(cfg["k_values"], cfg["chunk_values"], cfg["heads_values"],
                         cfg["methods"])
    except GraphAlignError as exc:
        raise UsageError(str(exc)) from None
    if any(c < 1 for c in grid.chunk):
        raise ConfigError("chunk values must be positive")
    reps = cfg["sweep_repetitions"] or None
    if reps is not None and reps < 3:
        raise ConfigError("repetitions must be 0 or at least 3")
    scenes, rigs = _scenes_and_rigs(cfg)
    cache = {}

    def params_for(channels, heads):
        if (channels, heads) not in cache:
            cache[channels, heads] = _load_params(cfg, channels, heads)
        return cache[channels, heads]

    rows = sweep(scenes, rigs, grid, AttentionMode(cfg["mode"]), params_for, reps,
                 workers=cfg["workers"])
    Path(cfg["out"]).write_text(gio.format_sweep_csv(rows, _echo(cfg)))
    print(f"wrote {len(rows)} rows to {cfg['out']}")
    return 0


def cmd_train(cfg: dict) -> int:
    if not cfg.get("out"):
        raise UsageError("train needs --out")
    scenes, rigs = _scenes_and_rigs(cfg)
    graph = GraphConfig(cfg["k"], cfg["chunk"], PadMode(cfg["pad_mode"]))
    examples = training_examples(scenes, rigs, graph, cfg["max_points"], seed=cfg["attn_seed"])
    params = init_params(cfg["channels"], cfg["heads"], seed=cfg["attn_seed"])
    result = train_selector(examples, params, cfg["steps"], cfg["learning_rate"],
                            AttentionMode(cfg["mode"]), gradient=cfg["gradient"])
    gio.write_bytes(cfg["out"], gio.encode_params(result.params))
    print(f"loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}; wrote {cfg['out']}")
    return 0


def cmd_oracle_check(cfg: dict) -> int:
    results = run_oracle_checks(cfg["seed"], workers=cfg["workers"])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise OracleMismatchError(f"{len(failed)} oracle check(s) failed: {', '.join(failed)}")
    return 0


COMMANDS = {"generate": cmd_generate, "align": cmd_align, "sweep": cmd_sweep,
            "train": cmd_train, "oracle-check": cmd_oracle_check}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        cfg = resolve_config(args.command, flags)
        _check_ranges(cfg)
        return COMMANDS[args.command](cfg)
    except GraphAlignError as exc:
        print(f"graphalign: error: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        print(f"graphalign: error: {where}: {_one_line(exc.strerror or exc)}", file=sys.stderr)
        return EXIT_CODES["I/O error (missing or unwritable path)"]


if __name__ == "__main__":
    sys.exit(main())
