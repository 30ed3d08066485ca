"""Command-line entry point: ``graphbackup <command> [options]``.

Settings come from an INI file (``--config``) with sections ``env``,
``learner``, ``backup`` and ``run``, overridden by dotted flags such as
``--backup.depth 10``. ``--print-config`` shows the fully resolved config.

Exit codes: 0 success, 1 runtime error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import analysis
from .backup import OPERATORS, BackupConfig, BackupError
from .envs import StateKey, env_label, parse_env
from .graph import GraphFormatError, TransitionGraph
from .learner import (
    ConfigError,
    LearnerConfig,
    ReplayBuffer,
    RunMetrics,
    collect_random_walk,
    compute_target,
    offline_training,
    read_trajectory_log,
    run_training,
    write_trajectory_log,
)
from .values import ScalarQTable, load_table, save_table

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- config ------------------------------------------------------------------------

def _field_kinds(cls, skip=()) -> Dict[str, str]:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        t = str(f.type)
        out[f.name] = "optfloat" if "Optional[float]" in t else t
    return out


SECTIONS: Dict[str, Dict[str, str]] = {
    "env": {"name": "str"},
    "learner": _field_kinds(LearnerConfig, skip=("seed",)),
    "backup": _field_kinds(BackupConfig, skip=("policy",)),
    "run": {"out": "str", "seeds": "str", "emit_plots": "bool", "transitions": "int", "data": "str"},
}

RUN_DEFAULTS = {"out": "runs", "seeds": "", "emit_plots": False, "transitions": 5000, "data": ""}


def _convert(section: str, key: str, raw):
    kinds = SECTIONS.get(section)
    if kinds is None:
        raise UsageError(f"unknown config section [{section}]")
    kind = kinds.get(key)
    if kind is None:
        raise UsageError(f"unknown config key {section}.{key}")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "optfloat":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise UsageError(f"invalid value for {section}.{key}: {raw!r}") from None
    return text


@dataclass
class RunConfig:
    env: str = ""
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    backup: BackupConfig = field(default_factory=BackupConfig)
    run: Dict[str, object] = field(default_factory=lambda: dict(RUN_DEFAULTS))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["env"] = {"name": self.env}
        cp["learner"] = {k: _fmt(getattr(self.learner, k)) for k in SECTIONS["learner"]}
        cp["backup"] = {k: _fmt(getattr(self.backup, k)) for k in SECTIONS["backup"]}
        cp["run"] = {k: _fmt(self.run[k]) for k in SECTIONS["run"]}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def load_config(path: Optional[str], overrides: Dict[str, str]) -> RunConfig:
    values: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                values.setdefault(section, {})[key] = _convert(section, key, raw)
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        values[section][key] = _convert(section, key, raw)
    try:
        learner = LearnerConfig(**values["learner"])
        learner.validate()
        backup = BackupConfig(**values["backup"])
    except (ConfigError, BackupError) as exc:
        raise UsageError(str(exc)) from None
    run = dict(RUN_DEFAULTS)
    run.update(values["run"])
    return RunConfig(str(values["env"].get("name", "")), learner, backup, run)


def parse_seeds(text: str) -> List[int]:
    """``"3"``, ``"0..4"`` (inclusive) or comma lists of either."""
    seeds: List[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("..")
        try:
            if sep:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"invalid seeds: {text!r}") from None
    if not seeds:
        raise UsageError(f"invalid seeds: {text!r}")
    return seeds


def resolve_seeds(cfg: RunConfig) -> List[int]:
    text = str(cfg.run.get("seeds") or "") or os.environ.get("GBL_SEED", "") or "0"
    return parse_seeds(text)


def _require_env(cfg: RunConfig):
    if not cfg.env:
        raise UsageError("env.name required")
    try:
        return parse_env(cfg.env)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid env.name {cfg.env!r}: {exc}") from None


# -- output helpers ------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary(finals: Dict[int, Optional[float]]) -> dict:
    vals = [v for v in finals.values() if v is not None]
    return {
        "final_eval_return": {str(k): v for k, v in finals.items()},
        "mean_final_eval_return": float(np.mean(vals)) if vals else None,
        "median_final_eval_return": float(np.median(vals)) if vals else None,
        "seeds": sorted(finals),
    }


def svg_line_chart(series: Dict[str, Sequence[tuple]], title: str, width: int = 480, height: int = 300) -> str:
    """Static SVG chart of (x, y) series; deterministic text output."""
    pad = 40
    pts = [p for s in series.values() for p in s]
    if not pts:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    else:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(max(ys), 1.0)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="12">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 14}" font-size="10">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10" text-anchor="end">{x1:g}</text>',
        f'<text x="{pad - 4}" y="{sy(y1):.1f}" font-size="10" text-anchor="end">{y1:g}</text>',
        f'<text x="{pad - 4}" y="{sy(y0):.1f}" font-size="10" text-anchor="end">{y0:g}</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" points="{path}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 12 * i}" font-size="10" text-anchor="end" '
                   f'fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- commands ----------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    env = _require_env(cfg)
    seeds = resolve_seeds(cfg)
    out = Path(str(cfg.run["out"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    finals: Dict[int, Optional[float]] = {}
    curves = {}
    for seed in seeds:
        lcfg = replace(cfg.learner, seed=seed)
        res = run_training(env.clone(), lcfg, cfg.backup, return_state=True)
        res.metrics.write_csv(out / f"metrics_seed{seed}.csv")
        save_table(res.online, out / f"values_seed{seed}.vtbl")
        res.graph.save(out / f"graph_seed{seed}.tgph")
        finals[seed] = res.metrics.final_eval_return
        curves[f"seed {seed}"] = res.metrics.eval_returns
        logger.info("seed %d done: final eval %s", seed, finals[seed])
    summary = _summary(finals)
    summary.update(env=env_label(env), operator=cfg.backup.operator)
    _write_json(out / "summary.json", summary)
    if cfg.run["emit_plots"]:
        (out / "eval_return.svg").write_text(
            svg_line_chart(curves, f"{cfg.backup.operator} on {env_label(env)}"))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_dataset(cfg: RunConfig):
    data = str(cfg.run.get("data") or "")
    if data:
        if not Path(data).exists():
            raise UsageError(f"trajectory log not found: {data}")
        return read_trajectory_log(data), None
    env = _require_env(cfg)
    seed = resolve_seeds(cfg)[0]
    return collect_random_walk(env, int(cfg.run["transitions"]), seed), env


def cmd_offline_train(cfg: RunConfig) -> int:
    episodes, env = _load_dataset(cfg)
    out = Path(str(cfg.run["out"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    if env is not None:
        write_trajectory_log(out / "dataset.log", episodes)
    action_count = env.action_count if env is not None else None
    report = {}
    for seed in resolve_seeds(cfg):
        lcfg = replace(cfg.learner, seed=seed)
        res = offline_training(episodes, lcfg, cfg.backup, action_count=action_count, return_state=True)
        res.metrics.write_csv(out / f"metrics_seed{seed}.csv")
        save_table(res.online, out / f"values_seed{seed}.vtbl")
        m, s = analysis.stability_report(res.metrics)[cfg.backup.operator]
        report[str(seed)] = {"estimate_mean": m, "estimate_std": s}
        if cfg.run["emit_plots"]:
            trace = [(t, sd) for t, _, sd in res.metrics.stability_trace if sd == sd]
            (out / f"stability_seed{seed}.svg").write_text(
                svg_line_chart({"std of last 10 estimates": trace}, f"{cfg.backup.operator} seed {seed}"))
    _write_json(out / "stability.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_compute_target(cfg: RunConfig, state: str, action: int, values: Optional[str]) -> int:
    episodes, env = _load_dataset(cfg)
    buffer, graph = ReplayBuffer(), TransitionGraph()
    for ep in episodes:
        for k, rec in enumerate(ep):
            buffer.add(rec, episode_start=k == 0)
            graph.insert(rec, episode_start=k == 0)
        buffer.end_episode()
    try:
        s = StateKey.fromhex(state)
    except ValueError:
        raise UsageError(f"state must be hex, got {state!r}") from None
    index = next((i for i, r in enumerate(buffer.records) if r.state == s and r.action == action), None)
    if index is None:
        raise UsageError(f"pair ({state}, {action}) does not occur in the dataset")
    n_actions = env.action_count if env is not None else 1 + max(r.action for r in buffer.records)
    table = load_table(values) if values else ScalarQTable(n_actions)
    seed = resolve_seeds(cfg)[0]
    rng = np.random.default_rng(seed)
    tgt = compute_target(cfg.backup, buffer, graph, index, table, table, rng)
    value = float(tgt) if np.ndim(tgt) == 0 else [float(x) for x in tgt]
    print(json.dumps({"operator": cfg.backup.operator, "state": state, "action": action, "target": value},
                     sort_keys=True))
    return EXIT_OK


def _read_graph(path: str) -> TransitionGraph:
    if not Path(path).exists():
        raise UsageError(f"graph file not found: {path}")
    return TransitionGraph.load(path)


def cmd_analyze(path: str, out: Optional[str]) -> int:
    graph = _read_graph(path)
    records = analysis.graph_stats(graph, horizons=(5, 10))
    text = json.dumps(records, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_graph(path: str, out: str, edge_list: Optional[str] = None) -> int:
    graph = _read_graph(path)
    layout = analysis.compute_radial_layout(graph)
    analysis.export_dot(graph, layout, out)
    if edge_list:
        graph.export_edge_list(edge_list)
    return EXIT_OK


def cmd_compare(cfg: RunConfig, operators: Sequence[str], envs: Sequence[str]) -> int:
    if len(operators) < 2:
        raise UsageError("compare needs at least 2 operators")
    for op in operators:
        if op not in OPERATORS:
            raise UsageError(f"unknown operator {op!r}; choose from {OPERATORS}")
    env_names = list(envs) or ([cfg.env] if cfg.env else [])
    if not env_names:
        raise UsageError("env.name required")
    seeds = resolve_seeds(cfg)
    out = Path(str(cfg.run["out"]))
    out.mkdir(parents=True, exist_ok=True)
    table: Dict[str, Dict[str, tuple]] = {}
    for name in env_names:
        env = _require_env(replace(cfg, env=name))
        row = {}
        for op in operators:
            try:
                bcfg = replace(cfg.backup, operator=op,
                               distributional=cfg.backup.distributional and op == "graph")
            except BackupError as exc:
                raise UsageError(str(exc)) from None
            finals = []
            for seed in seeds:
                m = run_training(env.clone(), replace(cfg.learner, seed=seed), bcfg)
                finals.append(m.final_eval_return)
            arr = np.asarray(finals, dtype=np.float64)
            row[op] = (float(arr.mean()), float(arr.std()))
        table[env_label(env)] = row
    header = ["env"] + list(operators)
    cells = [[env] + [f"{table[env][op][0]:.3f}±{table[env][op][1]:.3f}" for op in operators] for env in table]
    csv_lines = [",".join(header)] + [",".join(r) for r in cells]
    (out / "compare.csv").write_text("\n".join(csv_lines) + "\n")
    widths = [max(len(r[i]) for r in [header] + cells) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + cells) + "\n"
    (out / "compare.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--env", dest="env.name", metavar="NAME[:PARAMS]", default=argparse.SUPPRESS)
    p.add_argument("--seeds", dest="run.seeds", metavar="A..B", default=argparse.SUPPRESS)
    p.add_argument("--steps", dest="learner.total_steps", metavar="N", default=argparse.SUPPRESS)
    p.add_argument("--out", dest="run.out", metavar="DIR", default=argparse.SUPPRESS)
    p.add_argument("--emit-plots", dest="run.emit_plots", nargs="?", const="true", default=argparse.SUPPRESS)
    for section in ("learner", "backup"):
        for key, kind in SECTIONS[section].items():
            kw = {"nargs": "?", "const": "true"} if kind == "bool" else {"metavar": kind.upper()}
            p.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphbackup", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="online training, one run per seed")
    _add_config_flags(p)

    p = sub.add_parser("offline-train", help="learn from a fixed dataset")
    _add_config_flags(p)
    p.add_argument("--data", dest="run.data", metavar="LOG", default=argparse.SUPPRESS)
    p.add_argument("--transitions", dest="run.transitions", metavar="N", default=argparse.SUPPRESS)

    p = sub.add_parser("compute-target", help="evaluate one backup target")
    _add_config_flags(p)
    p.add_argument("--data", dest="run.data", metavar="LOG", default=argparse.SUPPRESS)
    p.add_argument("--transitions", dest="run.transitions", metavar="N", default=argparse.SUPPRESS)
    p.add_argument("--state", required=True, help="state key as hex")
    p.add_argument("--action", required=True, type=int)
    p.add_argument("--values", help="value table (.vtbl) to bootstrap from; zeros if omitted")

    p = sub.add_parser("analyze", help="graph statistics as JSON")
    p.add_argument("graph")
    p.add_argument("--out")

    p = sub.add_parser("export-graph", help="radial layout as DOT")
    p.add_argument("graph")
    p.add_argument("--out", required=True)
    p.add_argument("--edge-list", help="also write the text edge list here")

    p = sub.add_parser("compare", help="operators side by side over seeds")
    _add_config_flags(p)
    p.add_argument("--operators", required=True, help="comma-separated operator names")
    p.add_argument("--envs", nargs="+", default=[], help="environments (default: env.name)")
    return parser


def _overrides(ns: argparse.Namespace) -> Dict[str, str]:
    return {k: v for k, v in sorted(vars(ns).items()) if "." in k}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if ns.command == "analyze":
            return cmd_analyze(ns.graph, ns.out)
        if ns.command == "export-graph":
            return cmd_export_graph(ns.graph, ns.out, ns.edge_list)
        cfg = load_config(ns.config, _overrides(ns))
        if ns.print_config:
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        if ns.command == "train":
            return cmd_train(cfg)
        if ns.command == "offline-train":
            return cmd_offline_train(cfg)
        if ns.command == "compute-target":
            return cmd_compute_target(cfg, ns.state, ns.action, ns.values)
        ops = [o.strip() for o in ns.operators.split(",") if o.strip()]
        return cmd_compare(cfg, ops, ns.envs)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphFormatError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
