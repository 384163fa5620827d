"""Command-line driver: ``smsaf generate | train | eval | bench``.

Configuration comes from an optional ``--config`` key=value file, then
``key=value`` words on the command line, then flags. Every command writes its
resolved configuration to ``<out>/config.txt``.

Exit codes: 0 success, 2 invalid configuration, 3 divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .baselines import BASELINES, MODEL_SIZES, allowed, make_baseline
from .checkpoint import CheckpointError
from .cost import count_flops, cpu_identifier, measure_rtf
from .evaluation import evaluate, headline, make_task, process, scene_inputs
from .loop import NullOptimizer, StepMode
from .neural import param_count, SIZES
from .scenes import (AecSceneConfig, GscSceneConfig, gen_aec_scene, gen_gsc_scene, load_scene, read_meta,
                     save_scene)
from .signal import FrameConfig, write_wav
from .training import LossKind, SceneSource, TrainConfig, TrainingDiverged, load_trained, train_loop

log = logging.getLogger("smsaf")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SPLIT_BASE = {"train": 0, "val": 100_000, "test": 200_000}


class ConfigError(ValueError):
    pass


# --- configuration --------------------------------------------------------

def parse_kv(lines) -> dict:
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, tuple):
        parts = [float(p) for p in value.strip("()[] ").split(",") if p.strip()]
        return (parts[0], parts[-1])
    if value.lower() == "none":
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def build(cls, settings: dict, prefix: str = ""):
    """Instantiate dataclass ``cls`` from string settings ``prefix+field``."""
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in settings:
            try:
                kwargs[f.name] = _coerce(settings[key], f.default)
            except (ValueError, IndexError) as err:
                raise ConfigError(f"{key}: {err}") from err
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
SCENE_PREFIX = "scene."
KNOWN_KEYS = {"val_scenes", "rtf", "rtf_runs", "wav", "batch_eval", "matrix_sizes", "matrix_modes", "matrix_losses"}


@dataclass
class RunConfig:
    command: str
    task: str = "aec"
    size: str = "S"
    mode: str = "P"
    loss: str = "S"
    seed: int = 0
    scenes: str = "200"
    ckpt: str | None = None
    out: str = "runs/out"
    threads: int = 1
    settings: dict | None = None

    def validate(self):
        if self.task not in ("aec", "gsc"):
            raise ConfigError(f"task must be aec or gsc, got {self.task!r}")
        if self.command in ("train", "eval") and self.size not in allowed(self.task):
            raise ConfigError(f"{self.size!r} is not valid for {self.task}; choose from {allowed(self.task)}")
        if self.command == "train" and self.size not in MODEL_SIZES:
            raise ConfigError("only learned models (S, M, L) can be trained")
        try:
            StepMode.parse(self.mode)
            LossKind.resolve(self.loss, self.task)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        unknown = set(self.settings or {}) - TRAIN_KEYS - KNOWN_KEYS
        unknown = {k for k in unknown if not k.startswith(SCENE_PREFIX)}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return self

    @property
    def label(self) -> str:
        """Identifier in the ``S·S·PU`` style: size, supervision, mode."""
        if self.size in BASELINES:
            return f"{self.size.upper()}·{self.mode}"
        return f"{self.size}·{LossKind.resolve(self.loss, self.task).tag}·{self.mode}"

    def write(self, directory: Path):
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"{k} = {v}" for k, v in asdict(self).items() if k != "settings"]
        lines += [f"{k} = {v}" for k, v in sorted((self.settings or {}).items())]
        (directory / "config.txt").write_text("\n".join(lines) + "\n")


def scene_config(task: str, settings: dict):
    sub = {k[len(SCENE_PREFIX):]: v for k, v in settings.items() if k.startswith(SCENE_PREFIX)}
    return build(AecSceneConfig if task == "aec" else GscSceneConfig, sub)


def scene_source(task: str, spec: str, settings: dict, split: str, seed: int) -> SceneSource:
    """A count means synthetic scenes generated on demand; anything else is a directory of scene dirs."""
    if str(spec).isdigit():
        cfg = scene_config(task, settings)
        gen = gen_aec_scene if task == "aec" else gen_gsc_scene
        base = SPLIT_BASE[split] + 1_000_000 * seed
        return SceneSource(lambda s: gen(s, cfg), range(base, base + int(spec)))
    root = Path(spec)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"no scenes (meta.txt) under {root}")
    scenes = [load_scene(d) for d in dirs]
    if any(s.kind != task for s in scenes):
        raise ConfigError(f"{root} holds scenes of another task")
    return SceneSource(scenes=scenes)


# --- commands -------------------------------------------------------------

def cmd_generate(rc: RunConfig) -> Path:
    out = Path(rc.out)
    cfg = scene_config(rc.task, rc.settings)
    gen = gen_aec_scene if rc.task == "aec" else gen_gsc_scene
    n = int(rc.scenes)
    for i in range(n):
        seed = rc.seed * 1_000_000 + i
        save_scene(gen(seed, cfg).check(atol=1e-9), out / f"scene_{i:05d}", cfg)
    rc.write(out)
    log.info("wrote %d %s scenes to %s", n, rc.task, out)
    return out


def cmd_train(rc: RunConfig) -> Path:
    out = Path(rc.out)
    s = rc.settings
    train_cfg = build(TrainConfig, {**{k: v for k, v in s.items() if k in TRAIN_KEYS}, "seed": str(rc.seed),
                                    "threads": str(rc.threads)})
    train = scene_source(rc.task, rc.scenes, s, "train", rc.seed)
    val = scene_source(rc.task, s.get("val_scenes", "32"), s, "val", rc.seed)
    rc.write(out)
    ckpt = Path(rc.ckpt) if rc.ckpt else out / "model.smaf"
    result = train_loop(rc.task, train, val, rc.size, StepMode.parse(rc.mode), LossKind.resolve(rc.loss, rc.task),
                        train_cfg, ckpt_path=ckpt, log_path=out / "train_log.csv",
                        resume=bool(rc.ckpt) and Path(str(rc.ckpt) + ".resume.pt").exists())
    log.info("best validation %s %.3f after %d epochs (%s)", headline(rc.task), result.best_metric,
             result.epochs, result.stopped)
    return ckpt


def _optimizer(rc: RunConfig, task):
    if rc.size in BASELINES:
        return make_baseline(rc.task, rc.size), None
    if rc.size == "null":
        return NullOptimizer(), None
    if not rc.ckpt:
        raise ConfigError(f"model {rc.size} needs --ckpt")
    opt, meta = load_trained(rc.ckpt, rc.task, rc.size, task)
    return opt, meta


def run_report(rc: RunConfig, scenes: list, *, rtf: bool = True) -> dict:
    task = make_task(rc.task, scenes[0])
    opt, meta = _optimizer(rc, task)
    mode = StepMode.parse(rc.mode)
    result = evaluate(rc.task, opt, mode, scenes)
    if rc.size in SIZES:
        n_params = param_count(SIZES[rc.size], task.n_features, task.n_weights)
    else:
        n_params = 0
    row = {"task": rc.task, "model": rc.label, "size": rc.size, "mode": mode.name,
           "loss": LossKind.resolve(rc.loss, rc.task).tag if rc.size in SIZES else "",
           "n_scenes": len(scenes), **result.summary(),
           "mflops": count_flops(rc.task, rc.size, mode, mics=task.n_weights).mflops,
           "params": n_params, "rtf": "", "cpu": cpu_identifier()}
    if rtf:
        runs = int((rc.settings or {}).get("rtf_runs", 5))
        row["rtf"] = measure_rtf(task, opt, mode, scene_inputs(scenes[0]), runs=runs)
    return row


def cmd_eval(rc: RunConfig) -> dict:
    out = Path(rc.out)
    s = rc.settings
    scenes = scene_source(rc.task, rc.scenes, s, "test", rc.seed).all()
    row = run_report(rc, scenes, rtf=_flag(s.get("rtf", "true")))
    rc.write(out)
    _write_csv(out / "report.csv", [row])
    (out / "report.json").write_text(json.dumps(row, indent=2, default=float))
    if _flag(s.get("wav", "false")):
        task = make_task(rc.task, scenes[0])
        opt, _ = _optimizer(rc, task)
        outs = process(rc.task, opt, StepMode.parse(rc.mode), scenes)
        for i, e in enumerate(outs):
            write_wav(out / "wav" / f"scene_{i:05d}.wav", e[FrameConfig().latency:])
    log.info("%s", json.dumps(row, default=float))
    return row


BENCH_FIELDS = ("task", "size", "mode", "loss", "status", "metric", "value", "mflops", "rtf", "params", "monotonic")


def ckpt_name(task: str, size: str, loss: str, mode: str) -> str:
    return f"{task}_{size}_{loss}_{mode}.smaf"


def cmd_bench(rc: RunConfig) -> list[dict]:
    """Size x mode x supervision matrix from checkpoints named by :func:`ckpt_name` under ``--ckpt``."""
    out = Path(rc.out)
    s = rc.settings
    sizes = s.get("matrix_sizes", "S,M,L").split(",")
    modes = s.get("matrix_modes", rc.mode).split(",")
    losses = s.get("matrix_losses", "S,U").split(",")
    scenes = scene_source(rc.task, rc.scenes, s, "test", rc.seed).all()
    ckpt_dir = Path(rc.ckpt or ".")
    metric = headline(rc.task)
    rows = []
    for loss in losses:
        tag = LossKind.resolve(loss, rc.task).tag
        for mode in modes:
            for size in sizes:
                path = ckpt_dir / ckpt_name(rc.task, size, tag, mode)
                row = {"task": rc.task, "size": size, "mode": mode, "loss": tag, "metric": metric,
                       "value": "", "mflops": count_flops(rc.task, size, mode).mflops, "rtf": "",
                       "params": "", "monotonic": ""}
                if not path.exists():
                    row["status"] = "missing"
                    log.warning("bench: missing cell %s", path.name)
                else:
                    cell = RunConfig("eval", rc.task, size, mode, loss, rc.seed, rc.scenes, str(path), rc.out,
                                     rc.threads, s)
                    rep = run_report(cell, scenes, rtf=_flag(s.get("rtf", "true")))
                    row.update(status="ok", value=rep[metric], rtf=rep["rtf"], params=rep["params"])
                rows.append(row)
    flag_monotonicity(rows)
    rc.write(out)
    _write_csv(out / "bench.csv", rows, BENCH_FIELDS)
    return rows


def flag_monotonicity(rows: list[dict]):
    """Mark cells where a larger model scores below a smaller one at the same mode and supervision."""
    order = {k: i for i, k in enumerate(MODEL_SIZES)}
    groups: dict = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["mode"], r["loss"]), []).append(r)
    for cells in groups.values():
        cells.sort(key=lambda r: order.get(r["size"], 99))
        for r in cells:
            r["monotonic"] = "yes"
        for prev, cur in zip(cells, cells[1:]):
            if float(cur["value"]) < float(prev["value"]):
                cur["monotonic"] = f"below_{prev['size']}"


def read_bench_csv(path) -> list[dict]:
    """Parse and schema-check a bench CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BENCH_FIELDS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            if r["status"] not in ("ok", "missing"):
                raise ValueError(f"bad status {r['status']!r}")
            for key in ("value", "mflops", "rtf"):
                r[key] = float(r[key]) if r[key] != "" else None
            r["params"] = int(r["params"]) if r["params"] != "" else None
            rows.append(r)
    return rows


def _flag(v) -> bool:
    return str(v).lower() in ("1", "true", "yes", "on")


def _write_csv(path: Path, rows: list[dict], fieldnames=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames or list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smsaf", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=("generate", "train", "eval", "bench"))
    p.add_argument("overrides", nargs="*", help="key=value configuration overrides")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--task", choices=("aec", "gsc"))
    p.add_argument("--size", help="S, M, L or a baseline: nlms, kf (AEC), rls (GSC)")
    p.add_argument("--mode", help="P, PU, PUx<C> or Px<C>")
    p.add_argument("--loss", help="S (supervised) or U (unsupervised)")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", help="scene directory, or a count of synthetic scenes")
    p.add_argument("--ckpt", help="checkpoint file (train: resume target; bench: checkpoint directory)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(argv) -> RunConfig:
    args = build_parser().parse_intermixed_args(argv)
    settings = {}
    if args.config:
        settings.update(parse_kv(Path(args.config).read_text().splitlines()))
    settings.update(parse_kv(args.overrides))
    base = {f.name for f in fields(RunConfig)} - {"command", "settings"}
    values = {k: settings.pop(k) for k in list(settings) if k in base}
    for k in base:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    for k in ("seed", "threads"):
        if k in values:
            try:
                values[k] = int(values[k])
            except ValueError as err:
                raise ConfigError(f"{k} must be an integer") from err
    return RunConfig(args.command, settings=settings, **values).validate()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(argv)
        torch.set_num_threads(rc.threads)
        {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}[rc.command](rc)
    except SystemExit as err:
        return EXIT_CONFIG if err.code else EXIT_OK
    except (ConfigError, CheckpointError) as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"I/O failure: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
