"""Command-line pipeline: teacher -> distill -> sample -> eval, plus sweeps and plots.

Exit codes: 0 success, 1 numeric failure (NaN / divergence / failed gradcheck),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import nn_core as nn
from .distill import (ConsistencyHead, DistillConfig, MlpNoisePredictor, TeacherConfig,
                      consistency_sample, train_llcm, train_teacher)
from .gradcheck import run_gradcheck
from .metrics import evaluate, frechet_distance
from .nn_core import NULL_TOKEN, MlpConfig
from .samplers import SOLVERS, SamplerConfig, sample
from .schedule import ScheduleSpec
from .toy_worlds import (LatentCodec, OracleTeacher, SampleBatch, encode_world, make_world,
                         sample_world, world_from_dict)

RUN_CONFIG_VERSION = 1
SAMPLE_SOLVERS = SOLVERS + ("consistency",)
PAPER_K = 20


class ConfigError(ValueError):
    """Invalid or missing configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    world: dict = field(default_factory=lambda: {"name": "gmm_grid", "params": {}})
    codec: dict = field(default_factory=lambda: {"kind": "rotation", "seed": 7})
    schedule: dict = field(default_factory=lambda: ScheduleSpec().to_dict())
    nn: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=lambda: TeacherConfig().to_dict())
    distill: dict = field(default_factory=lambda: DistillConfig().to_dict())
    samplers: list = field(default_factory=lambda: [SamplerConfig().to_dict()])
    eval: dict = field(default_factory=lambda: {"n_ref": 10000, "ref_seed": 123,
                                                "n_gen": 10000, "steps": 4})
    out_dir: str = "runs/default"
    seed: int = 0
    format_version: int = RUN_CONFIG_VERSION

    # typed views ---------------------------------------------------------

    def world_obj(self):
        return make_world(self.world["name"], **self.world.get("params", {}))

    def codec_obj(self) -> LatentCodec:
        dim = self.world_obj().dim
        if self.codec["kind"] == "identity":
            return LatentCodec.identity(dim)
        return LatentCodec.random_rotation(dim, int(self.codec["seed"]))

    def schedule_obj(self) -> ScheduleSpec:
        return ScheduleSpec.from_dict(self.schedule)

    def mlp_config(self) -> MlpConfig:
        return MlpConfig.from_dict(self.nn)

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(**self.teacher)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**self.distill)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        """Merge ``d`` over the defaults, validate, and return a fully resolved config."""
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = d.get("format_version", RUN_CONFIG_VERSION)
        if version != RUN_CONFIG_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        base = cls()
        try:
            world = {**base.world, **d.get("world", {})}
            w = make_world(world["name"], **world.get("params", {}))
            codec = {**base.codec, **d.get("codec", {})}
            if codec["kind"] not in ("identity", "rotation"):
                raise ConfigError(f"unknown codec kind {codec['kind']!r}")
            schedule = ScheduleSpec(**{**base.schedule, **d.get("schedule", {})}).to_dict()
            mlp = {"point_dim": w.dim, "cond_dim": w.n_classes, **d.get("nn", {})}
            mlp = MlpConfig.from_dict(mlp).to_dict()
            teacher = TeacherConfig(**{**base.teacher, **d.get("teacher", {})}).to_dict()
            dist = {**base.distill, "N": schedule["N"], **d.get("distill", {})}
            dist = DistillConfig(**dist).to_dict()
            samplers = [SamplerConfig(**s).to_dict() for s in d.get("samplers", base.samplers)]
            ev = {**base.eval, **d.get("eval", {})}
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if mlp["cond_dim"] < w.n_classes:
            raise ConfigError(f"nn.cond_dim {mlp['cond_dim']} < n_classes {w.n_classes}")
        if dist["N"] != schedule["N"]:
            raise ConfigError(f"distill.N {dist['N']} differs from schedule.N {schedule['N']}")
        return cls(world=world, codec=codec, schedule=schedule, nn=mlp, teacher=teacher,
                   distill=dist, samplers=samplers, eval=ev,
                   out_dir=str(d.get("out_dir", base.out_dir)),
                   seed=int(d.get("seed", base.seed)), format_version=RUN_CONFIG_VERSION)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig.from_dict({})
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
        cfg = RunConfig.from_dict(raw)
    env_seed = os.environ.get("LLCM_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"LLCM_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])


def _write_manifest(run_dir: Path, command: str, cfg: RunConfig, files: list[str],
                    extra: dict | None = None, started: float | None = None) -> None:
    """Hashes of the run's artifacts. wall_seconds is the only non-reproducible field."""
    wall = None if started is None else round(time.perf_counter() - started, 3)
    manifest = {"command": command, "llcm_version": __version__, "config_hash": cfg.hash(),
                "seed": cfg.seed, "wall_seconds": wall,
                "files": {name: _sha256(run_dir / name) for name in files},
                **(extra or {})}
    _write_json(run_dir / "manifest.json", manifest)


def _run_dir(cfg: RunConfig, out: str | None) -> Path:
    run_dir = Path(out or cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _ckpt_meta(role: str, cfg: RunConfig, **extra) -> dict:
    w = cfg.world_obj()
    return {"role": role, "n_classes": w.n_classes, "world": cfg.world, "codec": cfg.codec,
            "schedule": cfg.schedule, "run_config_hash": cfg.hash(), **extra}


def _save_ckpt(run_dir: Path, name: str, params, meta: dict) -> list[str]:
    nn.save_checkpoint(run_dir / name, params, meta)
    return [name, name + ".bin"]


def _oracle(cfg: RunConfig) -> OracleTeacher:
    return OracleTeacher(encode_world(cfg.world_obj(), cfg.codec_obj()), cfg.schedule_obj())


def load_model(path: str):
    """Rebuild (model, role, codec, schedule, n_classes, world) from a checkpoint."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    params, meta = nn.load_checkpoint(p)
    schedule = ScheduleSpec.from_dict(meta["schedule"])
    world_cfg = RunConfig.from_dict({"world": meta["world"], "codec": meta["codec"]})
    codec = world_cfg.codec_obj()
    n_classes = int(meta["n_classes"])
    predictor = MlpNoisePredictor(params, n_classes, schedule, meta.get("output", "v"))
    role = meta.get("role", "teacher")
    if role in ("student", "ema"):
        model = ConsistencyHead(predictor, schedule, meta["sigma_data"], meta["timestep_scaling"])
    else:
        model = predictor
    return model, role, codec, schedule, n_classes, world_cfg.world_obj()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_teacher(args) -> int:
    started = time.perf_counter()
    cfg = load_run_config(args.config)
    if args.iterations is not None:
        cfg.teacher["iterations"] = args.iterations
        cfg = RunConfig.from_dict(cfg.to_dict())
    run_dir = _run_dir(cfg, args.out)
    tcfg = cfg.teacher_config()
    model, trace = train_teacher(cfg.world_obj(), cfg.codec_obj(), cfg.schedule_obj(),
                                 cfg.mlp_config(), tcfg, cfg.seed)
    _write_json(run_dir / "config.json", cfg.to_dict())
    files = ["config.json"]
    files += _save_ckpt(run_dir, "teacher.ckpt", model.params,
                        _ckpt_meta("teacher", cfg, output=tcfg.output))
    _write_trace(run_dir / "teacher_loss.csv", trace)
    files.append("teacher_loss.csv")
    _write_manifest(run_dir, "teacher", cfg, files, started=started)
    print(f"teacher: {len(trace)} iterations, final loss {trace[-1] if trace else float('nan'):.5f}"
          f" -> {run_dir / 'teacher.ckpt'}")
    return 0


def _distill_teacher(args, cfg: RunConfig):
    if args.oracle:
        return _oracle(cfg), "oracle"
    model, role, _, schedule, _, _ = load_model(args.teacher)
    if role != "teacher":
        raise ConfigError(f"{args.teacher} holds a {role} checkpoint, not a teacher")
    if schedule != cfg.schedule_obj():
        raise ConfigError("teacher checkpoint schedule differs from the run config schedule")
    return model, "trained"


def _run_distill(cfg: RunConfig, teacher, kind: str, run_dir: Path, command: str) -> tuple:
    started = time.perf_counter()
    cfg.distill["teacher"] = kind
    cfg = RunConfig.from_dict(cfg.to_dict())
    dcfg = cfg.distill_config()
    schedule = cfg.schedule_obj()
    res = train_llcm(teacher, cfg.world_obj(), cfg.codec_obj(), schedule, dcfg, cfg.seed,
                     mlp_config=cfg.mlp_config())
    _write_json(run_dir / "config.json", cfg.to_dict())
    files = ["config.json"]
    meta = dict(output=res.student.predictor.output, sigma_data=dcfg.sigma_data,
                timestep_scaling=dcfg.timestep_scaling, k=dcfg.k)
    files += _save_ckpt(run_dir, "student.ckpt", res.student.params,
                        _ckpt_meta("student", cfg, **meta))
    files += _save_ckpt(run_dir, "ema.ckpt", res.ema.params, _ckpt_meta("ema", cfg, **meta))
    _write_trace(run_dir / "loss_trace.csv", res.loss_trace)
    files.append("loss_trace.csv")
    if res.warmstart_trace:
        _write_trace(run_dir / "warmstart_trace.csv", res.warmstart_trace)
        files.append("warmstart_trace.csv")
    _write_manifest(run_dir, command, cfg, files, {"teacher": kind}, started)
    return cfg, res


def cmd_distill(args) -> int:
    cfg = load_run_config(args.config)
    if args.k is not None:
        cfg.distill["k"] = args.k
    if args.iterations is not None:
        cfg.distill["iterations"] = args.iterations
    cfg = RunConfig.from_dict(cfg.to_dict())
    teacher, kind = _distill_teacher(args, cfg)
    run_dir = _run_dir(cfg, args.out)
    cfg, res = _run_distill(cfg, teacher, kind, run_dir, "distill")
    tr = np.asarray(res.loss_trace)
    w = max(len(tr) // 10, 1)
    ratio = tr[-w:].mean() / tr[:w].mean() if len(tr) else float("nan")
    print(f"distill: k={cfg.distill['k']} teacher={kind} iterations={len(tr)} "
          f"loss ratio (last/first 10%) {ratio:.4f} -> {run_dir}")
    return 0


def parse_steps(text: str) -> list[int]:
    """'4' -> [4]; '1,2,4' -> [1, 2, 4]; '1..20' -> [1, ..., 20]."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            steps = list(range(int(lo), int(hi) + 1))
        else:
            steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --steps value {text!r}") from exc
    if not steps or min(steps) < 1:
        raise ConfigError(f"--steps must list positive integers, got {text!r}")
    return steps


def _parse_class(text: str | None):
    if text is None:
        return None
    if text.lower() in ("null", "none", "uncond"):
        return NULL_TOKEN
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"bad --class value {text!r}") from exc


def _step_path(out: Path, steps: int, many: bool) -> Path:
    if not many:
        return out
    return out.with_name(f"{out.stem}_steps{steps}{out.suffix or '.csv'}")


def cmd_sample(args) -> int:
    steps_list = parse_steps(args.steps)
    c = _parse_class(args.class_)
    if args.oracle:
        cfg = load_run_config(args.config)
        model, role = _oracle(cfg), "oracle"
        codec, schedule = cfg.codec_obj(), cfg.schedule_obj()
        n_classes = cfg.world_obj().n_classes
    else:
        model, role, codec, schedule, n_classes, _ = load_model(args.ckpt)
    if c is not None and c != NULL_TOKEN and not 0 <= c < n_classes:
        raise ConfigError(f"--class {c} out of range for {n_classes} classes")
    consistency = role in ("student", "ema")
    if args.solver == "consistency" and not consistency:
        raise ConfigError("solver 'consistency' needs a distilled student checkpoint")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    many = len(steps_list) > 1
    for steps in steps_list:
        extra = {"steps": steps, "model_role": role, "requested_solver": args.solver,
                 "checkpoint": None if args.oracle else Path(args.ckpt).name}
        if consistency:
            batch = consistency_sample(model, codec, steps, args.omega, c, args.n, args.seed,
                                       schedule, n_classes)
            batch.manifest.update(extra)
        else:
            scfg = SamplerConfig(solver=args.solver, n_steps=steps, omega=args.omega, c=c,
                                 seed=args.seed, h=args.h)
            batch = sample(model, codec, scfg, args.n, schedule, n_classes, extra)
        path = batch.write(_step_path(out, steps, many))
        print(f"sample: {role} {'consistency' if consistency else args.solver} "
              f"steps={steps} n={args.n} -> {path}")
    return 0


def cmd_data(args) -> int:
    cfg = load_run_config(args.config)
    batch = sample_world(cfg.world_obj(), args.n, cfg.seed if args.seed is None else args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    batch.write(out)
    print(f"data: {cfg.world['name']} n={args.n} -> {out}")
    return 0


def _read_batch(path: str) -> SampleBatch:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    batch = SampleBatch.read(p)
    if batch.points.shape[0] == 0:
        raise ConfigError(f"{p}: no samples")
    return batch


def cmd_eval(args) -> int:
    ref, gen = _read_batch(args.ref), _read_batch(args.gen)
    if ref.points.shape[1] != gen.points.shape[1]:
        raise ConfigError(f"dimension mismatch: {args.ref} has {ref.points.shape[1]} dims, "
                          f"{args.gen} has {gen.points.shape[1]}")
    report = evaluate(ref, gen, mmd_points=args.mmd_points)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write(args.out)
    print(f"eval: frechet_distance={report.frechet_distance:.6g} mmd2={report.mmd2:.6g}")
    return 0


def parse_k_list(text: str) -> list[int]:
    try:
        ks = sorted({int(k) for k in text.split(",") if k.strip()})
    except ValueError as exc:
        raise ConfigError(f"bad --k-list {text!r}") from exc
    if not ks:
        raise ConfigError("--k-list is empty")
    return ks


def cmd_sweep_k(args) -> int:
    started = time.perf_counter()
    cfg = load_run_config(args.config)
    if args.iterations is not None:
        cfg.distill["iterations"] = args.iterations
    ks = parse_k_list(args.k_list)
    for k in ks:  # validate every k before spending any compute
        RunConfig.from_dict({**cfg.to_dict(), "distill": {**cfg.distill, "k": k}})
    teacher, kind = _distill_teacher(args, cfg)
    run_dir = _run_dir(cfg, args.out)
    ev = cfg.eval
    ref = sample_world(cfg.world_obj(), ev["n_ref"], ev["ref_seed"])
    steps = int(args.steps or ev["steps"])
    rows, seeds = [], {}
    for k in ks:
        sub = RunConfig.from_dict({**cfg.to_dict(), "distill": {**cfg.distill, "k": k}})
        k_dir = run_dir / f"k{k}"
        k_dir.mkdir(exist_ok=True)
        sub, res = _run_distill(sub, teacher, kind, k_dir, "sweep-k")
        fd = {}
        for s in sorted({1, steps}):
            batch = consistency_sample(res.ema, sub.codec_obj(), s, 0.0, None, ev["n_gen"],
                                       sub.seed, sub.schedule_obj())
            fd[s] = frechet_distance(batch, ref)
        tr = np.asarray(res.loss_trace)
        w = max(len(tr) // 10, 1)
        rows.append({"k": k, f"fd_{steps}step": fd[steps], "fd_1step": fd[1],
                     "final_loss": float(tr[-w:].mean()) if len(tr) else float("nan"),
                     "paper_default": int(k == PAPER_K), "seed": sub.seed})
        seeds[str(k)] = sub.seed
        print(f"sweep-k: k={k} fd_{steps}step={fd[steps]:.5f} fd_1step={fd[1]:.5f}")
    cols = ["k", f"fd_{steps}step", "fd_1step", "final_loss", "paper_default", "seed"]
    with open(run_dir / "k_sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    _write_json(run_dir / "config.json", cfg.to_dict())
    _write_manifest(run_dir, "sweep-k", cfg, ["config.json", "k_sweep.csv"],
                    {"k_list": ks, "seeds": seeds, "teacher": kind, "steps": steps,
                     "paper_k": PAPER_K}, started)
    return 0


def _parse_range(text: str, pts: np.ndarray):
    if text == "auto":
        lo, hi = pts.min(0), pts.max(0)
        pad = 1e-9 * np.maximum(hi - lo, 1.0)
        return [(lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1])]
    try:
        x0, x1, y0, y1 = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--range must be 'auto' or xmin,xmax,ymin,ymax; got {text!r}") from exc
    if not (x1 > x0 and y1 > y0):
        raise ConfigError("--range needs xmin < xmax and ymin < ymax")
    return [(x0, x1), (y0, y1)]


def histogram_pgm(points: np.ndarray, bins: int, rng) -> tuple[np.ndarray, bytes]:
    """2-D histogram and its 8-bit P5 rendering (row 0 = top = largest y)."""
    counts, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins, range=rng)
    img = counts.T[::-1]
    peak = img.max()
    scaled = np.zeros_like(img) if peak == 0 else np.rint(255.0 * img / peak)
    header = f"P5\n{bins} {bins}\n255\n".encode("ascii")
    return counts, header + scaled.astype(np.uint8).tobytes()


def cmd_heatmap(args) -> int:
    p = Path(args.input)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    try:
        batch = SampleBatch.read(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if batch.points.shape[0] == 0:
        raise ConfigError(f"{p}: no samples to plot")
    if batch.points.shape[1] != 2:
        raise ConfigError(f"heatmap needs 2-D points, got {batch.points.shape[1]} dims")
    if args.bins < 1:
        raise ConfigError("--bins must be >= 1")
    _, data = histogram_pgm(batch.points, args.bins, _parse_range(args.range, batch.points))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"heatmap: {args.bins}x{args.bins} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed)
    for line in report.lines():
        print(line)
    print("gradcheck: " + ("PASS" if report.passed else "FAIL"))
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llcm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"llcm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("teacher", help="train the conditional noise-prediction teacher")
    p.add_argument("--config", help="run config JSON (defaults if omitted)")
    p.add_argument("--out", help="run directory (default: config out_dir)")
    p.add_argument("--iterations", type=int, help="override teacher.iterations")
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("distill", help="consistency distillation with a jumping step k")
    p.add_argument("--config")
    p.add_argument("--out")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--teacher", help="teacher checkpoint from `llcm teacher`")
    src.add_argument("--oracle", action="store_true", help="use the analytic-score teacher")
    p.add_argument("--k", type=int, help="jumping interval (1 <= k <= N - 1)")
    p.add_argument("--iterations", type=int, help="override distill.iterations")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", help="draw samples from a checkpoint or the oracle")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="teacher, student or ema checkpoint")
    src.add_argument("--oracle", action="store_true")
    p.add_argument("--config", help="run config (for --oracle)")
    p.add_argument("--solver", default="ddim", choices=SAMPLE_SOLVERS,
                   help="student checkpoints always use the consistency path")
    p.add_argument("--steps", default="4", help="N, a list 1,2,4 or a range 1..20")
    p.add_argument("--omega", type=float, default=0.0)
    p.add_argument("--class", dest="class_", help="class index or 'null' (default: uniform)")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=0.5, help="leapfrog step fraction")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("data", help="draw reference samples from the configured world")
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("eval", help="Fréchet distance and MMD between two sample CSVs")
    p.add_argument("--ref", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out")
    p.add_argument("--mmd-points", type=int, default=4000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="distill and evaluate for several jumping intervals")
    p.add_argument("--config")
    p.add_argument("--out")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--teacher")
    src.add_argument("--oracle", action="store_true", default=True)
    p.add_argument("--k-list", default="1,5,10,20,50")
    p.add_argument("--iterations", type=int)
    p.add_argument("--steps", type=int, help="inference steps for the FD column (default eval.steps)")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("heatmap", help="2-D histogram of a sample CSV as a binary PGM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=128)
    p.add_argument("--range", default="auto", help="'auto' or xmin,xmax,ymin,ymax")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "teacher", None):
        args.oracle = False
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"llcm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"llcm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
