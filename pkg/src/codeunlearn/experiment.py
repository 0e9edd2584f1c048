"""Disk-backed pipeline stages: data, pretraining, memorisation, unlearning, evaluation.

Every stage validates its inputs against the run manifest (line-JSON, one row
per stage run, sha256 per artifact) and appends a row for what it wrote.
The command line in :mod:`codeunlearn.cli` is a thin wrapper over these.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import (INSECURE_PATTERNS, TaskDataset, api_eval_records, generate, read_dataset, utility_records,
                   write_dataset)
from .lm import LmConfig, LmModel, load_checkpoint, save_checkpoint
from .metrics import (ATTACK_FRACTIONS, UTILITY_FLOOR, EvalPoint, MetricError, forget_quality_api,
                      forget_quality_copyright, forget_quality_insecure, model_utility, pdr, prefix_attack)
from .surgery import CachedTargets, SurgeryConfig, SurgeryConfigError
from .trainers import (METHODS, ConfigError, MemorizationError, TrainConfig, append_manifest, memorize, pretrain,
                       recall_rate, select_by_forget_quality, to_examples, unlearn)

log = logging.getLogger(__name__)

CONFIG_ENV = "CODEUNLEARN_CONFIG"
TASKS = ("copyright", "insecure", "api")
# one decade above the published grid: the desk model needs larger steps
DESK_LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
REPORT_COLUMNS = ("task", "method", "seed", "epoch", "forget_quality", "model_utility",
                  "attack_bleu_mean", "attack_bleu_min", "attack_bleu_max")
PDR_COLUMNS = ("task", "method", "pdr")
ABLATION_COLUMNS = ("task", "seed", "loss", "top_p", "alpha", "status", "pdr",
                    "forget_quality", "model_utility", "detail")
EXCLUSION_COLUMNS = ("task", "method", "seed", "epoch", "reason")


class ValidationError(ValueError):
    """Bad configuration, bad input files, or an artifact whose hash no longer matches."""


class PipelineError(RuntimeError):
    """A stage was run before the stages it depends on."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataSpec:
    seed: int = 0
    n: int = 16
    n_eval: int = 200
    n_pretrain: int = 960
    retain_factor: int = 9
    n_packages: int = 12


@dataclass
class PretrainSpec:
    steps: int = 1500
    lr: float = 3e-3
    batch_windows: int = 512
    seed: int = 0


@dataclass
class MemorizeSpec:
    epochs: int = 20
    max_epochs: int = 60
    lr: float = 1e-2
    batch_size: int = 32
    target: float = 1.0
    min_recall: float = 0.9
    seed: int = 0


@dataclass
class AttackSpec:
    fractions: tuple[float, ...] = ATTACK_FRACTIONS
    floor: float = UTILITY_FLOOR

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.fractions or any(not 0.0 < f < 1.0 for f in self.fractions):
            raise ValidationError("attack fractions must be non-empty and lie in (0, 1)")
        if not 0.0 < self.floor <= 1.0:
            raise ValidationError("attack floor must lie in (0, 1]")


@dataclass
class AblationSpec:
    losses: tuple[str, ...] = ("ce", "kl", "js")
    top_ps: tuple[float, ...] = (0.2, 0.8, 1.0)
    alphas: tuple[float, ...] = (-0.5, 0.0, 0.5)


def _default_train() -> TrainConfig:
    return TrainConfig(method="prod", lr=1e-3, batch_size=4, epochs=10, lr_grid=DESK_LR_GRID)


@dataclass
class ExperimentConfig:
    task: str = "copyright"
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"
    manifest: str = "runs/manifest.jsonl"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = METHODS
    grid_search: bool = True
    select_threshold: float = 0.9
    pdr_mode: str = "points"
    data: DataSpec = field(default_factory=DataSpec)
    lm: LmConfig = field(default_factory=lambda: LmConfig(hidden_dim=512))
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    memorize: MemorizeSpec = field(default_factory=MemorizeSpec)
    train: TrainConfig = field(default_factory=_default_train)
    attack: AttackSpec = field(default_factory=AttackSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; choose from {TASKS}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError(f"seeds must be distinct, got {list(self.seeds)}")
        self.methods = tuple(self.methods)
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValidationError(f"unknown methods {bad}; choose from {METHODS}")
        if self.pdr_mode not in ("points", "best"):
            raise ValidationError("pdr_mode must be 'points' or 'best'")
        for name in ("data_dir", "checkpoint_dir", "report_dir"):
            p = Path(getattr(self, name))
            if p.exists() and not p.is_dir():
                raise ValidationError(f"{name}={p} exists and is not a directory")
            if not _creatable(p):
                raise ValidationError(f"{name}={p} cannot be created")
        m = Path(self.manifest)
        if m.exists() and m.is_dir():
            raise ValidationError(f"manifest={m} is a directory")
        if not _creatable(m.parent):
            raise ValidationError(f"manifest directory {m.parent} cannot be created")
        return self

    def with_root(self, root: str | os.PathLike) -> "ExperimentConfig":
        r = Path(root)
        return replace(self, data_dir=str(r / "data"), checkpoint_dir=str(r / "checkpoints"),
                       report_dir=str(r / "reports"), manifest=str(r / "manifest.jsonl"))

    def to_json(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        try:
            return _build(cls, d).validate()
        except (TypeError, ConfigError, SurgeryConfigError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ValidationError(f"invalid configuration: {e}") from e


def _creatable(p: Path) -> bool:
    p = p.absolute()
    while not p.exists():
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ValidationError(f"{cls.__name__} section must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            if isinstance(current, TrainConfig):
                base = asdict(current)
                base.update(value)
                if "surgery" in value:
                    base["surgery"] = SurgeryConfig(**value["surgery"])
                else:
                    base["surgery"] = current.surgery
                base["lr_grid"] = tuple(base["lr_grid"])
                kwargs[name] = TrainConfig(**base)
            else:
                base = asdict(current)
                base.update(value)
                kwargs[name] = _build(type(current), base)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | os.PathLike | None = None) -> ExperimentConfig:
    """Read a JSON config; falls back to $CODEUNLEARN_CONFIG, then to defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return ExperimentConfig().validate()
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file {p} not found") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {p} is not valid JSON: {e}") from None
    return ExperimentConfig.from_json(raw)


# ---------------------------------------------------------------------------
# manifest


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Append-only run log; artifact paths are stored relative to the manifest file."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.root = self.path.parent.absolute()

    def rel(self, p: str | os.PathLike) -> str:
        return os.path.relpath(Path(p).absolute(), self.root)

    def abs(self, rel: str) -> Path:
        return self.root / rel

    def rows(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for i, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                raise ValidationError(f"{self.path}:{i}: corrupt manifest row") from None
        return out

    def append(self, stage: str, outputs: Iterable[str | os.PathLike] = (), **extra) -> dict:
        row = {"stage": stage, "time": time.time(),
               "outputs": {self.rel(p): file_sha256(p) for p in outputs}, **extra}
        append_manifest(self.path, row)
        return row

    def latest(self, stage: str, **match) -> dict | None:
        for row in reversed(self.rows()):
            if row.get("stage") == stage and all(row.get(k) == v for k, v in match.items()):
                return row
        return None

    def require(self, stage: str, hint: str = "", **match) -> dict:
        row = self.latest(stage, **match)
        if row is None:
            what = ", ".join(f"{k}={v}" for k, v in match.items())
            raise PipelineError(f"stage '{stage}' has not run ({what}){': ' + hint if hint else ''}")
        return row

    def verify(self, path: str | os.PathLike) -> str:
        """Check ``path`` against the newest row that wrote it; returns its hash."""
        rel = self.rel(path)
        for row in reversed(self.rows()):
            if rel in row.get("outputs", {}):
                expected = row["outputs"][rel]
                if not Path(path).exists():
                    raise ValidationError(f"{path} is listed in the manifest but missing")
                actual = file_sha256(path)
                if actual != expected:
                    raise ValidationError(f"{path}: hash {actual[:12]} does not match manifest {expected[:12]}")
                return actual
        raise ValidationError(f"{path} is not recorded in manifest {self.path}")

    def tracked(self) -> set[Path]:
        return {self.abs(rel).resolve() for row in self.rows() for rel in row.get("outputs", {})}


def orphans(cfg: ExperimentConfig) -> list[Path]:
    """Files under the run directories that no manifest row accounts for."""
    tracked = Manifest(cfg.manifest).tracked()
    out = []
    for d in (cfg.data_dir, cfg.checkpoint_dir, cfg.report_dir):
        root = Path(d)
        if not root.exists():
            continue
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.resolve() not in tracked:
                out.append(p)
    return out


# ---------------------------------------------------------------------------
# helpers


def _task_paths(cfg: ExperimentConfig):
    data = Path(cfg.data_dir) / cfg.task
    ckpt = Path(cfg.checkpoint_dir) / cfg.task
    rep = Path(cfg.report_dir) / cfg.task
    return data, ckpt, rep


def _dataset(cfg: ExperimentConfig, man: Manifest) -> tuple[TaskDataset, str]:
    row = man.require("gen-data", "run gen-data first", task=cfg.task)
    data = man.abs(row["data_dir"])
    for name in ("records.jsonl", "meta.json"):
        man.verify(data / name)
    ds = read_dataset(data)
    return ds, row["content_hash"]


def _load_verified(man: Manifest, path: Path) -> LmModel:
    man.verify(path)
    model, _ = load_checkpoint(path)
    return model


class Scorer:
    """Forget quality and utility for one task dataset."""

    def __init__(self, ds: TaskDataset):
        self.ds = ds
        self.utility_set = utility_records(ds)
        self.forget_ids = [r.id for r in ds.forget]
        if ds.task == "api":
            self.valid = api_eval_records(ds)

    def forget_quality(self, model: LmModel) -> float:
        if self.ds.task == "copyright":
            return forget_quality_copyright(model, self.ds.forget)
        if self.ds.task == "insecure":
            return forget_quality_insecure(model, self.ds.forget,
                                           self.ds.metadata.get("patterns", INSECURE_PATTERNS))
        return forget_quality_api(model, self.valid)

    def utility(self, model: LmModel) -> float:
        return model_utility(model, self.utility_set, self.forget_ids)

    def point(self, model: LmModel) -> dict:
        return {"forget_quality": self.forget_quality(model), "model_utility": self.utility(model)}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    os.replace(tmp, path)
    return path


def read_csv(path: Path, columns: Sequence[str] | None = None) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if columns is not None and tuple(header) != tuple(columns):
            missing = [c for c in columns if c not in header]
            extra = [c for c in header if c not in columns]
            raise ValidationError(f"{path}: schema mismatch; missing columns {missing}, unexpected {extra}")
        return list(reader)


def _num(s: str) -> float:
    return float(s) if s != "" else float("nan")


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(cfg: ExperimentConfig, force: bool = False,
                   out: str | os.PathLike | None = None) -> tuple[Path, str]:
    data = Path(out) if out is not None else _task_paths(cfg)[0]
    if data.exists() and any(data.iterdir()):
        if not force:
            raise ValidationError(f"{data} is not empty; pass --force to overwrite")
        shutil.rmtree(data)
    d = cfg.data
    if cfg.task == "api":
        ds = generate("api", d.seed, n_packages=d.n_packages, n_eval=d.n_eval, n_pretrain=d.n_pretrain)
    else:
        ds = generate(cfg.task, d.seed, n=d.n, n_eval=d.n_eval, retain_factor=d.retain_factor,
                      n_pretrain=d.n_pretrain)
    write_dataset(ds, data)
    man = Manifest(cfg.manifest)
    man.append("gen-data", [data / "records.jsonl", data / "meta.json"], task=cfg.task, data_dir=man.rel(data),
               content_hash=ds.metadata["content_hash"], config=asdict(d))
    return data, ds.metadata["content_hash"]


def stage_pretrain(cfg: ExperimentConfig) -> dict:
    man = Manifest(cfg.manifest)
    ds, dhash = _dataset(cfg, man)
    corpus = ds.pretrain or ds.retain
    if not corpus:
        raise ValidationError("dataset has no pretraining corpus")
    p = cfg.pretrain
    model = LmModel(cfg.lm)
    pretrain(model, corpus, steps=p.steps, lr=p.lr, batch_windows=p.batch_windows, seed=p.seed)
    scorer = Scorer(ds)
    util = scorer.utility(model)
    path = _task_paths(cfg)[1] / "base" / "pretrained.ckpt"
    save_checkpoint(model, path, {"stage": "pretrain", "task": cfg.task})
    row = man.append("pretrain", [path], task=cfg.task, dataset=dhash, model_hash=model.fingerprint(),
                     model_utility=util, config={"lm": asdict(cfg.lm), "pretrain": asdict(p)})
    log.info("pretrained %s: utility %.3f", cfg.task, util)
    return row


def stage_memorize(cfg: ExperimentConfig) -> dict | None:
    man = Manifest(cfg.manifest)
    if cfg.task == "api":
        log.info("api task skips memorisation; unlearning starts from the pretrained model")
        return None
    ds, dhash = _dataset(cfg, man)
    man.require("pretrain", "run pretrain first", task=cfg.task, dataset=dhash)
    base = _task_paths(cfg)[1] / "base"
    model = _load_verified(man, base / "pretrained.ckpt")
    m = cfg.memorize
    examples = to_examples(ds.forget)
    rep = memorize(model, examples, ds.retain, epochs=m.epochs, max_epochs=m.max_epochs, lr=m.lr,
                   batch_size=m.batch_size, seed=m.seed, target=m.target, strict=False)
    if rep.recall < m.min_recall:
        raise MemorizationError(f"recall {rep.recall:.3f} below {m.min_recall} after {rep.epochs_run} epochs")
    scorer = Scorer(ds)
    point = scorer.point(model)
    path = base / "memorized.ckpt"
    save_checkpoint(model, path, {"stage": "memorize", "task": cfg.task})
    return man.append("memorize", [path], task=cfg.task, dataset=dhash, model_hash=model.fingerprint(),
                      recall=rep.recall, epochs_run=rep.epochs_run, config=asdict(m), **point)


def _start_model(cfg: ExperimentConfig, man: Manifest, dhash: str) -> tuple[LmModel, dict]:
    base = _task_paths(cfg)[1] / "base"
    if cfg.task == "api":
        row = man.require("pretrain", "run pretrain first", task=cfg.task, dataset=dhash)
        return _load_verified(man, base / "pretrained.ckpt"), row
    row = man.require("memorize", f"{cfg.task} unlearning starts from the memorised model; run memorize first",
                      task=cfg.task, dataset=dhash)
    return _load_verified(man, base / "memorized.ckpt"), row


def _train_config(cfg: ExperimentConfig, method: str, epochs: int | None = None, **kw) -> TrainConfig:
    base = cfg.train
    return replace(base, method=method, epochs=base.epochs if epochs is None else epochs, **kw)


def grid_search(start: LmModel, examples, tc: TrainConfig, scorer: Scorer, threshold: float = 0.9,
                cache: CachedTargets | None = None) -> tuple[float, dict[float, list[dict]]]:
    """Run every grid learning rate on one seed and pick by earliest forget-quality hit."""
    curves: dict[float, list[dict]] = {}
    for lr in tc.lr_grid:
        model = start.clone()
        res = unlearn(model, examples, replace(tc, lr=lr), cache=cache, start_hash=start.fingerprint(),
                      on_epoch=lambda e, m: scorer.point(m))
        curves[lr] = [{"epoch": r.epoch, **r.metrics} for r in res.epochs]
    return select_by_forget_quality(curves, threshold), curves


def stage_unlearn(cfg: ExperimentConfig, method: str, epochs: int | None = None, lr: float | None = None) -> list[dict]:
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    man = Manifest(cfg.manifest)
    ds, dhash = _dataset(cfg, man)
    start, start_row = _start_model(cfg, man, dhash)
    start_hash = start.fingerprint()
    if start_hash != start_row["model_hash"]:
        raise ValidationError("start checkpoint fingerprint differs from its manifest row")
    examples = to_examples(ds.forget)
    tc = _train_config(cfg, method, epochs)
    ckpt_root = _task_paths(cfg)[1]
    cache = cache_path = None
    if method == "prod":
        cache = CachedTargets.build(start, examples, tc.surgery)
        cache_path = ckpt_root / "prod" / "targets.jsonl"
        cache.save(cache_path)
        man.append("targets", [cache_path], task=cfg.task, model_hash=start_hash,
                   surgery=asdict(tc.surgery))

    if lr is not None:
        tc = replace(tc, lr=lr, allow_lr_override=True)
    elif cfg.grid_search and tc.epochs > 0 and len(tc.lr_grid) > 1:
        scorer = Scorer(ds)
        chosen, curves = grid_search(start, examples, replace(tc, seed=cfg.seeds[0]), scorer,
                                     cfg.select_threshold, cache)
        man.append("grid-search", task=cfg.task, method=method, seed=cfg.seeds[0], selected_lr=chosen,
                   curves={repr(k): v for k, v in curves.items()})
        tc = replace(tc, lr=chosen)
    rows = []
    for seed in cfg.seeds:
        model = start.clone()
        stc = replace(tc, seed=seed)
        res = unlearn(model, examples, stc, cache=cache, start_hash=start_hash,
                      on_epoch=lambda e, m: {}, checkpoint_dir=ckpt_root)
        ckpts = [r.checkpoint for r in res.epochs]
        rows.append(man.append(
            "unlearn", ckpts, task=cfg.task, method=method, seed=seed, dataset=dhash, start_hash=start_hash,
            ref_hash=res.ref_hash, lr=stc.lr, config=stc.to_json(),
            checkpoints=[man.rel(c) for c in ckpts],
            losses=[r.mean_loss if math.isfinite(r.mean_loss) else None for r in res.epochs],
            targets=man.rel(cache_path) if cache_path else None,
        ))
    return rows


def _unlearn_rows(cfg: ExperimentConfig, man: Manifest, dhash: str) -> list[dict]:
    rows = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            rows.append(man.require("unlearn", f"run unlearn --method {method}", task=cfg.task,
                                    method=method, seed=seed, dataset=dhash))
    return rows


def stage_eval(cfg: ExperimentConfig) -> Path:
    man = Manifest(cfg.manifest)
    ds, dhash = _dataset(cfg, man)
    scorer = Scorer(ds)
    out = []
    for row in _unlearn_rows(cfg, man, dhash):
        for epoch, rel in enumerate(row["checkpoints"]):
            model = _load_verified(man, man.abs(rel))
            out.append({"task": cfg.task, "method": row["method"], "seed": row["seed"], "epoch": epoch,
                        **scorer.point(model), "attack_bleu_mean": float("nan"),
                        "attack_bleu_min": float("nan"), "attack_bleu_max": float("nan")})
    path = _task_paths(cfg)[2] / "checkpoints.csv"
    write_csv(path, REPORT_COLUMNS, out)
    man.append("eval", [path], task=cfg.task, dataset=dhash, rows=len(out))
    return path


def stage_attack(cfg: ExperimentConfig) -> Path:
    man = Manifest(cfg.manifest)
    ds, dhash = _dataset(cfg, man)
    man.require("eval", "run eval first", task=cfg.task, dataset=dhash)
    path = _task_paths(cfg)[2] / "checkpoints.csv"
    man.verify(path)
    rows = read_csv(path, REPORT_COLUMNS)
    runs = {(r["method"], int(r["seed"])): r for r in _unlearn_rows(cfg, man, dhash)}
    original = {(r["method"], r["seed"]): float(r["model_utility"]) for r in rows if r["epoch"] == "0"}
    excluded = []
    for r in rows:
        key = (r["method"], int(r["seed"]))
        run = runs.get(key)
        if run is None:
            raise ValidationError(f"{path}: no unlearning run for method={key[0]} seed={key[1]}")
        model = _load_verified(man, man.abs(run["checkpoints"][int(r["epoch"])]))
        res = prefix_attack(model, ds.forget, float(r["model_utility"]), original[(r["method"], r["seed"])],
                            cfg.attack.fractions, cfg.attack.floor)
        if res.excluded:
            excluded.append({"task": cfg.task, "method": r["method"], "seed": r["seed"], "epoch": r["epoch"],
                             "reason": res.reason})
            continue
        r["attack_bleu_mean"], r["attack_bleu_min"], r["attack_bleu_max"] = res.mean, res.min, res.max
    write_csv(path, REPORT_COLUMNS, rows)
    ex_path = _task_paths(cfg)[2] / "attack_excluded.csv"
    write_csv(ex_path, EXCLUSION_COLUMNS, excluded)
    man.append("attack", [path, ex_path], task=cfg.task, dataset=dhash, excluded=len(excluded),
               spec=asdict(cfg.attack))
    return path


def report_points(rows: Sequence[dict], min_epoch: int = 1) -> list[EvalPoint]:
    return [EvalPoint(r["method"], int(r["epoch"]), float(r["forget_quality"]), float(r["model_utility"]))
            for r in rows if int(r["epoch"]) >= min_epoch]


def stage_pdr(cfg: ExperimentConfig) -> Path:
    man = Manifest(cfg.manifest)
    _, dhash = _dataset(cfg, man)
    man.require("eval", "run eval first", task=cfg.task, dataset=dhash)
    src = _task_paths(cfg)[2] / "checkpoints.csv"
    man.verify(src)
    scores = pdr(report_points(read_csv(src, REPORT_COLUMNS)), cfg.pdr_mode)
    path = _task_paths(cfg)[2] / "pdr.csv"
    write_csv(path, PDR_COLUMNS, [{"task": cfg.task, "method": m, "pdr": v} for m, v in scores.items()])
    man.append("pdr", [path], task=cfg.task, dataset=dhash, mode=cfg.pdr_mode)
    return path


def stage_ablation(cfg: ExperimentConfig, lr: float | None = None) -> Path:
    """PROD over the loss x top_p x alpha grid, one CSV row per cell and seed."""
    man = Manifest(cfg.manifest)
    ds, dhash = _dataset(cfg, man)
    start, _ = _start_model(cfg, man, dhash)
    start_hash = start.fingerprint()
    examples = to_examples(ds.forget)
    scorer = Scorer(ds)
    if lr is None:
        row = man.latest("grid-search", task=cfg.task, method="prod")
        lr = row["selected_lr"] if row else cfg.train.lr
    ab = cfg.ablation
    cells = [(loss, tp, a) for loss in ab.losses for tp in ab.top_ps for a in ab.alphas]
    caches: dict = {}
    out = []
    for seed in cfg.seeds:
        points, finals, errors = [], {}, {}
        for loss, tp, a in cells:
            label = f"{loss}/p{tp}/a{a}"
            try:
                sc = SurgeryConfig(top_p=tp, alpha=a, loss=loss)
            except SurgeryConfigError as e:
                errors[label] = str(e)
                continue
            key = (tp, a)
            if key not in caches:
                caches[key] = CachedTargets.build(start, examples, SurgeryConfig(top_p=tp, alpha=a))
            cache = caches[key]  # loss variant only changes how targets are consumed
            tc = replace(_train_config(cfg, "prod"), surgery=sc, seed=seed, lr=lr, allow_lr_override=True)
            res = unlearn(start.clone(), examples, tc, cache=cache, start_hash=start_hash,
                          on_epoch=lambda e, m: scorer.point(m) if e > 0 else {})
            for r in res.epochs[1:]:
                points.append(EvalPoint(label, r.epoch, r.metrics["forget_quality"], r.metrics["model_utility"]))
            finals[label] = res.epochs[-1].metrics if len(res.epochs) > 1 else {}
        scores = pdr(points) if len({p.method for p in points}) >= 2 else {}
        for loss, tp, a in cells:
            label = f"{loss}/p{tp}/a{a}"
            base = {"task": cfg.task, "seed": seed, "loss": loss, "top_p": tp, "alpha": a}
            if label in errors:
                out.append({**base, "status": "config-error", "pdr": float("nan"), "forget_quality": float("nan"),
                            "model_utility": float("nan"), "detail": errors[label]})
            else:
                f = finals.get(label, {})
                out.append({**base, "status": "ok", "pdr": scores.get(label, float("nan")),
                            "forget_quality": f.get("forget_quality", float("nan")),
                            "model_utility": f.get("model_utility", float("nan")), "detail": ""})
    path = _task_paths(cfg)[2] / "ablation.csv"
    write_csv(path, ABLATION_COLUMNS, out)
    man.append("ablation", [path], task=cfg.task, dataset=dhash, lr=lr, start_hash=start_hash)
    return path


def run_pipeline(cfg: ExperimentConfig, force: bool = False, attack: bool = True,
                 progress: Callable[[str], None] | None = None) -> dict:
    """gen-data through pdr for one task; returns stage timings in seconds."""
    say = progress or (lambda s: None)
    times = {}

    def timed(name, fn, *a, **kw):
        t = time.perf_counter()
        say(name)
        res = fn(*a, **kw)
        times[name] = time.perf_counter() - t
        return res

    timed("gen-data", stage_gen_data, cfg, force=force)
    timed("pretrain", stage_pretrain, cfg)
    if cfg.task != "api":
        timed("memorize", stage_memorize, cfg)
    for m in cfg.methods:
        timed(f"unlearn:{m}", stage_unlearn, cfg, m)
    timed("eval", stage_eval, cfg)
    if attack:
        timed("attack", stage_attack, cfg)
    timed("pdr", stage_pdr, cfg)
    return times


# ---------------------------------------------------------------------------
# report merging


def merge_reports(in_dir: str | os.PathLike, out: str | os.PathLike) -> Path:
    """Per-method per-epoch seed means, PDR table and attack table in one long CSV."""
    root = Path(in_dir)
    files = sorted(p for p in root.rglob("*.csv")) if root.is_dir() else []
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    checkpoint_rows, pdr_rows = [], []
    for p in files:
        if Path(out).exists() and p.resolve() == Path(out).resolve():
            continue
        with open(p, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        if tuple(header) == PDR_COLUMNS:
            pdr_rows += read_csv(p, PDR_COLUMNS)
        elif tuple(header) in (ABLATION_COLUMNS, EXCLUSION_COLUMNS):
            continue
        else:
            checkpoint_rows += read_csv(p, REPORT_COLUMNS)
    if not checkpoint_rows and not pdr_rows:
        raise ValidationError(f"no report CSVs found under {root}")
    groups: dict[tuple, list[dict]] = {}
    for r in checkpoint_rows:
        groups.setdefault((r["task"], r["method"], int(r["epoch"])), []).append(r)
    cols = ("table", "task", "method", "epoch", "n_seeds", "forget_quality", "model_utility",
            "attack_bleu_mean", "attack_bleu_min", "attack_bleu_max", "pdr")
    out_rows = []
    for (task, method, epoch), rs in sorted(groups.items()):
        def mean(c):
            vals = [_num(r[c]) for r in rs]
            vals = [v for v in vals if not math.isnan(v)]
            return float(np.mean(vals)) if vals else float("nan")
        out_rows.append({"table": "curve", "task": task, "method": method, "epoch": epoch, "n_seeds": len(rs),
                         "forget_quality": mean("forget_quality"), "model_utility": mean("model_utility"),
                         "attack_bleu_mean": float("nan"), "attack_bleu_min": float("nan"),
                         "attack_bleu_max": float("nan"), "pdr": float("nan")})
    attack: dict[tuple, list[dict]] = {}
    for r in checkpoint_rows:
        if int(r["epoch"]) >= 1 and r["attack_bleu_mean"] != "":
            attack.setdefault((r["task"], r["method"]), []).append(r)
    for (task, method), rs in sorted(attack.items()):
        out_rows.append({"table": "attack", "task": task, "method": method, "epoch": "", "n_seeds": len(rs),
                         "forget_quality": float("nan"), "model_utility": float("nan"),
                         "attack_bleu_mean": float(np.mean([_num(r["attack_bleu_mean"]) for r in rs])),
                         "attack_bleu_min": float(min(_num(r["attack_bleu_min"]) for r in rs)),
                         "attack_bleu_max": float(max(_num(r["attack_bleu_max"]) for r in rs)),
                         "pdr": float("nan")})
    for r in sorted(pdr_rows, key=lambda r: (r["task"], r["method"])):
        out_rows.append({"table": "pdr", "task": r["task"], "method": r["method"], "epoch": "", "n_seeds": "",
                         "forget_quality": float("nan"), "model_utility": float("nan"),
                         "attack_bleu_mean": float("nan"), "attack_bleu_min": float("nan"),
                         "attack_bleu_max": float("nan"), "pdr": float(r["pdr"])})
    return write_csv(Path(out), cols, out_rows)
