"""Deterministic synthetic code corpora for the three unlearning tasks.

Programs are sequences of statements in a toy language::

    let qx=41;            declaration
    kp=qx*ab;             arithmetic
    zz=max(qx,kp);        arithmetic call
    r2=np.v3.sum(qx);     versioned library call
    push qx;pull qx;      paired statement (closer is forced by the opener)

The closer of a paired statement is the only place where the continuation of
a prefix is forced, which is what the utility split measures.

All randomness flows from ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

GRAMMAR_VERSION = "mini-1"
PRNG_NAME = "numpy.PCG64"

LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"
FUNCS = ("add", "sub", "mul", "max", "min", "pow")
ARITH_OPS = "+-*/"
PAIRS = (("push", "pull"), ("lock", "free"), ("open", "shut"), ("grab", "drop"))
CLOSER = dict(PAIRS)
LIBS = ("np", "io", "os", "re", "fs", "db")
LIB_FUNCS = ("sum", "get", "put", "map", "cat", "len")

INSECURE_PATTERNS = ("unsafe_eval(", "raw_exec(", "weak_hash(")
SECURE_TWINS = {"unsafe_eval(": "safe_eval(", "raw_exec(": "jail_exec(", "weak_hash(": "sha_hash("}

REFUSAL = "/* unavailable */"


class DatasetError(ValueError):
    pass


@dataclass
class Record:
    id: str
    task: str
    split: str
    prompt: str
    continuation: str
    patterns: list[str] | None = None
    api_meta: dict | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


@dataclass
class TaskDataset:
    task: str
    forget: list[Record]
    retain: list[Record]
    eval: list[Record]
    metadata: dict = field(default_factory=dict)
    pretrain: list[Record] = field(default_factory=list)

    def records(self) -> list[Record]:
        return [*self.forget, *self.retain, *self.eval, *self.pretrain]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for r in self.records():
            h.update(r.to_json().encode("utf-8") + b"\n")
        return h.hexdigest()


class Grammar:
    """Random program generator; every draw goes through one seeded PCG64 stream."""

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def _pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def ident(self) -> str:
        return self._pick(LETTERS) + self._pick(LETTERS + DIGITS)

    def number(self) -> str:
        n = int(self.rng.integers(1, 4))
        first = self._pick(DIGITS[1:])
        return first + "".join(self._pick(DIGITS) for _ in range(n - 1))

    def api(self, version: int | None = None) -> str:
        v = version if version is not None else int(self.rng.integers(1, 10))
        return f"{self._pick(LIBS)}.v{v}.{self._pick(LIB_FUNCS)}"

    def statement(self, kinds=("let", "arith", "call", "api", "pair")) -> str:
        kind = self._pick(kinds)
        if kind == "let":
            return f"let {self.ident()}={self.number()};"
        if kind == "arith":
            return f"{self.ident()}={self.ident()}{self._pick(ARITH_OPS)}{self.ident()};"
        if kind == "call":
            return f"{self.ident()}={self._pick(FUNCS)}({self.ident()},{self.ident()});"
        if kind == "api":
            return f"{self.ident()}={self.api()}({self.ident()});"
        opener, closer = self._pick(PAIRS)
        x = self.ident()
        return f"{opener} {x};{closer} {x};"

    def program(self, min_len: int, max_len: int) -> str:
        """Whole statements until the length lands in [min_len, max_len]."""
        target = int(self.rng.integers(min_len, max_len + 1))
        out = ""
        while len(out) < target:
            s = self.statement()
            if len(out) + len(s) > max_len:
                if len(out) >= min_len:
                    break
                continue
            out += s
        return out


# ---------------------------------------------------------------------------
# recogniser (independent of the generator)

_ID = r"[a-z][a-z0-9]"
_NUM = r"[1-9][0-9]{0,2}"
_STMT = (
    rf"let {_ID}={_NUM};"
    rf"|{_ID}={_ID}[-+*/]{_ID};"
    rf"|{_ID}=(?:{'|'.join(FUNCS)})\({_ID},{_ID}\);"
    rf"|{_ID}=(?:{'|'.join(LIBS)})\.v[1-9]\.(?:{'|'.join(LIB_FUNCS)})\({_ID}\);"
    + "".join(rf"|{o} (?P<{o}>{_ID});{c} (?P={o});" for o, c in PAIRS)
)
_SECURE = "|".join(
    rf"{_ID}={re.escape(t)}{_ID}\);" for t in (*SECURE_TWINS.values(),)
)
_INSECURE = "|".join(rf"{_ID}={re.escape(p)}{_ID}\);" for p in INSECURE_PATTERNS)
_PROGRAM = re.compile(rf"(?:{_STMT})*")
_PROGRAM_EXT = re.compile(rf"(?:{_STMT}|{_SECURE}|{_INSECURE})*")


def is_program(text: str, allow_security_calls: bool = False) -> bool:
    pat = _PROGRAM_EXT if allow_security_calls else _PROGRAM
    return pat.fullmatch(text) is not None


def canonical_continuation(prefix: str) -> str | None:
    """The forced closer when ``prefix`` ends with an opener statement, else None."""
    m = re.search(rf"(?:^|;)({'|'.join(o for o, _ in PAIRS)}) ({_ID});$", prefix)
    if not m:
        return None
    return f"{CLOSER[m.group(1)]} {m.group(2)};"


# ---------------------------------------------------------------------------
# task generators


def _utility_eval(g: Grammar, n: int, task: str, taken: set[str]) -> list[Record]:
    out = []
    while len(out) < n:
        ctx = g.program(8, 40)
        opener, closer = g._pick(PAIRS)
        x = g.ident()
        prompt = f"{ctx}{opener} {x};"
        if prompt in taken:
            continue
        taken.add(prompt)
        out.append(Record(f"{task}-eval-{len(out):04d}", task, "eval", prompt, f"{closer} {x};"))
    return out


def _programs(g: Grammar, n: int, task: str, split: str, taken: set[str], min_len=64, max_len=256) -> list[Record]:
    out = []
    while len(out) < n:
        p = g.program(min_len, max_len)
        if p in taken:
            continue
        taken.add(p)
        out.append(Record(f"{task}-{split}-{len(out):05d}", task, split, "", p))
    return out


def _meta(task: str, seed: int, **extra) -> dict:
    return {"task": task, "seed": seed, "grammar_version": GRAMMAR_VERSION, "prng": PRNG_NAME, **extra}


def _finish(ds: TaskDataset) -> TaskDataset:
    ids = [r.id for r in ds.records()]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate record ids")
    forget_text = {r.prompt + r.continuation for r in ds.forget}
    for r in (*ds.retain, *ds.eval, *ds.pretrain):
        if r.prompt + r.continuation in forget_text:
            raise DatasetError(f"record {r.id} duplicates a forget record")
    ds.metadata.update(
        counts={"forget": len(ds.forget), "retain": len(ds.retain), "eval": len(ds.eval),
                "pretrain": len(ds.pretrain)},
        content_hash=ds.content_hash(),
    )
    return ds


def gen_copyright(seed: int, n: int = 100, n_eval: int = 200, retain_factor: int = 9,
                  n_pretrain: int = 1000, min_len: int = 64, max_len: int = 256) -> TaskDataset:
    """n forget programs, retain_factor*n retain programs for mixing, a pretraining
    corpus, and held-out utility prompts."""
    if n < 0:
        raise DatasetError("n must be non-negative")
    g = Grammar(seed)
    taken: set[str] = set()
    forget = []
    while len(forget) < n:
        p = g.program(min_len, max_len)
        if p in taken:
            continue
        taken.add(p)
        forget.append(Record(f"copyright-forget-{len(forget):04d}", "copyright", "forget", "", p))
    retain = _programs(g, retain_factor * n, "copyright", "retain", taken, min_len, max_len)
    ev = _utility_eval(g, n_eval, "copyright", taken)
    pre = _programs(g, n_pretrain, "copyright", "pretrain", taken, min_len, max_len)
    return _finish(TaskDataset("copyright", forget, retain, ev, _meta("copyright", seed, n=n), pre))


def gen_insecure(seed: int, n: int = 100, n_eval: int = 200, retain_factor: int = 9,
                 n_pretrain: int = 1000, patterns: Iterable[str] = INSECURE_PATTERNS) -> TaskDataset:
    """Forget: benign context + insecure call; retain: the secure twin of each plus plain programs."""
    patterns = tuple(patterns)
    if not patterns:
        raise DatasetError("pattern list must be non-empty")
    unknown = [p for p in patterns if p not in SECURE_TWINS]
    if unknown:
        raise DatasetError(f"no secure twin for patterns {unknown}")
    g = Grammar(seed)
    taken: set[str] = set()
    forget, retain = [], []
    k = 0
    while len(forget) < n:
        pat = patterns[k % len(patterns)]  # round-robin keeps frequencies balanced
        ctx = g.program(24, 64)
        a, b = g.ident(), g.ident()
        bad = f"{a}={pat}{b});{g.statement()}"
        if ctx + bad in taken:
            continue
        taken.add(ctx + bad)
        k += 1
        forget.append(Record(f"insecure-forget-{len(forget):04d}", "insecure", "forget", ctx, bad,
                             patterns=[pat]))
        good = bad.replace(pat, SECURE_TWINS[pat], 1)
        retain.append(Record(f"insecure-retain-{len(retain):05d}", "insecure", "retain", ctx, good))
    retain += [
        Record(r.id.replace("retain-", "retain-p"), r.task, r.split, r.prompt, r.continuation)
        for r in _programs(g, max(retain_factor - 1, 0) * n, "insecure", "retain", taken)
    ]
    ev = _utility_eval(g, n_eval, "insecure", taken)
    # the pretraining corpus carries the secure spellings so they are in-distribution
    pre = _programs(g, n_pretrain, "insecure", "pretrain", taken)
    for i, r in enumerate(pre[: n_pretrain // 4]):
        twin = SECURE_TWINS[patterns[i % len(patterns)]]
        r.continuation += f"{g.ident()}={twin}{g.ident()});"
    freq = {p: sum(p in r.continuation for r in forget) for p in patterns}
    return _finish(TaskDataset("insecure", forget, retain, ev,
                               _meta("insecure", seed, n=n, patterns=list(patterns), pattern_counts=freq), pre))


def gen_api(seed: int, n_packages: int = 12, min_samples: int = 3, max_samples: int = 8,
            n_pretrain: int = 600, n_eval: int = 200) -> TaskDataset:
    """Versioned library calls split into deprecated (forget) and valid (eval) by a middle version.

    Each package renames its function at the split version, so a directive like
    ``use np v7;`` has exactly one valid completion of ``x=np.``.
    """
    if n_packages < 1:
        raise DatasetError("n_packages must be >= 1")
    g = Grammar(seed)
    taken: set[str] = set()
    forget, ev = [], []
    packages = []
    libs = [f"{a}{b}" for a in LETTERS for b in LETTERS]
    order = g.rng.permutation(len(libs))
    for i in range(n_packages):
        lib = libs[int(order[i])]
        n_versions = int(g.rng.integers(4, 9))
        split = (n_versions + 1) // 2 + 1  # versions < split are deprecated
        old_fn, new_fn = (LIB_FUNCS[j] for j in g.rng.choice(len(LIB_FUNCS), 2, replace=False))
        packages.append({"lib": lib, "versions": n_versions, "split": split, "old": old_fn, "new": new_fn})
        count = int(g.rng.integers(min_samples, max_samples + 1))
        for s in range(count):
            deprecated = s % 2 == 0
            v = int(g.rng.integers(1, split)) if deprecated else int(g.rng.integers(split, n_versions + 1))
            fn = old_fn if deprecated else new_fn
            ctx = g.program(8, 32)
            x, y = g.ident(), g.ident()
            prompt = f"use {lib} v{v};{ctx}{x}="
            cont = f"{lib}.v{v}.{fn}({y});"
            if prompt + cont in taken:
                continue
            taken.add(prompt + cont)
            meta = {"lib": lib, "version": v, "split": split, "deprecated": deprecated,
                    "api": f"{lib}.v{v}.{fn}"}
            rec = Record("", "api", "forget" if deprecated else "eval", prompt, cont, api_meta=meta)
            (forget if deprecated else ev).append(rec)
    for i, r in enumerate(forget):
        r.id = f"api-forget-{i:04d}"
    for i, r in enumerate(ev):
        r.id = f"api-eval-{i:04d}"
    # pretraining text leans on the deprecated spellings, as a long-lived library would
    pre = []
    while len(pre) < n_pretrain:
        pk = packages[int(g.rng.integers(len(packages)))]
        use_old = g.rng.random() < 0.8
        v = int(g.rng.integers(1, pk["split"])) if use_old else int(g.rng.integers(pk["split"], pk["versions"] + 1))
        fn = pk["old"] if use_old else pk["new"]
        text = f"use {pk['lib']} v{v};{g.program(8, 48)}{g.ident()}={pk['lib']}.v{v}.{fn}({g.ident()});"
        if text in taken:
            continue
        taken.add(text)
        pre.append(Record(f"api-pretrain-{len(pre):05d}", "api", "pretrain", "", text))
    utility = _utility_eval(g, n_eval, "api", taken)
    for r in utility:
        r.id = r.id.replace("api-eval-", "api-utility-")
        r.split = "utility"
    ds = TaskDataset("api", forget, [], ev + utility, _meta(
        "api", seed, n_packages=n_packages, packages=packages,
        samples_per_package=(len(forget) + len(ev)) / n_packages,
        api_variants_per_package=float(np.mean([p["versions"] for p in packages])),
    ), pre)
    return _finish(ds)


GENERATORS = {"copyright": gen_copyright, "insecure": gen_insecure, "api": gen_api}


def generate(task: str, seed: int, **kwargs) -> TaskDataset:
    try:
        gen = GENERATORS[task]
    except KeyError:
        raise DatasetError(f"unknown task {task!r}; choose from {sorted(GENERATORS)}") from None
    return gen(seed, **kwargs)


def utility_records(ds: TaskDataset) -> list[Record]:
    """Held-out prompts with a grammar-forced continuation."""
    if ds.task == "api":
        return [r for r in ds.eval if r.split == "utility"]
    return list(ds.eval)


def api_eval_records(ds: TaskDataset) -> list[Record]:
    return [r for r in ds.eval if r.split == "eval"]


# ---------------------------------------------------------------------------
# on-disk format: records.jsonl + meta.json


def write_dataset(ds: TaskDataset, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = "".join(r.to_json() + "\n" for r in ds.records())
    (out / "records.jsonl").write_text(body, encoding="utf-8")
    (out / "meta.json").write_text(json.dumps(ds.metadata, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def read_dataset(path: str | os.PathLike) -> TaskDataset:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    splits: dict[str, list[Record]] = {"forget": [], "retain": [], "eval": [], "pretrain": []}
    for line in (root / "records.jsonl").read_text(encoding="utf-8").splitlines():
        d = json.loads(line)
        rec = Record(**d)
        splits["eval" if rec.split in ("eval", "utility") else rec.split].append(rec)
    ds = TaskDataset(meta["task"], splits["forget"], splits["retain"], splits["eval"], meta, splits["pretrain"])
    if ds.content_hash() != meta.get("content_hash"):
        raise DatasetError(f"{root}: content hash does not match meta.json")
    return ds
