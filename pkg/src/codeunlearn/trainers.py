"""Pretraining, memorisation, and the five unlearning objectives (GA, DPO, NPO, FLAT, PROD)."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, Tape, Tensor, adamw_step
from .data import REFUSAL, Record
from .lm import (DEFAULT_VOCAB, LmModel, Vocab, batch_nll_loss, generate_batch, make_windows, save_checkpoint,
                 token_logprobs)
from .surgery import CachedTargets, StaleCacheError, SurgeryConfig, prod_loss

log = logging.getLogger(__name__)

METHODS = ("ga", "dpo", "npo", "flat", "prod")
PUBLISHED_LR_GRID = (1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
FLAT_SIGNS = ("variational", "additive")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class MemorizationError(RuntimeError):
    pass


@dataclass
class UnlearnExample:
    id: str
    prompt: list[int]
    continuation: list[int]
    template: list[int] | None = None
    task: str = ""

    def __post_init__(self):
        if len(self.continuation) < 1:
            raise ValueError(f"example {self.id}: continuation must hold at least one token")


def to_examples(records: Sequence[Record], vocab: Vocab = DEFAULT_VOCAB, template: str | None = REFUSAL):
    tmpl = vocab.encode(template) if template is not None else None
    return [UnlearnExample(r.id, vocab.encode(r.prompt), vocab.encode(r.continuation), tmpl, r.task)
            for r in records]


@dataclass
class TrainConfig:
    method: str = "prod"
    lr: float = 1e-5
    batch_size: int = 32
    epochs: int = 10
    beta: float = 0.1
    flat_sign: str = "variational"
    surgery: SurgeryConfig = field(default_factory=SurgeryConfig)
    seed: int = 0
    weight_decay: float = 0.01
    lr_grid: tuple[float, ...] = PUBLISHED_LR_GRID
    allow_lr_override: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.flat_sign not in FLAT_SIGNS:
            raise ConfigError(f"flat_sign must be one of {FLAT_SIGNS}")
        if not self.allow_lr_override and self.lr not in self.lr_grid:
            raise ConfigError(f"lr {self.lr} not in grid {self.lr_grid}; set allow_lr_override to use it")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d


# ---------------------------------------------------------------------------
# objectives


def _windows(model: LmModel, batch: Sequence[UnlearnExample], which: str = "forget"):
    if which == "template":
        if any(e.template is None for e in batch):
            raise ConfigError("template response y_e is required for this method")
        pairs = [(e.prompt, e.template) for e in batch]
    else:
        pairs = [(e.prompt, e.continuation) for e in batch]
    return make_windows(pairs, model.config.context_len)


def sequence_logprob(model: LmModel, batch, which: str = "forget") -> Tensor:
    """log pi(y|x) per example, summed over the target tokens."""
    w = _windows(model, batch, which)
    return ad.segment_sum(token_logprobs(model, w), w.seq, w.n_seqs)


def ga_loss(model: LmModel, batch: Sequence[UnlearnExample]) -> Tensor:
    """Negated NLL over the forget tokens; minimising it ascends the NLL."""
    if not batch:
        raise ValueError("empty batch")
    return ad.scale(batch_nll_loss(model, _windows(model, batch)), -1.0)


def dpo_loss(model: LmModel, ref: LmModel, batch: Sequence[UnlearnExample], beta: float = 0.1) -> Tensor:
    """Template preferred over the forget continuation, relative to the frozen reference."""
    lw = sequence_logprob(model, batch, "template")
    ll = sequence_logprob(model, batch, "forget")
    rw = sequence_logprob(ref, batch, "template").data
    rl = sequence_logprob(ref, batch, "forget").data
    margin = ad.scale(ad.sub(ad.sub(lw, Tensor(rw)), ad.sub(ll, Tensor(rl))), beta)
    return ad.scale(ad.mean(ad.log_sigmoid(margin)), -1.0)


def npo_loss(model: LmModel, ref: LmModel, batch: Sequence[UnlearnExample], beta: float = 0.1) -> Tensor:
    ll = sequence_logprob(model, batch, "forget")
    rl = sequence_logprob(ref, batch, "forget").data
    return ad.scale(ad.mean(ad.log_sigmoid(ad.scale(ad.sub(ll, Tensor(rl)), -beta))), -1.0)


def mean_token_prob(model: LmModel, batch, which: str = "forget") -> Tensor:
    """Average per-token conditional probability of y given x, per example."""
    w = _windows(model, batch, which)
    if len(w.targets) == 0:
        raise ValueError("empty sequence")
    counts = np.bincount(w.seq, minlength=w.n_seqs).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("empty sequence in batch")
    probs = ad.exp(token_logprobs(model, w))
    return ad.segment_sum(ad.mul(probs, Tensor(1.0 / counts[w.seq])), w.seq, w.n_seqs)


def flat_loss(model: LmModel, batch: Sequence[UnlearnExample], sign: str = "variational") -> Tensor:
    """KL-form FLAT with g*(v)=v and f*(u)=exp(u-1).

    ``variational`` subtracts the conjugate term on the forget response so the
    objective pushes its probability down; ``additive`` adds it, as the formula is printed.
    """
    pe = mean_token_prob(model, batch, "template")
    pf = mean_token_prob(model, batch, "forget")
    conj = ad.exp(ad.sub(pf, Tensor(np.ones(pf.shape))))
    if sign == "variational":
        inner = ad.sub(pe, conj)
    elif sign == "additive":
        inner = ad.add(pe, conj)
    else:
        raise ConfigError(f"flat sign must be one of {FLAT_SIGNS}")
    return ad.scale(ad.mean(inner), -1.0)


def method_loss(method: str, model: LmModel, batch, *, ref: LmModel | None = None,
                cache: CachedTargets | None = None, config: TrainConfig | None = None) -> Tensor:
    cfg = config or TrainConfig(method=method)
    if method == "ga":
        return ga_loss(model, batch)
    if method == "dpo":
        return dpo_loss(model, ref, batch, cfg.beta)
    if method == "npo":
        return npo_loss(model, ref, batch, cfg.beta)
    if method == "flat":
        return flat_loss(model, batch, cfg.flat_sign)
    if method == "prod":
        if cache is None:
            raise StaleCacheError("PROD needs targets cached from the initial model")
        return prod_loss(model, batch, cache, cfg.surgery.loss)
    raise ConfigError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# language-model training (pretraining and memorisation)


def train_lm_steps(model: LmModel, windows, steps: int, lr: float, batch_windows: int, seed: int,
                   weight_decay: float = 0.01, final_lr_frac: float = 0.1) -> AdamWState:
    """Token-level next-token training over precomputed windows, lr decayed linearly."""
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = model.parameters()
    n = len(windows.targets)
    for step in range(steps):
        state.lr = lr * (1.0 - (1.0 - final_lr_frac) * step / max(steps - 1, 1))
        idx = rng.integers(0, n, size=min(batch_windows, n))
        with Tape() as tape:
            logp = token_logprobs(model, _subset(windows, idx))
            loss = ad.scale(ad.mean(logp), -1.0)
        ad.backward(loss, tape)
        adamw_step(params, state)
    return state


def _subset(w, idx):
    from .lm import Windows
    return Windows(w.contexts[idx], w.targets[idx], np.arange(len(idx)), w.pos[idx], len(idx))


def pretrain(model: LmModel, corpus: Sequence[Record], steps: int = 3000, lr: float = 3e-3,
             batch_windows: int = 512, seed: int = 0, vocab: Vocab = DEFAULT_VOCAB,
             add_eos: bool = True) -> LmModel:
    """Next-token pretraining on whole records (prompt and continuation both supervised)."""
    pairs = []
    for r in corpus:
        toks = vocab.encode(r.prompt + r.continuation)
        pairs.append(([], toks + ([vocab.eos] if add_eos else [])))
    w = make_windows(pairs, model.config.context_len, bos=vocab.bos)
    train_lm_steps(model, w, steps, lr, batch_windows, seed)
    return model


def memorization_split(e: UnlearnExample) -> tuple[list[int], list[int]]:
    """Prompt/suffix used to check recall: the record prompt, or the first half when it is empty."""
    if e.prompt:
        return e.prompt, e.continuation
    half = len(e.continuation) // 2
    return e.continuation[:half], e.continuation[half:]


def recall_rate(model: LmModel, examples: Sequence[UnlearnExample], vocab: Vocab = DEFAULT_VOCAB) -> float:
    if not examples:
        return 1.0
    splits = [memorization_split(e) for e in examples]
    gens = generate_batch(model, [[vocab.bos, *x] for x, _ in splits], [len(y) for _, y in splits], eos=vocab.eos)
    return float(np.mean([g == y for g, (_, y) in zip(gens, splits)]))


@dataclass
class MemorizeReport:
    epochs_run: int
    recall: float
    reached: bool
    batch_mix: list[tuple[int, int]]  # (forget, retain) records per epoch


def memorize(model: LmModel, forget: Sequence[UnlearnExample], retain: Sequence[Record], *, epochs: int = 10,
             lr: float = 2e-5, batch_size: int = 32, seed: int = 0, target: float = 0.9,
             max_epochs: int | None = None, retain_ratio: int = 9, vocab: Vocab = DEFAULT_VOCAB,
             strict: bool = True) -> MemorizeReport:
    """Continued pretraining on forget data mixed 1:retain_ratio with a fixed retain draw.

    Runs ``epochs`` epochs, then keeps going (up to ``max_epochs``) until the
    greedy recall rate reaches ``target``. Raises MemorizationError if it never
    does and ``strict`` is set.
    """
    max_epochs = max(epochs, max_epochs or epochs)
    rng = np.random.Generator(np.random.PCG64(seed))
    state = AdamWState(lr=lr)
    params = model.parameters()
    retain_pool = [vocab.encode(r.prompt + r.continuation) for r in retain]
    forget_seqs = [(e.prompt, e.continuation) for e in forget]
    n_retain = retain_ratio * len(forget) if forget else len(retain_pool)
    if retain_pool and n_retain > len(retain_pool):
        log.warning("retain pool (%d) smaller than %d per epoch; sampling with replacement",
                    len(retain_pool), n_retain)
    # the retain mix is drawn once and replayed every epoch
    if retain_pool:
        picks = rng.choice(len(retain_pool), size=n_retain, replace=n_retain > len(retain_pool))
    else:
        picks = np.array([], dtype=np.int64)
    mix: list[tuple[int, int]] = []
    recall = float("nan")
    epoch = 0
    while epoch < max_epochs:
        if epoch >= epochs:
            recall = recall_rate(model, forget, vocab)
            log.info("memorize epoch %d recall %.3f", epoch, recall)
            if recall >= target:
                break
        seqs = forget_seqs + [([], retain_pool[i]) for i in picks]
        order = rng.permutation(len(seqs))
        mix.append((len(forget_seqs), len(picks)))
        for start in range(0, len(order), batch_size):
            chunk = [seqs[i] for i in order[start:start + batch_size]]
            w = make_windows([(x, list(y) + [vocab.eos]) for x, y in chunk], model.config.context_len,
                             bos=vocab.bos)
            with Tape() as tape:
                loss = batch_nll_loss(model, w)
            ad.backward(loss, tape)
            adamw_step(params, state)
        epoch += 1
    if epoch >= max_epochs or recall != recall:
        recall = recall_rate(model, forget, vocab)
    report = MemorizeReport(epoch, recall, recall >= target, mix)
    if strict and forget and not report.reached:
        raise MemorizationError(f"recall {recall:.3f} below target {target} after {epoch} epochs")
    return report


# ---------------------------------------------------------------------------
# unlearning


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)


@dataclass
class UnlearnResult:
    model: LmModel
    epochs: list[EpochRecord]
    start_hash: str
    ref_hash: str | None
    cache: CachedTargets | None


def unlearn(model: LmModel, forget: Sequence[UnlearnExample], config: TrainConfig, *,
            ref: LmModel | None = None, cache: CachedTargets | None = None, start_hash: str | None = None,
            on_epoch: Callable[[int, LmModel], dict] | None = None, checkpoint_dir: str | os.PathLike | None = None,
            manifest: str | os.PathLike | None = None) -> UnlearnResult:
    """Run ``config.epochs`` epochs of mini-batch unlearning with AdamW, in place.

    PROD targets come from ``cache`` or are built here from the model as passed
    in, before any update. A supplied cache must carry ``start_hash`` (the
    fingerprint of the model unlearning started from); anything else is refused.
    ``on_epoch(epoch, model)`` runs after epoch 0 (no update) and after every
    epoch; its dict is stored with that epoch.
    """
    t0 = time.perf_counter()
    method = config.method
    start_hash = start_hash or model.fingerprint()
    if method in ("dpo", "npo"):
        ref = ref if ref is not None else model.clone()
    ref_hash = ref.fingerprint() if ref is not None else None
    if method == "prod":
        if cache is None:
            if model.fingerprint() != start_hash:
                raise StaleCacheError("cannot build targets: model differs from the unlearning start model")
            cache = CachedTargets.build(model, forget, config.surgery)
        cache.check(start_hash)
        built, want = cache.config, config.surgery
        if (built.top_p, built.alpha) != (want.top_p, want.alpha):
            raise ConfigError(f"cached targets use top_p={built.top_p}, alpha={built.alpha}; "
                              f"run asks for top_p={want.top_p}, alpha={want.alpha}")
    if method in ("dpo", "flat") and any(e.template is None for e in forget):
        raise ConfigError(f"{method} needs a template response for every example")

    records: list[EpochRecord] = []
    if on_epoch is not None:
        records.append(EpochRecord(0, float("nan"), _ckpt(model, checkpoint_dir, 0, config),
                                   on_epoch(0, model)))
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    params = model.parameters()
    forget = list(forget)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(forget))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [forget[i] for i in order[start:start + config.batch_size]]
            if cache is not None:
                cache.check(start_hash)
            with Tape() as tape:
                loss = method_loss(method, model, batch, ref=ref, cache=cache, config=config)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss: method={method} epoch={epoch} batch={b}")
            ad.backward(loss, tape)
            adamw_step(params, state)
            losses.append(value)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                          _ckpt(model, checkpoint_dir, epoch, config))
        if on_epoch is not None:
            rec.metrics = on_epoch(epoch, model)
        records.append(rec)
    if ref is not None and ref.fingerprint() != ref_hash:
        raise RuntimeError("reference model changed during unlearning")
    if manifest is not None:
        append_manifest(manifest, {
            "kind": "unlearn", "config": config.to_json(), "seed": config.seed, "start_hash": start_hash,
            "epochs": [{"epoch": r.epoch, "loss": r.mean_loss, "checkpoint": r.checkpoint, **r.metrics}
                       for r in records],
            "wall_time": time.perf_counter() - t0,
        })
    return UnlearnResult(model, records, start_hash, ref_hash, cache)


def _ckpt(model, root, epoch, config):
    if root is None:
        return None
    path = Path(root) / config.method / str(config.seed) / f"epoch{epoch}.ckpt"
    save_checkpoint(model, path, {"method": config.method, "seed": config.seed, "epoch": epoch})
    return str(path)


def append_manifest(path: str | os.PathLike, row: dict) -> None:
    """Append one JSON line under an exclusive lock."""
    import fcntl

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(row, sort_keys=True, default=_json_default) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(line)
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def select_by_forget_quality(curves: dict[float, list[dict]], threshold: float = 0.9) -> float:
    """Pick the learning rate whose run first reaches ``threshold`` forget quality.

    Ties (same earliest epoch) go to higher utility at that epoch. When no run
    reaches the threshold the best peak forget quality wins, then utility.
    """
    def key(item):
        lr, curve = item
        hits = [p for p in curve if p["epoch"] >= 1 and p["forget_quality"] >= threshold]
        if hits:
            first = hits[0]
            return (1, -first["epoch"], first["model_utility"], lr)
        best = max((p for p in curve if p["epoch"] >= 1), key=lambda p: (p["forget_quality"], p["model_utility"]))
        return (0, best["forget_quality"], best["model_utility"], lr)

    return max(curves.items(), key=key)[0]


def with_lr(config: TrainConfig, lr: float) -> TrainConfig:
    return replace(config, lr=lr)
