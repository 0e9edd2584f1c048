"""Target-distribution construction for PROD unlearning and its loss.

For each forget position the fixed pipeline is

    logits h  ->  mask the forget token to -inf  ->  nucleus-truncate  ->  target

and the model is then fit to the target with a soft-target loss. Targets are
built once, from the model as it stood before unlearning, and cached.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateDistributionError, Tensor
from .lm import LmModel, make_windows

# cumulative-mass comparisons absorb softmax rounding at this scale
NUCLEUS_SLACK = 1e-12

LOSS_VARIANTS = ("ce", "kl", "js")


class SurgeryConfigError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Targets are missing or were built from a different model."""


@dataclass(frozen=True)
class SurgeryConfig:
    top_p: float = 0.8
    alpha: float = 0.0
    loss: str = "ce"

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise SurgeryConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if not np.isfinite(self.alpha) or self.alpha < -1.0:
            raise SurgeryConfigError(f"alpha must be finite and >= -1, got {self.alpha}")
        if self.loss not in LOSS_VARIANTS:
            raise SurgeryConfigError(f"unknown loss variant {self.loss!r}; choose from {LOSS_VARIANTS}")
        if self.loss != "ce" and self.alpha > 0:
            raise SurgeryConfigError(f"{self.loss} loss needs non-negative targets; alpha must be <= 0")


def softmax(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    m = np.max(h, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateDistributionError("no finite logit to normalise")
    e = np.exp(h - m)
    return e / e.sum(axis=-1, keepdims=True)


def forget_mask(vocab_size: int, token: int) -> np.ndarray:
    if not 0 <= token < vocab_size:
        raise IndexError(f"forget token {token} outside vocabulary of size {vocab_size}")
    m = np.zeros(vocab_size, dtype=np.int8)
    m[token] = 1
    return m


def collect_distribution(model: LmModel, x_f: Sequence[int], y_f: Sequence[int], t: int):
    """Logits and probabilities for predicting y_f[t-1] given x_f and y_f[:t-1] (t is 1-based)."""
    if not 1 <= t <= len(y_f):
        raise IndexError(f"position t={t} outside 1..{len(y_f)}")
    w = make_windows([(x_f, y_f[:t])], model.config.context_len)
    h = model.logits(w.contexts[-1:]).data[0]
    return h, softmax(h)


def forget_eliminate(h: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Set the masked logit to -inf and renormalise; kept-token ratios are preserved."""
    mask = np.asarray(mask)
    if mask.shape != np.shape(h) or mask.sum() != 1:
        raise ValueError("mask must be one-hot with the logits' shape")
    h_hat = np.array(h, dtype=np.float64)
    h_hat[mask.astype(bool)] = -np.inf
    return h_hat, softmax(h_hat)


def nucleus_set(p_n: np.ndarray, top_p: float) -> np.ndarray:
    """Boolean membership of the smallest descending-probability prefix with mass >= top_p.

    Ties are ordered by ascending token id; zero-probability tokens never enter.
    """
    p_n = np.asarray(p_n, dtype=np.float64)
    ids = np.arange(p_n.size)
    order = np.lexsort((ids, -p_n))
    order = order[p_n[order] > 0.0]
    cum = np.cumsum(p_n[order])
    hit = np.nonzero(cum >= top_p - NUCLEUS_SLACK)[0]
    k = hit[0] + 1 if hit.size else order.size
    keep = np.zeros(p_n.size, dtype=bool)
    keep[order[:k]] = True
    return keep


def nucleus_truncate(h_hat: np.ndarray, p_n: np.ndarray, top_p: float) -> np.ndarray:
    h_tilde = np.array(h_hat, dtype=np.float64)
    h_tilde[~nucleus_set(p_n, top_p)] = -np.inf
    return h_tilde


def build_target(h: np.ndarray, h_tilde: np.ndarray, p: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    """Kept tokens take softmax(h_tilde); the forget token takes -alpha * p(forget)."""
    del h  # p already is softmax(h); kept for call-site symmetry with the derivation
    target = softmax(h_tilde)
    f = np.asarray(mask).astype(bool)
    target[f] = -alpha * np.asarray(p)[f]
    return target


def target_for_position(h: np.ndarray, forget_token: int, config: SurgeryConfig) -> np.ndarray:
    """Whole pipeline for one position, elimination strictly before truncation."""
    p = softmax(h)
    m = forget_mask(len(h), forget_token)
    h_hat, p_n = forget_eliminate(h, m)
    h_tilde = nucleus_truncate(h_hat, p_n, config.top_p)
    # -alpha*p is -0.0 when alpha is 0; the sparse cache format keeps only +0.0
    return build_target(h, h_tilde, p, m, config.alpha) + 0.0


def build_targets_batch(logits: np.ndarray, forget_tokens: np.ndarray, config: SurgeryConfig) -> np.ndarray:
    return np.stack([target_for_position(h, int(f), config) for h, f in zip(logits, forget_tokens)])


@dataclass(frozen=True)
class TargetDist:
    values: np.ndarray
    forget_token: int
    model_hash: str


class CachedTargets:
    """Write-once map (example id, position) -> target vector, tagged with the source model hash."""

    def __init__(self, model_hash: str, config: SurgeryConfig, tables: Mapping[str, np.ndarray],
                 forget_tokens: Mapping[str, np.ndarray]):
        self.model_hash = model_hash
        self.config = config
        frozen = {}
        for key, arr in tables.items():
            a = np.array(arr, dtype=np.float64)
            a.flags.writeable = False
            frozen[key] = a
        self._tables = MappingProxyType(frozen)
        toks = {}
        for key, arr in forget_tokens.items():
            a = np.array(arr, dtype=np.int64)
            a.flags.writeable = False
            toks[key] = a
        self._tokens = MappingProxyType(toks)

    @classmethod
    def build(cls, model: LmModel, examples, config: SurgeryConfig) -> "CachedTargets":
        """Examples expose ``id``, ``prompt`` and ``continuation`` token lists."""
        examples = list(examples)
        w = make_windows([(e.prompt, e.continuation) for e in examples], model.config.context_len)
        logits = model.logits(w.contexts).data
        targets = build_targets_batch(logits, w.targets, config)
        tables, toks = {}, {}
        for k, e in enumerate(examples):
            sel = w.seq == k
            tables[e.id] = targets[sel]
            toks[e.id] = w.targets[sel]
        return cls(model.fingerprint(), config, tables, toks)

    def __contains__(self, key) -> bool:
        ex, t = key
        return ex in self._tables and 1 <= t <= len(self._tables[ex])

    def __len__(self) -> int:
        return sum(len(v) for v in self._tables.values())

    def example_ids(self) -> list[str]:
        return list(self._tables)

    def table(self, example_id: str) -> np.ndarray:
        try:
            return self._tables[example_id]
        except KeyError:
            raise StaleCacheError(f"no cached targets for example {example_id!r}") from None

    def get(self, example_id: str, t: int) -> TargetDist:
        tab = self.table(example_id)
        if not 1 <= t <= len(tab):
            raise StaleCacheError(f"no cached target for {example_id!r} at position {t}")
        return TargetDist(tab[t - 1], int(self._tokens[example_id][t - 1]), self.model_hash)

    def check(self, expected_hash: str) -> None:
        if self.model_hash != expected_hash:
            raise StaleCacheError(
                f"targets were built from model {self.model_hash[:12]}, "
                f"expected the unlearning start model {expected_hash[:12]}"
            )

    # persistence: header line, then one sparse record per position
    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({
            "model_hash": self.model_hash,
            "top_p": self.config.top_p,
            "alpha": self.config.alpha,
            "loss": self.config.loss,
        }, sort_keys=True)]
        for ex, tab in self._tables.items():
            toks = self._tokens[ex]
            for t, row in enumerate(tab, start=1):
                nz = np.nonzero(row)[0]
                lines.append(json.dumps({
                    "ex": ex, "t": t, "forget": int(toks[t - 1]), "v": int(row.size),
                    "entries": [[int(i), float(row[i])] for i in nz],
                }))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike, expected_hash: str | None = None) -> "CachedTargets":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        if expected_hash is not None and head["model_hash"] != expected_hash:
            raise StaleCacheError(f"{path}: cache built from a different model")
        rows: dict[str, list] = {}
        toks: dict[str, list] = {}
        for line in lines[1:]:
            rec = json.loads(line)
            row = np.zeros(rec["v"])
            for i, val in rec["entries"]:
                row[i] = val
            rows.setdefault(rec["ex"], []).append(row)
            toks.setdefault(rec["ex"], []).append(rec["forget"])
        cfg = SurgeryConfig(top_p=head["top_p"], alpha=head["alpha"], loss=head["loss"])
        return cls(head["model_hash"], cfg, {k: np.stack(v) for k, v in rows.items()}, toks)


def soft_target_loss(logp: Tensor, targets: np.ndarray, variant: str = "ce") -> Tensor:
    """Per-row divergence between fixed targets and exp(logp); returns a 1-D tensor.

    ``ce`` is -sum_i target_i * logp_i and accepts a negative forget entry.
    ``kl`` and ``js`` need non-negative targets.
    """
    T = np.asarray(targets, dtype=np.float64)
    if variant == "ce":
        return ad.scale(ad.sum(ad.mul(logp, Tensor(T)), axis=-1), -1.0)
    if np.any(T < 0):
        raise SurgeryConfigError(f"{variant} loss is undefined for negative target entries")
    pos = T > 0
    t_log_t = np.where(pos, T * np.log(np.where(pos, T, 1.0)), 0.0).sum(axis=-1)
    if variant == "kl":
        cross = ad.scale(ad.sum(ad.mul(logp, Tensor(T)), axis=-1), -1.0)
        return ad.add(cross, Tensor(t_log_t))
    if variant == "js":
        p = ad.exp(logp)
        log_m = ad.log(ad.scale(ad.add(p, Tensor(T)), 0.5))
        kl_t = ad.sub(Tensor(t_log_t), ad.sum(ad.mul(log_m, Tensor(T)), axis=-1))
        kl_p = ad.sum(ad.mul(p, ad.sub(logp, log_m)), axis=-1)
        return ad.scale(ad.add(kl_t, kl_p), 0.5)
    raise SurgeryConfigError(f"unknown loss variant {variant!r}")


def prod_loss(model: LmModel, examples, cache: CachedTargets, variant: str | None = None) -> Tensor:
    """Soft-target loss against cached targets, mean over positions then over examples."""
    examples = list(examples)
    variant = variant or cache.config.loss
    tables = [cache.table(e.id) for e in examples]
    for e, tab in zip(examples, tables):
        if len(tab) != len(e.continuation):
            raise StaleCacheError(f"cached targets for {e.id!r} cover {len(tab)} positions, "
                                  f"example has {len(e.continuation)}")
    w = make_windows([(e.prompt, e.continuation) for e in examples], model.config.context_len)
    targets = np.concatenate(tables, axis=0)
    logp = ad.log_softmax(model.logits(w.contexts))
    per_pos = soft_target_loss(logp, targets, variant)
    counts = np.bincount(w.seq, minlength=len(examples)).astype(np.float64)
    weights = 1.0 / (counts[w.seq] * len(examples))
    return ad.sum(ad.mul(per_pos, Tensor(weights)))
