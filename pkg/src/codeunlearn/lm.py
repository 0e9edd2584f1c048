"""Character-level vocabulary and a fixed-context MLP language model."""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 _.,()=+-*/;"

CHECKPOINT_MAGIC = b"CULM"
CHECKPOINT_VERSION = 1


class EncodingError(ValueError):
    pass


class VocabError(IndexError):
    pass


class EmptyLossError(ValueError):
    pass


class Vocab:
    """Symbol/id bijection with PAD=0, BOS=1, EOS=2 and one id per character."""

    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet has duplicate characters")
        self.symbols: list[str] = [PAD, BOS, EOS, *alphabet]
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.pad, self.bos, self.eos = 0, 1, 2
        self.alphabet = alphabet

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        out = []
        for i, ch in enumerate(text):
            tok = self._ids.get(ch)
            if tok is None or tok < 3:
                raise EncodingError(f"character {ch!r} at offset {i} is not in the vocabulary")
            out.append(tok)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        chars = []
        for t in ids:
            t = int(t)
            if not 0 <= t < len(self.symbols):
                raise VocabError(f"token id {t} outside vocabulary of size {len(self)}")
            if t >= 3:
                chars.append(self.symbols[t])
        return "".join(chars)


DEFAULT_VOCAB = Vocab()


@dataclass
class LmConfig:
    vocab_size: int = len(DEFAULT_VOCAB)
    context_len: int = 16
    embed_dim: int = 32
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"LmConfig.{name} must be >= 1")


PARAM_ORDER = ("tok_emb", "pos_emb", "w1", "b1", "w2", "b2")


class LmModel:
    """logits = W2ᵀ·tanh(W1ᵀ·concat(E[tok] + P[pos]) + b1) + b2 over the last C tokens."""

    def __init__(self, config: LmConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        V, C, d, H = config.vocab_size, config.context_len, config.embed_dim, config.hidden_dim
        shapes = {
            "tok_emb": (V, d),
            "pos_emb": (C, d),
            "w1": (C * d, H),
            "b1": (H,),
            "w2": (H, V),
            "b2": (V,),
        }
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {
                "tok_emb": rng.normal(0.0, 0.3, shapes["tok_emb"]),
                "pos_emb": rng.normal(0.0, 0.1, shapes["pos_emb"]),
                "w1": rng.normal(0.0, 1.0 / np.sqrt(C * d), shapes["w1"]),
                "b1": np.zeros(H),
                "w2": rng.normal(0.0, 1.0 / np.sqrt(H), shapes["w2"]),
                "b2": np.zeros(V),
            }
        self.params: dict[str, Tensor] = {}
        for name in PARAM_ORDER:
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shapes[name]}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    @classmethod
    def zeros(cls, config: LmConfig) -> "LmModel":
        m = cls(config)
        for p in m.params.values():
            p.data[...] = 0.0
        return m

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in PARAM_ORDER]

    def clone(self) -> "LmModel":
        return LmModel(self.config, {n: t.data for n, t in self.params.items()})

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for n in PARAM_ORDER:
            h.update(np.ascontiguousarray(self.params[n].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def logits(self, contexts: np.ndarray) -> Tensor:
        """Logits for a batch of left-padded contexts of shape (N, C)."""
        ctx = np.asarray(contexts, dtype=np.int64)
        C = self.config.context_len
        if ctx.ndim != 2 or ctx.shape[1] != C:
            raise ad.ShapeError(f"contexts must have shape (N, {C}), got {ctx.shape}")
        if ctx.size and (ctx.min() < 0 or ctx.max() >= self.config.vocab_size):
            raise VocabError(f"token id outside vocabulary of size {self.config.vocab_size}")
        p = self.params
        n = ctx.shape[0]
        x = ad.add(ad.embedding(p["tok_emb"], ctx), p["pos_emb"])
        x = ad.reshape(x, (n, C * self.config.embed_dim))
        hid = ad.tanh(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
        return ad.add(ad.matmul(hid, p["w2"]), p["b2"])


def pad_context(tokens: Sequence[int], context_len: int, pad: int = 0) -> np.ndarray:
    tail = list(tokens)[-context_len:]
    return np.array([pad] * (context_len - len(tail)) + tail, dtype=np.int64)


def forward_logits(model: LmModel, context: Sequence[int]) -> Tensor:
    """Next-token logits for a single context of at most C tokens."""
    C = model.config.context_len
    if len(context) > C:
        raise ValueError(f"context longer than {C} tokens")
    logits = model.logits(pad_context(context, C)[None, :])
    return ad.reshape(logits, (model.config.vocab_size,))


@dataclass
class Windows:
    """Teacher-forced prediction sites for a batch of (prompt, target) pairs."""

    contexts: np.ndarray  # (N, C)
    targets: np.ndarray  # (N,)
    seq: np.ndarray  # (N,) owning example index
    pos: np.ndarray  # (N,) 0-based position within the target
    n_seqs: int


def make_windows(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    context_len: int,
    bos: int = 1,
    masks: Sequence[Sequence[bool]] | None = None,
) -> Windows:
    """Each target token y_t is predicted from the last C tokens of BOS+x+y_<t."""
    ctxs, tgts, seqs, poss = [], [], [], []
    for k, (x, y) in enumerate(pairs):
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            continue
        full = np.concatenate([np.zeros(context_len, np.int64), [bos], np.asarray(x, np.int64), y])
        off = context_len + 1 + len(x)
        # window t covers full[off + t - C : off + t]
        win = np.lib.stride_tricks.sliding_window_view(full[:-1], context_len)[off - context_len:]
        t_idx = np.arange(len(y))
        if masks is not None:
            mask = np.asarray(masks[k], dtype=bool)
            if mask.shape != (len(y),):
                raise ValueError("mask length must equal target length")
            win, t_idx = win[mask], t_idx[mask]
        ctxs.append(win)
        tgts.append(y[t_idx])
        seqs.append(np.full(len(t_idx), k, np.int64))
        poss.append(t_idx)
    if not ctxs:
        empty = np.zeros(0, np.int64)
        return Windows(np.zeros((0, context_len), np.int64), empty, empty, empty, len(pairs))
    return Windows(
        np.ascontiguousarray(np.concatenate(ctxs)),
        np.concatenate(tgts),
        np.concatenate(seqs),
        np.concatenate(poss),
        len(pairs),
    )


def token_logprobs(model: LmModel, w: Windows) -> Tensor:
    """log p(y_t | context) at every window, as a 1-D tensor."""
    return ad.pick(ad.log_softmax(model.logits(w.contexts)), w.targets)


def nll_loss(model: LmModel, prompt, target, mask=None) -> Tensor:
    """Mean negative log-likelihood over the masked target positions."""
    if mask is not None and not any(mask):
        raise EmptyLossError("mask selects no target positions")
    w = make_windows([(prompt, target)], model.config.context_len, masks=None if mask is None else [mask])
    if len(w.targets) == 0:
        raise EmptyLossError("target is empty")
    return ad.scale(ad.mean(token_logprobs(model, w)), -1.0)


def batch_nll_loss(model: LmModel, w: Windows) -> Tensor:
    """Per-sequence mean NLL, averaged over sequences."""
    if len(w.targets) == 0:
        raise EmptyLossError("no target positions in batch")
    counts = np.bincount(w.seq, minlength=w.n_seqs).astype(np.float64)
    present = counts > 0
    weights = np.zeros_like(counts)
    weights[present] = 1.0 / (counts[present] * present.sum())
    lp = token_logprobs(model, w)
    return ad.scale(ad.sum(ad.mul(lp, Tensor(weights[w.seq]))), -1.0)


def generate_greedy(model: LmModel, prompt: Sequence[int], max_new_tokens: int, eos: int = 2) -> list[int]:
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    return generate_batch(model, [prompt], [max_new_tokens], eos=eos)[0]


def generate_batch(
    model: LmModel,
    prompts: Sequence[Sequence[int]],
    budgets: Sequence[int] | int,
    eos: int = 2,
) -> list[list[int]]:
    """Greedy continuation of many prompts at once; each row stops at EOS or budget.

    Row results are identical to decoding each prompt alone.
    """
    n = len(prompts)
    if n == 0:
        return []
    if isinstance(budgets, int):
        budgets = [budgets] * n
    C = model.config.context_len
    ctx = np.stack([pad_context(p, C) for p in prompts]) if n else np.zeros((0, C), np.int64)
    out: list[list[int]] = [[] for _ in range(n)]
    alive = np.array([b > 0 for b in budgets])
    limit = np.array(budgets)
    while alive.any():
        idx = np.nonzero(alive)[0]
        logits = model.logits(ctx[idx]).data
        nxt = np.argmax(logits, axis=1)  # first max wins, i.e. lowest id
        for r, tok in zip(idx, nxt):
            tok = int(tok)
            if tok == eos:
                alive[r] = False
                continue
            out[r].append(tok)
            if len(out[r]) >= limit[r]:
                alive[r] = False
        ctx[idx] = np.concatenate([ctx[idx, 1:], nxt[:, None]], axis=1)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: LmModel, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Atomic write: magic, JSON header line, then raw little-endian float64 params."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": [[n, list(model.params[n].shape)] for n in PARAM_ORDER],
        "dtype": "<f8",
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for n in PARAM_ORDER:
        buf.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[LmModel, dict]:
    raw = Path(path).read_bytes()
    magic, rest = raw.split(b"\n", 1)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    head, body = rest.split(b"\n", 1)
    header = json.loads(head)
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    params, off = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(body):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    return LmModel(LmConfig(**header["config"]), params), header.get("meta", {})
