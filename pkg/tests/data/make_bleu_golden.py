"""Regenerate bleu_golden.json with NLTK (not a runtime or test dependency).

NLTK's sentence_bleu with a custom smoothing hook: an order with zero matches
gets 1 / (hypothesis n-gram count + 1), denominators floored at 1 by NLTK.
auto_reweigh spreads the weights over orders 1..len(hypothesis) when the
hypothesis is shorter than four tokens.
Run: python tests/data/make_bleu_golden.py
"""

import json
import random
from fractions import Fraction
from pathlib import Path

from nltk.translate.bleu_score import sentence_bleu


def add_one_on_zero(p_n, **_):
    return [p if p.numerator else Fraction(1, p.denominator + 1) for p in p_n]


def cases():
    yield "a b c d e".split(), "a b c d f".split()
    yield "x = 1 ;".split(), "x = 1 ;".split()
    yield ["a"], ["a", "b", "c"]
    yield ["q"], ["a", "b"]
    yield ["x"], ["x"]
    yield ["x", "y"], ["x", "y"]
    rng = random.Random(20240611)
    for _ in range(300):
        alphabet = rng.choice(["ab", "abc", "abcdef", "abcdefghij"])
        ref = [rng.choice(alphabet) for _ in range(rng.randint(1, 24))]
        if rng.random() < 0.3:
            # mostly-copied candidate so higher orders match
            cand = [t if rng.random() < 0.8 else rng.choice(alphabet) for t in ref]
            cand = cand[: rng.randint(1, len(cand))] + [rng.choice(alphabet) for _ in range(rng.randint(0, 4))]
        else:
            cand = [rng.choice(alphabet) for _ in range(rng.randint(1, 24))]
        yield cand, ref


def main():
    out = []
    for cand, ref in cases():
        score = sentence_bleu([ref], cand, smoothing_function=add_one_on_zero, auto_reweigh=True)
        out.append({"candidate": cand, "reference": ref, "bleu": float(score)})
    path = Path(__file__).with_name("bleu_golden.json")
    path.write_text(json.dumps(out, indent=0) + "\n", encoding="utf-8")
    print(f"wrote {len(out)} cases to {path}")


if __name__ == "__main__":
    main()
