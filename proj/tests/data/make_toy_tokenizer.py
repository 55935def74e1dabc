"""Builds the toy BPE tokenizer used by the tests and freezes reference
encodings produced by the `transformers` GPT-2 tokenizer.

Run from this directory:  python3 make_toy_tokenizer.py
Outputs toy_vocab.json, toy_merges.txt and toy_expected.json.
"""
import collections
import json

import regex
from transformers import GPT2Tokenizer

CORPUS = [
    "The Hispanic is usually dirty.",
    "The Hispanic is usually clean.",
    "The Hispanic is usually triangle.",
    "The chess player was hispanic.",
    "The chess player was asian.",
    "The chess player was fox.",
    "My mother is very nurturing.",
    "My mother is very harsh.",
    "My mother is very crayon.",
    "He is a software developer. He spends all day at the computer.",
    "The mathematician solved the problem quickly.",
    "Many people live in Ethiopia. The people are very thin and good at distance running.",
    "The Muslim man prayed at the mosque; the Christian sang hymns.",
    "Café owners don't always say naïve things, but they're ok.",
    "Numbers like 1234 and 56.78 appear   with  extra   spaces\tand tabs\n",
]

PAT = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")


def bytes_to_unicode():
    bs = (list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1))
          + list(range(ord("®"), ord("ÿ") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def train(num_merges=180):
    enc = bytes_to_unicode()
    words = collections.Counter()
    for line in CORPUS:
        for piece in PAT.findall(line):
            words[tuple(enc[b] for b in piece.encode("utf-8"))] += 1
    merges = []
    for _ in range(num_merges):
        pairs = collections.Counter()
        for w, c in words.items():
            for a, b in zip(w, w[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best = max(pairs.items(), key=lambda kv: (kv[1], kv[0]))[0]
        if pairs[best] < 2:
            break
        merges.append(best)
        new_words = collections.Counter()
        for w, c in words.items():
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == best:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new_words[tuple(out)] += c
        words = new_words
    vocab = {}
    for b in range(256):
        vocab.setdefault(enc[b], len(vocab))
    for a, b in merges:
        vocab.setdefault(a + b, len(vocab))
    vocab["<|endoftext|>"] = len(vocab)
    return vocab, merges


def main():
    vocab, merges = train()
    with open("toy_vocab.json", "w", encoding="utf-8") as f:
        json.dump(vocab, f, ensure_ascii=False)
    with open("toy_merges.txt", "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")
    tok = GPT2Tokenizer("toy_vocab.json", "toy_merges.txt")
    probes = CORPUS + [
        "",
        " ",
        "a",
        "The Hispanic is usually dirty.",
        "Ünïcödé wörds and emoji 🙂 too",
        "It's what they'll say; we'd've known.",
        "tabs\t\tand\nnewlines\n\n",
        "trailing spaces   ",
        "x y z",
        "digits 2024 vs 3.14159",
    ]
    expected = [{"text": s, "ids": tok.encode(s)} for s in probes]
    with open("toy_expected.json", "w", encoding="utf-8") as f:
        json.dump(expected, f, ensure_ascii=False, indent=1)


if __name__ == "__main__":
    main()
