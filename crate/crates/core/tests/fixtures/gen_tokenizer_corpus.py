"""Freeze a 1000-document tokenizer parity corpus.

Documents are cut from text files already on disk (Python stdlib sources
and /usr/share docs) plus hand-written edge cases, then encoded with the
Hugging Face `tokenizers` byte-level BPE over the bundled GPT-2 assets.

    python3 gen_tokenizer_corpus.py  # writes tokenizer_corpus.jsonl
"""

import json
import os
import random
import sys
import sysconfig
from pathlib import Path

from tokenizers import Tokenizer, decoders, pre_tokenizers
from tokenizers.models import BPE

HERE = Path(__file__).resolve().parent
ASSETS = HERE.parent.parent / "assets" / "gpt2"
N_DOCS = 1000

EDGE_CASES = [
    "",
    " ",
    "   ",
    "\n",
    "\n\n\n",
    "\t\tindented\twith tabs",
    "Hello world",
    " Hello world",
    "Hello  world   with    runs     of      spaces",
    "trailing spaces   ",
    "  leading and trailing  ",
    "line one\nline two\r\nline three\r",
    "I'm you're he's we'll they'd I've don't",
    "IT'S ALL CAPS CONTRACTIONS DON'T",
    "numbers 1234567890 3.14159 1e-9 -42 0x1F",
    "punctuation!!! ??? ... ,,, ;;; ::: --- ___",
    "emoji 😀🎉👍🏽 and flags 🇺🇸🇯🇵",
    "日本語のテキストと中文文本 and 한국어",
    "Ünïcödé àccénts: naïve café résumé Zürich",
    "Ελληνικά κείμενο και русский текст",
    "mixed non-breaking thin​zero-width spaces",
    "math ∑ ∫ √ ∞ ≤ ≥ ≠ ∂ ∇ α β γ",
    "<|endoftext|> is plain text here",
    "URL https://example.com/path?query=1&x=y#frag",
    "email someone@example.org, handle @user, tag #topic",
    "code: fn main() { println!(\"{}\", x); }",
    "json {\"a\": [1, 2, 3], \"b\": null}",
    "Then, Mary and John went to the store. John gave a drink to",
    "Today, I need to buy the pen, the cup, and the ball. First, I will buy the ball, then the pen, and finally the",
    "a" * 300,
    " ".join(["word"] * 200),
    "\u0000control\u0007chars\u001b[0m",
]


def reference_tokenizer():
    bpe = BPE.from_file(str(ASSETS / "vocab.json"), str(ASSETS / "merges.txt"))
    tok = Tokenizer(bpe)
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    return tok


def source_files():
    roots = [Path(sysconfig.get_paths()["stdlib"]), Path("/usr/share/doc"), Path("/usr/share/common-licenses")]
    files = []
    for root in roots:
        if not root.exists():
            continue
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames[:] = sorted(d for d in dirnames if d not in {"site-packages", "__pycache__", "test", "tests"})
            for name in sorted(filenames):
                if name.endswith((".py", ".txt", ".md", ".rst")) or name in {"copyright", "README", "changelog"}:
                    files.append(Path(dirpath) / name)
    return files


def snippets(rng):
    files = source_files()
    rng.shuffle(files)
    out = []
    for path in files:
        try:
            text = path.read_text(encoding="utf-8")
        except (UnicodeDecodeError, OSError):
            continue
        if len(text) < 40:
            continue
        length = rng.choice([40, 120, 400, 1200])
        start = rng.randrange(0, max(1, len(text) - length))
        out.append(text[start : start + length])
        if len(out) + len(EDGE_CASES) >= N_DOCS:
            break
    return out


def main():
    rng = random.Random(0)
    tok = reference_tokenizer()
    docs = EDGE_CASES + snippets(rng)
    if len(docs) != N_DOCS:
        sys.exit(f"only found {len(docs)} documents")
    with open(HERE / "tokenizer_corpus.jsonl", "w", encoding="utf-8") as f:
        for text in docs:
            ids = tok.encode(text).ids
            assert tok.decode(ids) == text, repr(text)
            f.write(json.dumps({"text": text, "ids": ids}, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
