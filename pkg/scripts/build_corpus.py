"""Regenerate the bundled byte-level training corpus.

The corpus is the concatenated docstrings of a fixed list of standard-library
modules, ASCII-filtered and cut to a target size. Output depends on the
interpreter version, which is why the generated file is committed.
"""
import argparse
import importlib
from pathlib import Path

MODULES = [
    "textwrap", "string", "json", "collections", "itertools", "functools", "pathlib",
    "argparse", "logging", "unittest", "email", "http.client", "urllib.parse", "csv",
    "datetime", "decimal", "fractions", "random", "statistics", "heapq", "bisect",
    "shutil", "tempfile", "subprocess", "threading", "queue", "socket", "zipfile",
    "tarfile", "gzip", "pickle", "copy", "pprint", "re", "difflib", "inspect", "ast",
    "dataclasses", "enum", "typing", "contextlib", "abc", "io", "os", "calendar",
    "hashlib", "hmac", "secrets", "uuid", "base64", "struct", "codecs", "locale",
    "gettext", "configparser", "sqlite3", "html", "mailbox", "smtplib", "ftplib",
    "imaplib", "poplib", "wave", "colorsys", "cmd", "shlex", "sched", "asyncio",
    "concurrent.futures", "multiprocessing", "selectors", "signal", "ssl", "operator",
    "numbers", "array", "weakref", "types", "glob", "fnmatch", "linecache", "tokenize",
    "dis", "trace", "timeit", "doctest", "warnings", "traceback", "platform",
]


def collect(size: int) -> bytes:
    chunks, seen = [], set()
    for name in MODULES:
        try:
            mod = importlib.import_module(name)
        except ImportError:
            continue
        docs = [mod.__doc__]
        for attr, obj in sorted(vars(mod).items()):
            if not attr.startswith("_") and getattr(obj, "__module__", None) == mod.__name__:
                docs.append(getattr(obj, "__doc__", None))
        for doc in docs:
            if doc and len(doc) > 40 and doc not in seen:
                seen.add(doc)
                chunks.append(doc.strip() + "\n\n")
    data = "".join(chunks).encode("ascii", "ignore")
    return data[:size]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=100_000)
    ap.add_argument("--out", default=str(Path(__file__).parents[1] / "src/pit/data/corpus.txt"))
    args = ap.parse_args()
    data = collect(args.size)
    Path(args.out).write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.out}")


if __name__ == "__main__":
    main()
