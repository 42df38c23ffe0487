#!/usr/bin/env python3
"""Fetch the published integer-embedding-tests question sets (the full
57-problem sequence-completion and 79-problem analogy collections) from
https://github.com/ryskina/integer-embedding-tests and convert anything
recognizable into the problem file formats used by `intembed eval`:

    completion: <t1>,<t2>,...,<tn>\t<answer>\t<source>
    analogy:    <a>\t<b>\t<c>\t<opt1>,<opt2>,...\t<answer>\t<source>

The upstream layout is outside our control; the converter handles
tab/comma-separated text files with those fields and otherwise leaves the
raw download in place for manual conversion. Usage:

    python scripts/fetch_question_sets.py [--dest DATA_DIR]
"""

import argparse
import io
import sys
import tarfile
import urllib.request
from pathlib import Path

REPO_TARBALL = "https://codeload.github.com/ryskina/integer-embedding-tests/tar.gz/refs/heads/main"
FALLBACK_TARBALL = "https://codeload.github.com/ryskina/integer-embedding-tests/tar.gz/refs/heads/master"


def download(url: str) -> bytes:
    print(f"downloading {url} ...")
    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read()


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data", help="destination directory")
    args = parser.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)

    try:
        blob = download(REPO_TARBALL)
    except Exception:
        blob = download(FALLBACK_TARBALL)
    raw_dir = dest / "integer-embedding-tests"
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        members = [m for m in tar.getmembers() if m.isfile()]
        for member in members:
            rel = Path(*Path(member.name).parts[1:])  # strip the repo prefix
            target = raw_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(tar.extractfile(member).read())
    print(f"extracted {len(members)} file(s) to {raw_dir}")

    converted = 0
    for path in sorted(raw_dir.rglob("*")):
        if path.suffix.lower() not in (".tsv", ".txt", ".csv"):
            continue
        name = path.name.lower()
        if "analog" in name:
            out = dest / "analogy_full.tsv"
        elif "sequence" in name or "completion" in name or "series" in name:
            out = dest / "completion_full.tsv"
        else:
            continue
        out.write_text(path.read_text(encoding="utf-8"), encoding="utf-8")
        print(f"copied {path.name} -> {out}")
        converted += 1
    if not converted:
        print(
            "no recognizable problem files found; inspect the download in\n"
            f"  {raw_dir}\n"
            "and convert manually to the formats documented above.",
            file=sys.stderr,
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
