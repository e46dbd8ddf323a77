#!/usr/bin/env python3
"""End-to-end demo: corpus -> tokenizer -> teacher -> train -> eval -> sample.

Everything goes through the CLI entry points, so this doubles as a smoke
test of the command surface. Artifacts land in the chosen work dir.
"""

import argparse
import json
import sys
from pathlib import Path

from duolog.cli import main as cli


def run(argv):
    print("$ duolog " + " ".join(argv), file=sys.stderr)
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", default="runs/pipeline")
    ap.add_argument("--n-dialogs", type=int, default=200)
    ap.add_argument("--vocab-size", type=int, default=600)
    ap.add_argument("--teacher-steps", type=int, default=300)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    corpus = work / "corpus.jsonl"
    vocab = work / "tokenizer.vocab"
    teacher = work / "teacher.bin"
    out = work / "run"

    run(["corpus", "synth", "--seed", str(args.seed), "--n",
         str(args.n_dialogs), "--out", str(corpus)])
    run(["corpus", "stats", "--in", str(corpus)])
    run(["tokenizer", "train", "--in", str(corpus),
         "--vocab-size", str(args.vocab_size), "--out", str(vocab)])
    run(["make-teacher", "--corpus", str(corpus), "--vocab", str(vocab),
         "--out", str(teacher), "--steps", str(args.teacher_steps),
         "--lr", "5e-4", "--seed", str(args.seed)])
    run(["train", "--corpus", str(corpus), "--vocab", str(vocab),
         "--out-dir", str(out), "--steps", str(args.steps),
         "--seed", str(args.seed), "--lr", "5e-4",
         "--teacher-ckpt", str(teacher)])
    run(["eval", "--corpus", str(corpus), "--vocab", str(vocab),
         "--ckpt", str(out / "ckpt-final.bin"),
         "--out", str(work / "report.json"),
         "--manifest", str(out / "manifest.json")])
    run(["generate", "--corpus", str(corpus), "--vocab", str(vocab),
         "--ckpt", str(out / "ckpt-final.bin"),
         "--out", str(work / "samples.jsonl"), "--seed", str(args.seed)])

    report = json.loads((work / "report.json").read_text())
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
