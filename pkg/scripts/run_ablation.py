#!/usr/bin/env python3
"""Component ablation: full recipe vs single-component removals.

Trains the role pair under four configurations (full, -SPR, -teacher,
-discount) across several seeds, holding initialization, data order, and
the frozen teacher fixed per seed, then reports held-out perplexity
medians. The splits are stratified by dialog shape: students train on
four-turn dialogs, evaluation holds out the longest six-turn dialogs
(lengths past the training band, turn types that partially transfer),
and the teacher pretrains on everything else.
"""

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

from duolog.bpe import encode_dialog, train_bpe
from duolog.metrics import perplexity
from duolog.model import ModelConfig, RoleAlternatingModel
from duolog.seeding import derive_seed
from duolog.synth import generate_synthetic
from duolog.training import (TeacherHandle, TeacherPair, TrainConfig,
                             make_teacher, teacher_config, train)

VARIANTS = {
    "full": {},
    "no_spr": {"spr_enabled": False},
    "no_teacher": {"teacher_enabled": False},
    "no_discount": {"discount_enabled": False},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", default="runs/ablation")
    ap.add_argument("--n-dialogs", type=int, default=2000)
    ap.add_argument("--train-dialogs", type=int, default=200)
    ap.add_argument("--held-dialogs", type=int, default=200)
    ap.add_argument("--teacher-steps", type=int, default=800)
    ap.add_argument("--steps", type=int, default=250)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--gamma", type=float, default=0.5)
    ap.add_argument("--alpha0", type=float, default=0.5)
    ap.add_argument("--kl-direction", default="teacher_to_student")
    ap.add_argument("--lr", type=float, default=5e-4)
    args = ap.parse_args()

    work = Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)

    print("building the corpus", file=sys.stderr)
    corpus = generate_synthetic(seed=100, n_dialogs=args.n_dialogs)
    vocab = train_bpe(corpus, vocab_size=600)
    toks = [encode_dialog(vocab, d) for d in corpus]
    four = [td for td in toks if td.U == 4]
    six = sorted((td for td in toks if td.U == 6), key=lambda td: len(td.ids))
    train_split = four[:args.train_dialogs]
    held_split = six[-args.held_dialogs:]
    chosen = {id(td) for td in train_split} | {id(td) for td in held_split}
    teacher_tok = [td for td in toks if id(td) not in chosen]

    print("pretraining the teacher", file=sys.stderr)
    teacher_model = make_teacher(
        teacher_tok, teacher_config(vocab.size), seed=7,
        total_steps=args.teacher_steps, out_path=work / "teacher.bin",
        learning_rate=5e-4)
    teacher = TeacherPair(user=TeacherHandle(teacher_model.user_lm),
                          system=TeacherHandle(teacher_model.system_lm))
    print(f"teacher held-out ppl "
          f"{perplexity(teacher_model, held_split, side='both'):.3f}",
          file=sys.stderr)

    results: dict[str, list[float]] = {name: [] for name in VARIANTS}
    for seed in range(args.seeds):
        init_seed = derive_seed(seed, "ablation-model")
        run_seed = derive_seed(seed, "ablation")
        for name, overrides in VARIANTS.items():
            flags = dict(total_steps=args.steps, seed=run_seed,
                         gamma=args.gamma, alpha0=args.alpha0,
                         kl_direction=args.kl_direction,
                         learning_rate=args.lr, batch_size=8)
            flags.update(overrides)
            cfg = TrainConfig(**flags)
            model = RoleAlternatingModel.init(
                ModelConfig.desk(vocab.size, init_seed=init_seed))
            t0 = time.time()
            train(train_split, model,
                  teacher if cfg.teacher_enabled else None, cfg)
            ppl = perplexity(model, held_split, side="both")
            results[name].append(ppl)
            print(f"seed {seed} {name}: held-out ppl {ppl:.3f} "
                  f"({time.time() - t0:.0f}s)", file=sys.stderr)

    medians = {name: statistics.median(v) for name, v in results.items()}
    print(json.dumps({"per_seed": results, "median": medians},
                     indent=2, sort_keys=True))
    full = medians["full"]
    for name in ("no_spr", "no_teacher", "no_discount"):
        mark = "<=" if full <= medians[name] else "> (trend violated)"
        print(f"full {full:.3f} {mark} {name} {medians[name]:.3f}")
    (work / "results.json").write_text(
        json.dumps({"per_seed": results, "median": medians}, indent=2,
                   sort_keys=True))


if __name__ == "__main__":
    main()
