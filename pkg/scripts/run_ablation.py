#!/usr/bin/env python3
"""End-to-end context-length ablation over multiple seeds.

Generates the synthetic corpus, trains one model per (seed, context length),
evaluates bidirectional recall on the corpus, and prints a Panel-A-style
summary plus the convergence statistic (steps to reach loss ln(B)/2).

Usage:
    python scripts/run_ablation.py --seeds 1,2,3 --contexts 77,154,512 \
        --epochs 19 --out runs/ablation
"""

import argparse
import math
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from longctx.data import SyntheticSpec, generate_synthetic
from longctx.encoders import ImageEncoderConfig, TextEncoderConfig
from longctx.evaluation import recall_pair
from longctx.tokenizer import train_bpe
from longctx.trainer import TrainConfig, steps_to_loss, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--contexts", default="77,154,512")
    ap.add_argument("--epochs", type=int, default=19)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--learning-rate", type=float, default=2e-3)
    ap.add_argument("--vocab-size", type=int, default=1850)
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    contexts = [int(c) for c in args.contexts.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(seed=args.corpus_seed)
    corpus, _ = generate_synthetic(spec)
    vocab = train_bpe(corpus.captions(), args.vocab_size, args.corpus_seed)
    threshold = math.log(args.batch_size) / 2

    rows = ["seed,context,recall1_t2i,recall1_i2t,steps_to_half_lnB,train_seconds"]
    for seed in seeds:
        for context in contexts:
            cfg = TrainConfig(context_length=context, batch_size=args.batch_size,
                              max_epochs=args.epochs, seed=seed,
                              vocab_size=args.vocab_size,
                              learning_rate=args.learning_rate,
                              weight_decay=0.0, dtype="float32")
            text_cfg = TextEncoderConfig(context_length=context, vocab_size=vocab.size,
                                         embed_dim=48, num_layers=1, num_heads=2,
                                         output_dim=32)
            img_cfg = ImageEncoderConfig(input_dim=corpus.image_dim, hidden_dim=128,
                                         num_layers=2, output_dim=32)
            t0 = time.time()
            result = train(cfg, corpus, text_cfg=text_cfg, img_cfg=img_cfg, vocab=vocab)
            dt = time.time() - t0
            z_txt = result.model.encode_texts(corpus.captions(), batch_size=100)
            z_img = result.model.encode_images(corpus.images())
            t2i, i2t = recall_pair(z_img, z_txt, ks=(1,))
            steps = steps_to_loss(result.curve, threshold)
            rows.append(f"{seed},{context},{t2i.recalls[1]:.4f},"
                        f"{i2t.recalls[1]:.4f},{steps},{dt:.1f}")
            print(rows[-1], flush=True)

    (out / "ablation_summary.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out / 'ablation_summary.csv'}")


if __name__ == "__main__":
    main()
