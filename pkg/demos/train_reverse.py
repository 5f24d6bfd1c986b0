"""Train a small joint model on the reverse task and compare decoding modes.

Takes a few minutes on one CPU core.

Run:  python demos/train_reverse.py [steps]
"""

import sys

from jointctc import (DecodeConfig, ModelConfig, SyntheticTaskSpec, TrainConfig, decode_corpus,
                      gen_corpus, init_params, train)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

spec = SyntheticTaskSpec(task="reverse", src_vocab=10, min_len=3, max_len=8, n_train=2000,
                         n_valid=100, n_test=100, seed=0)
data = gen_corpus(spec)
ex = data["train"][0]
print("source", ex.source, "-> target", ex.target)

cfg = ModelConfig(d_model=32, n_heads=4, d_ff=64, n_src_layers=1, n_adjust_layers=1,
                  n_tgt_layers=1, n_dec_layers=1, upsample_rate=2, src_vocab=spec.src_vocab,
                  tgt_vocab=spec.tgt_vocab)
tcfg = TrainConfig(peak_lr=3e-3, warmup_steps=200, epochs=100, max_steps=steps, eval_every=500)
res = train(init_params(cfg, 0), cfg, data["train"], data["valid"], tcfg)
print(f"best step {res.best_step}: greedy attention acc {res.best_valid.attn_acc:.3f}, "
      f"greedy CTC acc {res.best_valid.ctc_acc:.3f}")

modes = ["attn-only", "ctc-only", "joint-osync", "joint-isync", "attn-then-ctc-rescore",
         "ctc-then-attn-rescore"]
summary, _, _ = decode_corpus(res.params, cfg, data["test"], [DecodeConfig(m) for m in modes])
for row in summary:
    print(f"{row['mode']:22s} acc {row['accuracy']:.3f}  BLEU {row['bleu_display']:>6s}  "
          f"len ratio {row['length_ratio_display']}")
