"""Both joint searches on a hand-made scorer pair, next to the exhaustive answer.

The attention side is a seeded random next-token table; the CTC side a random
posterior lattice.  With a beam wide enough to hold everything, both searches
must land on the exhaustive argmax.

Run:  python demos/joint_search_toy.py
"""

import numpy as np

from jointctc import DecodeConfig, PosteriorGrid, decode
from jointctc.oracle import SyntheticAttention, exhaustive_joint_argmax

rng = np.random.default_rng(3)
grid = PosteriorGrid.random(rng, 4, 4)
attn = SyntheticAttention(4, seed=3, eos_bias=-0.5)

for lam in (0.0, 0.3, 0.7, 1.0):
    best, score, table = exhaustive_joint_argmax(grid, attn, lam, max_len=4)
    print(f"ctc_weight={lam}: exhaustive argmax {best} score {score:.4f} ({len(table)} candidates)")
    for mode in ("joint-osync", "joint-isync"):
        if mode == "joint-isync" and lam == 0:
            continue
        for b in (1, 3, 300):
            dc = DecodeConfig(mode, beam_size=b, prebeam=min(b, 300), ctc_weight=lam)
            r = decode(grid, attn, dc, max_len=4)
            print(f"  {mode:12s} beam {b:3d}: {str(r.tokens):12s} {r.best.joint_score:.4f} "
                  f"({r.logadds} log-adds)")
