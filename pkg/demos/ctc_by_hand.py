"""CTC on a toy lattice, checked against brute-force path enumeration.

Run:  python demos/ctc_by_hand.py
"""

import numpy as np

from jointctc import PosteriorGrid, ctc_logprob, greedy_decode, viterbi_align
from jointctc.oracle import brute_ctc, brute_prefix_mass
from jointctc.prefix import outsync_extend, outsync_initial

rng = np.random.default_rng(0)

# 5 frames over {blank, 1, 2, 3}
grid = PosteriorGrid.random(rng, 5, 4)
print("frame posteriors (rows sum to 1):")
print(np.round(np.exp(grid.logp), 3))

y = (1, 2)
print(f"\nlog p({y}) forward  : {ctc_logprob(grid, y):.12f}")
print(f"log p({y}) enumerate: {brute_ctc(grid, y):.12f}")

best = viterbi_align(grid, y)
print(f"best alignment {best.z} with log-prob {best.logp:.4f}")
print("greedy decode:", greedy_decode(grid))

# prefix probabilities: how much mass starts with 1, with (1, 2), and ends right there
state = outsync_initial(grid.logp)
for c in y:
    state = outsync_extend(state, c, grid)
    print(f"prefix {state.prefix}: {state.pscore:.6f} (enumeration {brute_prefix_mass(grid, state.prefix):.6f})")
print(f"{y} + eos: {outsync_extend(state, 0, grid, eos_id=0):.6f}")
