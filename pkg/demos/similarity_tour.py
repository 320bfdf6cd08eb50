"""A tour of the measurement layer: set similarity and its decompositions.

Everything here operates on plain 2-D arrays (rows = patch features or
primitive vectors, columns = channels); no training involved.

    python3 demos/similarity_tour.py
"""

import numpy as np

from compset import (
    allmatch_similarity,
    cka_rc,
    composition_score,
    linear_cka,
    match_decomposition,
    power_transform,
)

rng = np.random.default_rng(0)

print("-- similarity between row sets --")
x = rng.standard_normal((6, 16))  # 6 patches, 16 channels
z = rng.standard_normal((4, 16))  # 4 primitives
v = linear_cka(x, z)
print(f"linear_cka(x, z)          = {v:.6f}")
print(f"symmetric:   cka(z, x)    = {linear_cka(z, x):.6f}")
print(f"self:        cka(x, x)    = {linear_cka(x, x):.6f}")
print(f"scale-free:  cka(5x, z/3) = {linear_cka(5 * x, z / 3):.6f}")
perm = rng.permutation(16)
print(f"channel-permutation (joint): {linear_cka(x[:, perm], z[:, perm]):.6f}")

print()
print("-- the same number from the batch direction --")
print(f"cka_rc(x.T, z.T) = {cka_rc(x.T, z.T):.6f}  (equals linear_cka(x, z))")

print()
print("-- decomposition: who contributed what --")
dec = match_decomposition(x, z)
print(f"match weights shape {dec.weights.shape}, importance shape {dec.importance.shape}")
print(f"importances: {np.round(dec.importance, 4)}")
print(f"sum of importances = {dec.importance.sum():.6f}  (the score again)")

print()
print("-- power transform flattens dominant activations --")
spiky = np.array([[9.0, 0.1, 0.1, 0.1], [0.1, 9.0, 0.1, 0.1]])
for alpha in (1.0, 0.5):
    print(f"alpha={alpha}: first row -> {np.round(power_transform(spiky, alpha)[0], 3)}")
score = composition_score(spiky, rng.standard_normal((3, 4)), alpha=0.5, class_id=7)
print(f"composition_score: value={score.value:.4f} class={score.class_id} "
      f"({score.n_patches} patches vs {score.n_primitives} primitives)")

print()
print("-- plain cosine comparators for contrast --")
print(f"allmatch mean: {allmatch_similarity(x, z, 'mean'):+.6f}")
print(f"allmatch max:  {allmatch_similarity(x, z, 'max'):+.6f}")
