"""Corrupt a clean label set with rival labels, then invert the set distribution.

Run: python3 demos/corruption_and_recovery.py
"""

import numpy as np

from advpll import data, labelgen, transition
from advpll.transition import FlipProfile

c = 4
spec = data.default_mixture(c, d=8, separation=4.0, seed=0)
clean, _ = data.sample_mixture(spec, 20_000)
rival = transition.build_rival_matrix(c, k=c - 1, w=1.0 / (c - 1))
profile = FlipProfile(0.3, perturbation=0.02)

standard = labelgen.generate_standard(clean, profile, seed=0)
aware = labelgen.generate_adversary_aware(clean, rival, profile, seed=0)
print("standard corruption")
print("\n".join(labelgen.audit_generation(standard).lines()))
print("\nrival-label corruption")
print("\n".join(labelgen.audit_generation(aware).lines()))

# The exact set distribution for a class posterior p is Q* p. Recovering p
# from it only works when Q* has full column rank.
q_star = transition.enumerate_q_star(rival, profile)
p = np.array([0.1, 0.2, 0.3, 0.4])
est, residual = transition.recover_posterior(q_star, q_star @ p)
print(f"\nQ* shape {q_star.shape}, rank {np.linalg.matrix_rank(q_star)}")
print("true posterior     ", p)
print("recovered posterior", np.round(est, 12), f"residual {residual:.1e}")

narrow = transition.build_rival_matrix(4, k=2, w=0.5)
try:
    transition.recover_posterior(transition.enumerate_q_star(narrow, profile), q_star @ p)
except transition.RankDeficientError as exc:
    print(f"\nk=2 rival support on 4 classes is not invertible: {exc}")
