"""Walk through the numerical checks that back the implementation.

Run: python3 demos/verification_tour.py
"""

from advpll import transition, verify
from advpll.transition import FlipProfile

for rep in verify.run_suite("fast"):
    print(f"== {rep.name}")
    for line in rep.lines():
        print("  ", line)

# The risk gap vanishes only when there is no corruption at all; with flips
# and rivals it is a measured quantity, printed per configuration.
probe = verify.risk_probe(seed=0)
for row in probe.table:
    print(f"c={row['c']} q={row['q']}: max |R_hat - R| = {row['max_deviation']:.4f}")

# A single short point on the consistency ladder.
settings = verify.LadderSettings(epochs=10)
match, tv = verify.consistency_point(3, transition.build_rival_matrix(3, 2, 0.5),
                                     FlipProfile(0.3), 2000, 0, settings)
print(f"n=2000, 10 epochs: Bayes-match {match:.3f}, mean TV to the true posterior {tv:.3f}")
