"""
Binary-reduction landscapes of the catalog losses
=================================================

With two classes a loss collapses to a curve in p = y_pred[0].
Cross-entropy keeps falling all the way to p = 1.  NGL bottoms out
well before that and rises again near certainty.
"""
import numpy as np

from lossforge import analysis
from lossforge.losses import builtin

names = ["ce", "ngl", "f1", "f2", "f3", "f4"]

# sample every curve at true label y_real = (1, 0)
curves = {n: analysis.sample_landscape(builtin(n), y_real_fixed=1) for n in names}
reports = {n: analysis.analyze(c) for n, c in curves.items()}

print(f"{'loss':<6}{'argmin':>9}{'min':>12}  shape")
for n, rep in reports.items():
    rise = " (rises near p=1)" if rep.increase_near_1 else ""
    print(f"{n:<6}{rep.argmin:>9.4f}{rep.min_value:>12.4f}  {rep.shape}{rise}")

# a coarse text plot of NGL against CE, both shifted to start at zero
print("\np      ngl-ngl(0)   ce-ce(0.001)")
ngl, ce = curves["ngl"], curves["ce"]
for k in range(1, 1001, 100):
    print(f"{ngl.grid[k]:.2f}  {ngl.values[k] - ngl.values[0]:>10.4f}"
          f"  {ce.values[k] - ce.values[1]:>12.4f}")

# the gradient changes sign at the minimum, so plain gradient descent on the
# prediction stops short of certainty
k = int(np.argmin(ngl.values))
print(f"\nNGL gradient just below / above the minimum: "
      f"{ngl.gradient_values[k - 5]:+.4f} / {ngl.gradient_values[k + 5]:+.4f}")

# the same curve for the other label is the mirror image
mirror = analysis.analyze(analysis.sample_landscape(builtin("ngl"), y_real_fixed=0))
print(f"NGL argmin for y_real = (0, 1): {mirror.argmin:.4f}"
      f" = 1 - {1 - mirror.argmin:.4f}")
