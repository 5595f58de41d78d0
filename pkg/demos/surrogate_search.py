"""
Evolving a loss against a cheap surrogate
=========================================

Training a classifier per candidate is slow, so this demo scores trees by
how far their binary landscape is from NGL's.  The GP machinery is the same
one the real search uses.
"""
import numpy as np

from lossforge import gp
from lossforge.fitness import LandscapeDistance, binary_landscape

oracle = LandscapeDistance()
config = gp.GpConfig(population_size=16, generations=40, seed=1)


def show(rec):
    if rec.generation % 5 == 0:
        print(f"gen {rec.generation:3d}  rms {rec.best_fitness.error:8.4f}  "
              f"rejected {rec.rejections:2d}  {rec.best_formula}")


best, history = gp.run(config, oracle, on_record=show)

print("\nbest tree:", best.formula)
print("size", best.size, "height", best.height)

# compare a few points of the winner's curve with the target
grid = np.linspace(0.0, 1.0, 6)
target = np.interp(grid, oracle.grid, oracle.target)
found = binary_landscape(best.expr, grid)
for p, a, b in zip(grid, target, found):
    print(f"p={p:.1f}  target {a:8.4f}  found {b:8.4f}")

# selection is elitist
print("\nhistory has", len(history), "records; best fitness never got worse:",
      all(a.best_fitness.error >= b.best_fitness.error
          for a, b in zip(history.records, history.records[1:])))
