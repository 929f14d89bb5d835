"""
Training the loop without labels
================================

After a short supervised warm start, unlabeled scans train the regressor
through the closed loop: predicted correspondences are pushed through the
diffused model and compared with the scan, while every scan keeps its own
pose and shape code.

This is a scaled-down version of the supervision sweep used in the
acceptance tests (a few minutes on one core).
"""

from dataclasses import replace

from loopfit import experiments as E
from loopfit import sdf_diffusion as sd
from loopfit import synth
from loopfit import trainer as T

model = synth.make_toy_model()
grid = sd.build_grid(model, resolution=48)
data = E.standard_corpus(model, seed=0, n_labeled=5, n_unlabeled=15, n_test=5)
cfg = replace(T.TrainConfig(seed=0), joint_epochs=40)

# the same warm-started regressor feeds both runs, so only the unlabeled data differs
phi = E.warm_started(model, data, 5, cfg)
print("warm start only:",
      f"{T.evaluate(model, grid, phi, data.test).v2v_percent:.2f}% of body height")

for n_unlabeled in (0, 15):
    r = E.supervision_run(model, grid, data, 5, n_unlabeled, cfg, phi=phi)
    print(f"5 labeled + {n_unlabeled:2d} unlabeled: v2v {r.v2v_percent:.2f}%, "
          f"correspondence error {r.correspondence_error:.4f}")
