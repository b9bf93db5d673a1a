"""
The pixel-wise linear baseline
===============================

A ridge regression maps the 3-hour neighbourhood of each pixel to its next
value, with one set of weights shared by every pixel. We fit it on a small
patch for a few ridge strengths and score it against persistence.
"""
import numpy as np

from dsrnowcast.baseline import extract_patch_samples, fit_linear, patch_region, persistence, predict_linear
from dsrnowcast.gridio import GridSequence, SyntheticParams, generate_synthetic

seq = generate_synthetic(SyntheticParams(rows=40, cols=40, hours=300, velocity=(0.0, 1.0)), seed=5)
train, test = GridSequence(seq.frames[:220]), GridSequence(seq.frames[220:])

patch = 9
X, y, index = extract_patch_samples(train, patch_size=patch, max_samples=30_000, seed=0)
print("design matrix:", X.shape, "(features = 3 hours x %d x %d)" % (patch, patch))

r0, r1, c0, c1 = patch_region(seq.shape, patch)


def score(model):
    errs = []
    for t in range(2, len(test) - 1):
        truth = test[t + 1].values[r0:r1, c0:c1]
        errs.append(np.mean((predict_linear(model, test, t=t).values[r0:r1, c0:c1] - truth) ** 2))
    return float(np.sqrt(np.mean(errs)))


# neighbouring pixels of smooth cloud fields are nearly collinear, so the
# ridge strength decides how the weight is spread over the patch
for ridge in (1e-3, 1e-1, 10.0):
    model = fit_linear(X, y, ridge=ridge)
    w = model.weights.reshape(3, patch, patch)
    print("ridge %-6g weight per hour (oldest first) %s  intercept %5.1f W/m^2  test RMSE %.1f"
          % (ridge, np.round(w.sum(axis=(1, 2)), 2), model.intercept * model.normalization.dsr_max,
             score(model)))

err_per = []
for t in range(2, len(test) - 1):
    truth = test[t + 1].values[r0:r1, c0:c1]
    err_per.append(np.mean((persistence(test, t, (1,))[0].values[r0:r1, c0:c1] - truth) ** 2))
print("persistence test RMSE %.1f W/m^2" % np.sqrt(np.mean(err_per)))
