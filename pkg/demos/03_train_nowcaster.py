"""
Training a small next-frame nowcaster
======================================

A one-layer ConvLSTM learns one-hour-ahead irradiance on a synthetic
sequence in which clouds drift one column per hour. The result is compared
with persistence (repeat the latest frame). Runs in about 20 seconds.
"""
import time

import numpy as np

from dsrnowcast.gridio import GridSequence, SyntheticParams, build_windows, generate_synthetic
from dsrnowcast.network import NetworkConfig, NowcastModel, predict_windows
from dsrnowcast.train import TrainConfig, running_best, train_model

seq = generate_synthetic(SyntheticParams(rows=32, cols=32, hours=240), seed=3)
split = 180
train_w = build_windows(GridSequence(seq.frames[:split]))
test_w = build_windows(GridSequence(seq.frames[split:]))
print("train windows:", len(train_w), "test windows:", len(test_w))

# inputs: normalized DSR plus 36 one-hot month/hour planes; 8 hidden channels
cfg = NetworkConfig(32, 32, horizon=1, layer_channels=(8,), kernel=(3, 3), input_channels=37)
model = NowcastModel.initialize(cfg, seed=0)
t = time.time()
result = train_model(model, train_w, TrainConfig(learning_rate=3e-3, batch_size=4, max_epochs=15, patience=15),
                     callback=lambda e, a, b: print("epoch %2d  train %.5f  val %.5f" % (e, a, b)))
print("trained in %.0fs; best epoch %d" % (time.time() - t, result.best_epoch))
print("running best validation loss:", np.round(running_best([h[2] for h in result.history]), 5))

pred = predict_windows(model, test_w)
truth = np.stack([w.targets[0].values for w in test_w])
persist = np.stack([w.inputs[-1].values for w in test_w])
rmse = lambda a, b: float(np.sqrt(np.mean((a - b) ** 2)))
print("t+1 RMSE  convlstm %.1f  persistence %.1f  W/m^2" % (rmse(pred, truth), rmse(persist, truth)))
