"""Where in the spectrogram does the depth prediction look?

Trains a small RGB-Echoes model on bare-wall scenes whose image does not
change with distance, then locates the STFT frame with the largest input
gradient for walls at 1 to 6 m and compares it with the round-trip delay.

    python3 demos/saliency_time_of_flight.py
"""

import numpy as np

from echoscale import avsnet, pipeline
from echoscale.signal import delay_frame

rng = np.random.default_rng(7)
train = [pipeline.single_wall(d) for d in rng.uniform(0.7, 6.5, 48)]
cfg = avsnet.TrainConfig(steps=300, optimizer="adam", eval_every=0)
model = avsnet.train_avsnet(pipeline.triplets(train), None, cfg).model

print("distance  delay frame  saliency peak")
for d in range(1, 7):
    (peak,) = pipeline.saliency_peaks(model, [pipeline.single_wall(d)])
    print(f"{d:>6} m  {delay_frame(d):>11}  {peak:>13}")
