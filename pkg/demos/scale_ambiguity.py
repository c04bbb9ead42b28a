"""Identical images, different depths: the echo resolves the scale.

Trains an RGB-Echoes and an RGB-only model on ambiguous pairs (the second
scene of each pair is the first scaled by 2 with the same image) and
reports held-out pair-averaged Abs Rel. Any function of the image alone
cannot do better than 0.25 on these pairs.

    python3 demos/scale_ambiguity.py [steps]
"""

import sys

from echoscale import avsnet, pipeline

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
train = pipeline.ambiguous_pairs(range(16))
val = pipeline.ambiguous_pairs(range(100, 104))
test = pipeline.ambiguous_pairs(range(200, 208))

echoes, rgb_only = pipeline.train_pair_models(train, val, None, avsnet.TrainConfig(steps=steps))
print(f"RGB-Echoes pair Abs Rel: {pipeline.pair_abs_rel(echoes.model, test):.3f}")
print(f"RGB-only   pair Abs Rel: {pipeline.pair_abs_rel(rgb_only.model, test):.3f}")
