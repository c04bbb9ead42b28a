"""Relative depth from video, metric scale from echoes.

1. Self-supervised DepthNet + PoseNet on corridor frame triples gives
   depth up to an unknown scale.
2. AVS-Net models trained on ambiguous pairs give pseudo-dense metric depth.
3. Each relative map is multiplied by median(pseudo) / median(relative).

    python3 demos/median_scaling.py [avs_steps] [selfsup_steps]
"""

import sys

import numpy as np

from echoscale import avsnet, metrics, pipeline, selfsup

avs_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
ss_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1000

echoes, rgb_only = pipeline.train_pair_models(
    pipeline.ambiguous_pairs(range(16)), pipeline.ambiguous_pairs(range(100, 104)), None,
    avsnet.TrainConfig(steps=avs_steps),
)
frames = pipeline.corridor_sequences(range(300, 340), 80)
rel_model = pipeline.train_relative(frames, frames[0].intrinsics, selfsup.SelfSupConfig(steps=ss_steps))

test = pipeline.corridor_sequences(range(400, 404), 50)[::5]
relative = rel_model.predict(np.stack([s.rgb for s in test]))
gts = [s.depth_gt for s in test]
rows, labels = [], []
for name, model in (("RGB-Echoes", echoes.model), ("RGB-only", rgb_only.model)):
    pseudo = avsnet.predict_dataset(model, pipeline.triplets(test))
    out = pipeline.scale_and_score(relative, pseudo, gts, "median")
    if not rows:
        rows.append(out.unscaled)
        labels.append("no scaling")
    rows.append(out.scaled)
    labels.append(f"median, {name} factors")
print(metrics.format_table(rows, labels, label_header="scaling"), end="")
