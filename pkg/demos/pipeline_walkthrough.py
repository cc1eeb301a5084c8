"""End-to-end walk through the library API on a handful of synthetic videos.

The CLI does the same thing from a TOML file (see README); this script keeps
everything in memory so each stage can be inspected. A small model trains for
a few epochs, so expect rough proposals, not good ones.

    python demos/pipeline_walkthrough.py
"""

import numpy as np

from tapg.data import synth_generate
from tapg.inference import InferenceMode, MatchConfig, generate, to_result_entries
from tapg.labels import iou
from tapg.metrics import evaluate
from tapg.model import TAPGModel, TrainConfig, make_sample, train
from tapg.sampler import fibonacci_group
from tapg.transformer import TransformerConfig

T, C = 48, 8
videos = synth_generate(6, T, C, seed=1)
v = videos[0]
print(f"{len(videos)} videos of {T} snippets x {C} channels")
print(f"{v.video_id}: actions at {[(round(a.t_s, 1), round(a.t_e, 1)) for a in v.annotations]}")

cfg = TransformerConfig(d_model=32, n_heads=4, d_ff=64, n_layers=2, dropout_rate=0.0)
model = TAPGModel(C, T, fibonacci_group(T), cfg, sample_points=8, seed=1)
print(f"{len(model.windows)} sparse proposals per video, "
      f"{sum(p.data.size for p in model.parameters())} parameters")

samples = [make_sample(model, x.features, x.annotations) for x in videos]
s = samples[0]
print(f"boundary targets: {np.count_nonzero(s.G_s)} start / {np.count_nonzero(s.G_e)} end "
      f"snippets labelled, {int((s.G_c > 0.9).sum())} proposals with IoU > 0.9")

history = train(model, samples, TrainConfig(epochs=12, learning_rate=1e-3, decay_every=8, seed=1),
                on_epoch=lambda r: print(f"  epoch {r['epoch']:2d}  L={r['L']:.4f}"))
print(f"loss fell to {history[-1]['L'] / history[0]['L']:.0%} of the first epoch")

results, gts = {}, {}
for x in videos:
    props, factor = generate(model, x.features, InferenceMode("rescale", T), MatchConfig(score_floor=0))
    results[x.video_id] = to_result_entries(props, factor)
    gts[x.video_id] = [tuple(a) for a in x.annotations]

top = results[v.video_id][:3]
print(f"\ntop proposals for {v.video_id}:")
for r in top:
    best = max(iou(r["segment"], g) for g in gts[v.video_id])
    print(f"  [{r['segment'][0]:5.1f}, {r['segment'][1]:5.1f}]  score {r['score']:.3f}  best tIoU {best:.2f}")

report = evaluate(results, gts)
print("\n" + "  ".join(f"{k}={report[k]:.3f}" for k in ("AR@1", "AR@10", "AR@100", "AUC")))
