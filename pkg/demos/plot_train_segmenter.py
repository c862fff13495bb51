"""
Training the polar contour regressor
====================================

A small single-slice model trained on a handful of phantoms.  Each epoch
re-jitters the centre inside the lumen, so the network learns to find the
wall from off-centre viewpoints too.
"""

from polarring.contour import SliceGrid
from polarring.metrics import evaluate_pair, summarize
from polarring.phantom import PhantomConfig, generate_phantom
from polarring.pipeline import desk_model_config
from polarring.segmenter import build_model, predict, train, training_slices
from polarring.volume import normalize_intensity

phantoms = []
for seed in range(8):
    vol, truth = generate_phantom(PhantomConfig(seed=seed))
    phantoms.append((normalize_intensity(vol), truth))
train_set, test_set = phantoms[:6], phantoms[6:]

cfg = desk_model_config(mode="single", augment=True, epochs=8)
model, record = train(build_model(cfg), training_slices(train_set), cfg,
                      progress=lambda e: print("epoch", e["epoch"], "loss", round(e["loss"], 4)))
model.save("demo_model")

results = []
for vol, truth in test_set:
    grid = SliceGrid.from_volume(vol)
    v = truth.vessels[0]
    for k in v.slices[::4]:
        t = v.contour(int(k), truth.angles)
        results.append(evaluate_pair(predict(model, vol, t.center, int(k)), t, grid, str(k)))
summary = summarize(results)
print("median wall DSC", round(summary["dsc_wall"]["median"], 3))
print("median HD lumen / outer (mm)",
      round(summary["hd_lumen_mm"]["median"], 3), round(summary["hd_outer_mm"]["median"], 3))
