"""Train a small model on generated scenes and report COCO-style metrics.

``python3 demos/02_train_on_synthetic_scenes.py [epochs]``. The default of 8 epochs takes a
few minutes on one core; around 30 epochs are needed for the model to fit the scenes closely.
"""
import sys
import time

from circlesnake import CircleSnake, InstancePrediction, ModelConfig, Sample, evaluate
from circlesnake.data.synth import synth_dataset
from circlesnake.training import fit

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
scenes = synth_dataset(seed=100, scenes=20, n_instances=8)
cfg = ModelConfig(snake_width=64, lr=2e-3, epochs=epochs,
                  milestones=(int(epochs * 0.7), int(epochs * 0.9)), gamma=0.3)
samples = [Sample.from_polygons(s.image, list(zip(s.class_ids, s.polygons)), cfg, i)
           for i, s in enumerate(scenes)]

model = CircleSnake(cfg)
start = time.perf_counter()
result = fit(model, samples)
print(f"trained {epochs} epochs in {time.perf_counter() - start:.0f}s; "
      f"final loss {result.history[-1].total:.3f}")

# Score on the training scenes: this is a fitting check rather than a generalisation test.
truth = [[InstancePrediction(c, k, 1.0) for c, k in zip(s.circles, s.contours)] for s in scenes]
for iters, label in ((cfg.deform_iters, "with snake"), (0, "circles only")):
    preds = [model.predict(s.image, ct_score=0.2, deform_iters=iters)[1] for s in scenes]
    report = evaluate(preds, truth, "segm", compute_dice=True)
    print(f"\n{label}:")
    print(report.to_table())
