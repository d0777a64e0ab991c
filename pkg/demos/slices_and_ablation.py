"""
Where does the model work, and which inputs matter?
===================================================

A slice report splits held-out accuracy by one categorical column, such as
school or gender. A feature ablation drops columns, reruns cross-validation
and reports the change in accuracy next to the fold spread.
"""

from comfortmtl import Hyperparams, encode, fit_encoder, fit_mtl, generate_synthetic
from comfortmtl.evaluation import DEFAULT_SLICE_AXES, feature_ablation, make_spec, slice_from_predictions

train_set = generate_synthetic(2000, seed=10)
held_out = generate_synthetic(2000, seed=11)

encoder = fit_encoder(train_set)
net, _ = fit_mtl(encoder, encode(encoder, train_set), Hyperparams(epochs=40, seed=0), train_set.schema)
pred = net.predict_indices(encoder.encode_matrix(held_out.records))

# The synthetic categories do not enter the latent score, so every slice
# should sit close to the overall accuracy.
for axis in DEFAULT_SLICE_AXES:
    rep = slice_from_predictions(held_out, axis, pred)
    spread = ", ".join(f"{t} {100 * rep.max_deviation(t):.1f}" for t in rep.tasks)
    print(f"{axis:11s} largest deviation from overall accuracy (pp): {spread}")

# Indoor temperature drives the latent score; the daily maximum does not.
report = feature_ablation(make_spec("mtl", Hyperparams(epochs=20)), train_set,
                          ["indoor_temp", "daily_max_temp"], k=3, seed=0)
print()
for feature in report.reports:
    deltas = ", ".join(f"{t} {report.delta(feature, t):+.3f}" for t in report.baseline.tasks)
    print(f"without {feature:15s} accuracy change: {deltas}")
print("fold spread of baseline accuracy:",
      ", ".join(f"{t} {report.baseline.std(t, 'accuracy'):.3f}" for t in report.baseline.tasks))
