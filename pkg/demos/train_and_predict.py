"""
Train one network for all three votes, then predict a new survey row
====================================================================

A single shared trunk learns the sensation, preference and comfort votes
together. The trained model is saved, reloaded and queried record by
record, exactly as the ``comfort predict`` and ``comfort serve`` commands
do.
"""

import tempfile
from pathlib import Path

import numpy as np

from comfortmtl import Hyperparams, encode, fit_encoder, fit_mtl, generate_synthetic, load_model, save_model
from comfortmtl.mtl import predict

# A seeded synthetic survey: indoor climate, clothing and weather features
# plus the three votes, all derived from one latent thermal score.
survey = generate_synthetic(2000, seed=0)
print(len(survey), "rows,", len(survey.schema.features), "features, tasks", survey.schema.task_names)

# The encoder standardizes numeric columns and one-hot encodes categories.
# It is fitted on training rows only.
encoder = fit_encoder(survey)
data = encode(encoder, survey)
print("encoded width:", data.X.shape[1])

# Train the shared network. Forty epochs keep the demo short.
net, history = fit_mtl(encoder, data, Hyperparams(epochs=40, seed=0), survey.schema)
print(f"loss after epoch 1: {history.loss[0]:.3f}, after epoch {len(history.loss)}: {history.loss[-1]:.3f}")

# Training accuracy per task.
pred = net.predict_indices(data.X)
for task in survey.schema.task_names:
    mask = data.y[task] >= 0
    print(f"{task} train accuracy {np.mean(pred[task][mask] == data.y[task][mask]):.3f}")

# Save and reload. The file carries a checksum that is verified on load.
path = Path(tempfile.mkdtemp()) / "model.json"
checksum = save_model(net, path)
model = load_model(path)
print("saved", path.name, "checksum", checksum[:12], "...")

# Predict one new record. Each task returns the scale value, its label and
# the full probability vector.
record = generate_synthetic(1, seed=99).records[0]
for task, p in predict(model, record).items():
    print(f"{task}: {p.value:+d} ({p.label}), p = {np.round(p.probs, 3).tolist()}")
