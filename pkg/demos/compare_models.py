"""
Shared network against single-task baselines
============================================

Every technique is scored with the same seeded k-fold plan, and the
encoder is refit inside each fold. The table reports fold-mean macro
precision, recall and F1 per task. The budget here is small so the
script finishes in about a minute; the acceptance suite runs the full
comparison.
"""

from comfortmtl import Hyperparams, cross_validate, generate_synthetic, make_spec
from comfortmtl.evaluation import render_table

survey = generate_synthetic(1500, seed=3)
hp = Hyperparams(epochs=30)

# "dnn" is the shared architecture trained on one vote at a time.
names = ["mtl", "dnn", "svm", "dt", "knn", "adaboost"]
reports = [cross_validate(make_spec(name, hp), survey, k=5, seed=1) for name in names]

print(render_table(reports))
print()
for r in reports:
    print(f"{r.name:15s} mean macro-F1 over tasks {r.objective():.4f}")

# The pooled confusion matrix of the comfort vote for the shared network.
mtl = reports[0]
print()
print("TCV confusion (rows true, columns predicted):")
for row in mtl.pooled["TCV"].confusion.to_list():
    print(" ".join(f"{v:4d}" for v in row))
