"""In-context digit classification with one-hot outputs.

Every training episode shuffles pixels and class labels, so the model cannot
memorize digits and has to read the context. Test episodes use the original
pixel order and labels on held-out images.
"""
import sys

from transducer.classification import digits_model_config, evaluate_classifier, load_digits_task, train_classifier
from transducer.training import TrainConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

task = load_digits_task()
train_part, test_part = task.split(1200, seed=0)
mc = digits_model_config()
tc = TrainConfig(steps=steps, context_range=(50, 100), query_count=20, lr=5e-4)
res = train_classifier(train_part, mc, tc, callback=lambda r: print(f"  step {r.step}  loss {r.curve.losses[-1]:.4f}"),
                       callback_every=max(steps // 5, 1))
for label, kw in (("identity", {}), ("permuted", dict(pixel_perm_seed=1, class_perm_seed=2))):
    rep = evaluate_classifier(res.params, mc, test_part, 100, 50, episodes=10, **kw)
    print(f"{label:>9}: accuracy {rep.accuracy:.3f} (chance {rep.chance})")
