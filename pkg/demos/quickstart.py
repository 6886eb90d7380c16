"""Generate expert data, meta-train at desk scale, then meta-test.

    python demos/quickstart.py [steps]

About 40 s per 3000 steps on one CPU core.
"""
import sys

import numpy as np

from focal import datagen, pipeline

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
train, test = datagen.generate_split("sparse-point-robot", 8, 4, "expert", 50, seed=0)
cfg = pipeline.TrainConfig.desk_scale(training_steps=steps, eval_episodes=4)

enc, actor, critic, report = pipeline.meta_train(train, cfg, test)
print(report.summary_table())

own = pipeline.meta_test(enc, actor, test, cfg)
wrong = pipeline.meta_test(enc, actor, test, cfg, contexts=test[1:] + test[:1])
print("test return per task:", np.round(own, 2).tolist())
print(f"mean {np.mean(own):.2f}  with a wrong task's context {np.mean(wrong):.2f}")
