"""Train only the context encoder on wind tasks and project embeddings to 2-D.

    python demos/embedding_pca.py [variant] [out.csv]

The CSV has one row per context batch: task_id, pc0, pc1.
"""
import sys

import numpy as np

from focal import analysis, datagen, pipeline

variant = sys.argv[1] if len(sys.argv) > 1 else "inverse-square"
out = sys.argv[2] if len(sys.argv) > 2 else "embedding_pca.csv"

train, _ = datagen.generate_split("point-robot-wind", 10, 0, "expert", 50, seed=0)
cfg = pipeline.TrainConfig.desk_scale(n_train_tasks=10, n_test_tasks=0, dml_variant=variant,
                                      streams=("dml",), eval_interval=0, training_steps=2000)
trainer = pipeline.MetaTrainer(train, cfg)
trainer.run()

table = analysis.EmbeddingTable.from_encoder(trainer.agent.encoder, train, cfg.batch_size, 8,
                                             np.random.default_rng(0), variant)
print(analysis.report_text(analysis.embedding_report({variant: table})), end="")
proj = analysis.pca_project(table, 2)
analysis.write_projection(out, proj)
print("explained variance ratio", np.round(proj.explained_ratio, 3).tolist(), "->", out)
