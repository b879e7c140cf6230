"""
One semi-supervised episode, stage by stage
===========================================

Pretrain a small backbone on synthetic classes, sample a 5-way 1-shot
episode with an unlabeled pool, and follow recursive self-training:
pseudo-labels are cherry-picked per class, weighted by the soft weighting
network, and each stage starts from the classifier the last one ended on.
"""

import numpy as np

from lst.config import TrainConfig
from lst.core import MetaState, evaluate_episode
from lst.episodes import DatasetSpec, build_dataset, nearest_centroid_accuracy, sample_episode
from lst.model import pretrain_backbone

cfg = TrainConfig(n_classes=40, splits=(24, 8, 8), samples_per_class=150, pretrain_epochs=15,
                  distractors=0, sweep_distractors=(0, 1, 3))
data = build_dataset(DatasetSpec.from_config(cfg), cfg.seed)
print(f"{data.class_count} classes, nearest-centroid accuracy {nearest_centroid_accuracy(data):.3f}")

backbone = pretrain_backbone(data, cfg, seed=0)
print(f"backbone: train {backbone.train_accuracy:.3f}, held-out {backbone.heldout_accuracy:.3f}")

# meta-parameters before any meta-training: identity scale-shift, zero theta', random SWN
state = MetaState.initial(backbone, cfg)

episode = sample_episode(data, "test", cfg, seed=3)
print(f"support {len(episode.support_y)}, query {len(episode.query_y)}, unlabeled pool {len(episode.pool_ids)}")

for tag in ("supervised-only", "hard", "recursive-hard-soft", "fully-supervised"):
    run = evaluate_episode(episode, backbone, state, cfg, tag)
    pl = " ".join(f"{s.pseudo_accuracy:.2f}" for s in run.stages) if run.stages and tag != "supervised-only" else "-"
    print(f"{tag:22s} query accuracy {run.query_accuracy:.3f}   pseudo-label accuracy per stage: {pl}")

# averaged over a few episodes the ordering is easier to see
accs = {t: np.mean([evaluate_episode(sample_episode(data, "test", cfg, s), backbone, state, cfg, t).query_accuracy
                    for s in range(20)]) for t in ("supervised-only", "hard", "recursive-hard-soft")}
print({t: round(float(a), 3) for t, a in accs.items()})
