"""
One base session and one discovery session
===========================================

Four labeled classes train the classifier. Then two unlabeled classes arrive,
the classifier grows by two rows, and the session is scored after the
cluster indices are matched to ground truth.
"""

import numpy as np

from fea_cncd.dataio import SessionProtocol, SyntheticSpec, generate_synthetic, split_protocol
from fea_cncd.engine import TrainConfig, run_base_session, run_incremental_session
from fea_cncd.evalkit import avg_discovery, avg_forgetting

ds = generate_synthetic(SyntheticSpec(n_classes=6, d=16, train_per_class=200, test_per_class=50, seed=1))
base, novel = split_protocol(ds, SessionProtocol(base_classes=4, novel_per_session=[2]))
print("base classes:", base.classes, " novel classes:", novel.classes)

# the novel training split is feature-only
print("novel training handle:", type(novel.train).__name__, novel.train.n, "rows")

cfg = TrainConfig.desk()
state = run_base_session(cfg, base)
print("after base session: a =", state.ledger.rows[0])

state = run_incremental_session(state, novel)
print("after discovery:    a =", state.ledger.rows[1])
print("classifier rows:", state.model.classifier.n_classes)
print("cluster -> class:", state.ledger.permutations[1].mapping)
print("F_1 = %.2f  D_1 = %.2f" % (avg_forgetting(state.ledger, 1), avg_discovery(state.ledger, 1)))

# confusion over all six classes, rows are ground truth
ev = state.evaluations[-1]
print("labels:", ev.labels)
print(ev.confusion)

# stored prototypes: ground-truth for the base, predicted labels for the novel pair
for e in state.store.entries():
    print(e.class_id, e.source, "n=%d" % e.n, "mean var %.3f" % np.mean(e.var))
