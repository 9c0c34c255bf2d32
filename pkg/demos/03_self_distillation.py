"""A short three-iteration self-distillation schedule, held in memory.

MFCC clusters teach a 4-layer model; its layer-1 clusters teach a second
4-layer model; PCA-compressed last-layer clusters of that model teach a
2-layer student initialised by averaging blocks of teacher layers.  The
step counts are cut down so this runs in about a minute; the bundled CLI
config uses 200 steps per iteration.
"""

# %%
import numpy as np

from selfdistill.corpus import Corpus, synth_corpus
from selfdistill.distill import IterationPlan, TrainConfig, run_iteration
from selfdistill.encoder import preset

corpus = Corpus(*synth_corpus(0, 64, 2.0, 4, n_tokens=16))
large, shallow = preset("tiny_large", n_labels=64), preset("tiny_shallow", n_labels=64)
plans = [
    IterationPlan(1, "mfcc", k=64, student=large, steps=80),
    IterationPlan(2, "teacher_layer", layer=1, k=64, student=large, steps=80),
    IterationPlan(3, "teacher_layer_pca", layer="last", pca_rank=16, k=64, student=shallow,
                  init="blocked_average", steps=80),
]

# %%
teacher, teacher_iteration = None, None
for plan in plans:
    res = run_iteration(plan, teacher, corpus, TrainConfig(), teacher_iteration=teacher_iteration)
    curve = [m["loss_total"] for m in res.metrics]
    print(f"iteration {plan.index}: {plan.target_source:<18} params {res.model.num_parameters():6d} "
          f"loss {curve[0]:.2f} -> {np.mean(curve[-10:]):.2f}  held-out masked acc {res.heldout['masked_acc']:.3f}")
    teacher, teacher_iteration = res.model, plan.index

# %% the last student against its teacher
print(f"dS {res.report.delta_s_percent:.1f}%, depth {res.report.axes['depth']}")
