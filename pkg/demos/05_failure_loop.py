"""The failure-driven augmentation loop on a pocket corpus.

Trains a planner briefly (so it still makes mistakes), collects its
collisions, walks the retrieve/diversify/generate/fine-tune pipeline with
a quickly trained generator, and prints the before/after collision table
plus the audit trail of what was retrieved and how captions were edited.
"""

import tempfile
from pathlib import Path

from mvdiff.denoiser import Denoiser, DenoiserConfig
from mvdiff.failure_loop import LoopConfig, run_loop
from mvdiff.planner import PlannerConfig, PlannerTrainConfig, corpus_samples, train_planner
from mvdiff.rng import RngStream
from mvdiff.sampler import TrainConfig, train
from mvdiff.scenegen import Corpus, GenSpec, corpus_build
from mvdiff.schedule import make_linear_schedule

work = Path(tempfile.mkdtemp(prefix="mvdiff-loop-"))
spec = GenSpec(n_frames=20)
corpus = Corpus(corpus_build(24, 8, seed=3, out_dir=work / "corpus", spec=spec, V=3, H=32, W=32))

gen_cfg = DenoiserConfig(base_channels=16, heads=2)
generator = Denoiser(gen_cfg, RngStream(0).fork("model-init"))
sched = make_linear_schedule(300, 1e-4, 0.03)
train(generator, corpus, TrainConfig(lr=2e-3, window=4, steps=120, seed=0), sched,
      log=lambda s: print("  gen", s))

planner = train_planner(corpus_samples(corpus, "train"),
                        PlannerTrainConfig(steps=150, batch=8, seed=1),
                        planner_cfg=PlannerConfig())
print("planner trained")

loop_cfg = LoopConfig(budget_frac=0.04, k=3, finetune_steps=120, seed=5,
                      gen_frames=13, gen_num_steps=6)
tuned, report = run_loop(planner, generator, sched, corpus, loop_cfg, out_dir=work / "loop")
print()
print(report.table())
print()
print("failure tags:", report.tag_histogram)
print("full audit trail in", work / "loop" / "loop_log.txt")
