"""
Train a layered diffusion policy on scripted demonstrations
===========================================================

About three minutes on one core.  Prints the loss curve and the closed-loop
success rate every ten epochs.
"""
import numpy as np

from hierdiff.policy import PolicyController, toy_config, train
from hierdiff.toyworld import ExpertController, RandomController, evaluate, generate_episodes

demos = generate_episodes(50, seed=0)
print("demo lengths:", [e.length for e in demos[:10]], "...")
print("expert", evaluate(ExpertController(), 20, seed=100), "random", evaluate(RandomController(0), 20, seed=100))

cfg = toy_config(epochs=40, batch_size=32, eval_every=10)
score = lambda policy: evaluate(PolicyController(policy, seed=0), 20, seed=100)
show = lambda row: print(row["epoch"], round(row["total_loss"], 3), row["eval_success_rate"])
result = train(demos, cfg, out_dir="run_demo", evaluator=score, progress=show)

# one planned chunk for the first demo frame
policy = result.policy
ep = demos[0]
layers = policy.layer_images(ep.rgb[:1], ep.depth[:1])
obs = np.stack([layers, layers], axis=1)
q = np.concatenate([ep.proprio[:1]] * 2, axis=1)
print("planned chunk:\n", policy.plan(obs, q, np.random.default_rng(0))[0].round(2))
print("expert chunk:\n", ep.actions[:cfg.T_p].round(2))
