"""
How the frequency content of a chunk appears during denoising
=============================================================

Trains the 16-step-chunk variant, then looks at the DFT of the partially
denoised chunk at each stage boundary.
"""
import numpy as np

from hierdiff.analysis import observation_sample, spectrum_evolution
from hierdiff.policy import spectral_config, train
from hierdiff.toyworld import generate_episodes

demos = generate_episodes(50, seed=0)
policy = train(demos, spectral_config(epochs=40, batch_size=32)).policy

rng = np.random.default_rng(0)
layers, q, expert = observation_sample(demos, policy, 200, rng)
table = spectrum_evolution(policy, layers, q, rng, num_chunks=200, out_dir="spectrum_demo", expert_chunks=expert)

np.set_printoptions(precision=2, suppress=True)
for tau, row in zip(table.taus, table.mean):
    print(f"t={tau:3d}", row)
print("attainment by stage and bin:\n", table.attainment())
print("first stage reaching 80%:", table.attainment_stage())
