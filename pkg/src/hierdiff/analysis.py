"""Frequency analysis of the denoising trajectory and the ablation harness."""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .policy import H3Policy, PolicyConfig, PolicyController, train
from .toyworld import WorldConfig, evaluate

log = logging.getLogger(__name__)

ATTAINMENT_LEVEL = 0.8


def dft_spectrum(chunk) -> np.ndarray:
    """Unnormalized one-sided DFT of ``(..., T_p, A)`` chunks along the time axis."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim < 2 or chunk.shape[-2] < 2:
        raise ValueError(f"chunks need shape (..., T_p, A) with T_p >= 2, got {chunk.shape}")
    return np.fft.rfft(chunk, axis=-2)


def dft_magnitude(chunk) -> np.ndarray:
    """``|X_k|`` per action dimension, bins ``0..T_p // 2``; shape ``(..., T_p // 2 + 1, A)``."""
    return np.abs(dft_spectrum(chunk))


@dataclass
class SpectrumTable:
    """Per-stage spectra averaged over action dimensions and sampled chunks.

    Stage rows run in denoising order, from ``t = tau_K`` (pure noise) down
    to ``t = 0``.  ``spectra`` keeps the complex per-sample transforms the
    attainment statistic needs.
    """

    taus: tuple[int, ...]
    mean: np.ndarray        # (stages, bins) mean |X|
    std: np.ndarray         # (stages, bins) std of |X| over samples and dims
    power: np.ndarray       # (stages, bins) mean |X|^2
    spectra: np.ndarray     # (stages, samples, bins, A) complex

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.mean.shape[1])

    @property
    def num_samples(self) -> int:
        return self.spectra.shape[1]

    def rows(self):
        for i, tau in enumerate(self.taus):
            for b in self.bins:
                yield (tau, int(b), float(self.mean[i, b]), float(self.std[i, b]), float(self.power[i, b]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "bin", "mean_magnitude", "std_magnitude", "mean_power"])
            for r in self.rows():
                w.writerow([r[0], r[1]] + [repr(v) for v in r[2:]])

    def attainment(self) -> np.ndarray:
        """``1 - mean|X_t - X_0| / mean|X_0|`` per (stage, bin), 1 at the final stage."""
        final = self.spectra[-1]
        err = np.abs(self.spectra - final).mean(axis=(1, 3))
        scale = np.abs(final).mean(axis=(0, 2))
        return 1.0 - err / np.maximum(scale, 1e-12)

    def attainment_stage(self, level: float = ATTAINMENT_LEVEL) -> np.ndarray:
        """Per bin, the first stage index (0 = pure noise) whose attainment reaches ``level``."""
        reached = self.attainment() >= level
        return np.argmax(reached, axis=0)

    def low_bin_fraction(self, bins: int = 2) -> np.ndarray:
        """Share of mean power in the lowest ``bins`` bins at every stage."""
        return self.power[:, :bins].sum(axis=1) / self.power.sum(axis=1)


def is_nondecreasing(x) -> bool:
    x = np.asarray(x)
    return bool(np.all(np.diff(x) >= 0))


def white_noise_power(T_p: int) -> float:
    """Expected ``|X_k|^2`` for standard-normal white noise: T_p in every bin."""
    return float(T_p)


def white_noise_band(T_p: int, bin_index: int, n: int, sigmas: float = 4.0) -> float:
    """Half-width of a ``sigmas``-standard-error band on the mean power of one bin over n draws.

    Bins 0 and T_p / 2 are real (power ~ T_p chi^2_1, std sqrt(2) T_p); the
    rest are complex (exponential, std T_p).
    """
    real = bin_index == 0 or (T_p % 2 == 0 and bin_index == T_p // 2)
    std = np.sqrt(2.0) * T_p if real else float(T_p)
    return sigmas * std / np.sqrt(n)


def _table_from_chunks(taus, chunks) -> SpectrumTable:
    spectra = dft_spectrum(np.stack(chunks))   # (stages, samples, bins, A)
    mag = np.abs(spectra)
    return SpectrumTable(
        taus=tuple(int(t) for t in taus),
        mean=mag.mean(axis=(1, 3)),
        std=mag.std(axis=(1, 3)),
        power=(mag ** 2).mean(axis=(1, 3)),
        spectra=spectra,
    )


def spectrum_evolution(policy: H3Policy, layers, proprio, rng: np.random.Generator,
                       num_chunks: int = 100, batch: int = 50, out_dir=None,
                       expert_chunks=None) -> SpectrumTable:
    """Sample chunks with tracing on and tabulate their spectra at every stage boundary.

    ``layers (n, T_o, L, H, W, 3)`` and ``proprio (n, T_o * Q)`` are
    observations cycled until ``num_chunks`` chunks are drawn.  With
    ``out_dir`` a CSV and a PNG are written; with ``expert_chunks`` the
    expert spectrum is added to the plot.
    """
    if getattr(policy, "trained_steps", 0) == 0:
        warnings.warn("spectrum_evolution on an untrained policy", RuntimeWarning, stacklevel=2)
    layers = np.asarray(layers)
    proprio = np.asarray(proprio, dtype=np.float64)
    if len(layers) == 0 or len(layers) != len(proprio):
        raise ValueError("need matching, nonempty observation and proprio arrays")
    taus = sorted(policy.stages.boundaries, reverse=True)
    per_tau: dict[int, list[np.ndarray]] = {t: [] for t in taus}
    drawn = 0
    while drawn < num_chunks:
        n = min(batch, num_chunks - drawn)
        pick = np.arange(drawn, drawn + n) % len(layers)
        _, tr = policy.plan(layers[pick], proprio[pick], rng, trace=True)
        seen = dict(zip(tr.steps, tr.chunks))
        missing = [t for t in taus if t not in seen]
        if missing:
            raise ValueError(f"sampler never visits stage boundaries {missing}; "
                             f"choose inference_steps so the stride divides them")
        for t in taus:
            per_tau[t].append(seen[t])
        drawn += n
    table = _table_from_chunks(taus, [np.concatenate(per_tau[t]) for t in taus])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "spectrum.csv")
        plot_spectrum(table, out / "spectrum.png", expert_chunks)
    return table


def plot_spectrum(table: SpectrumTable, path, expert_chunks=None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, tau in enumerate(table.taus):
        ax.plot(table.bins, table.mean[i], marker="o", label=f"t = {tau}")
    if expert_chunks is not None:
        ax.plot(table.bins, dft_magnitude(expert_chunks).mean(axis=(0, 2)), "k--", label="expert")
    ax.set_xlabel("frequency bin")
    ax.set_ylabel("mean |DFT|")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ablations -------------------------------------------------------------------

TABLE8 = ("H3DP", "w/o depth layering", "w/o hierarchical action", "w/o multi-scale")
N_SWEEP = (1, 2, 3, 4, 5, 6)


def ablation_grid(base: PolicyConfig) -> list[tuple[str, str, PolicyConfig]]:
    """``(table, label, config)`` for the four feature ablations and the layer-count sweep."""
    single = dict(resolutions=(base.resolutions[-1],), stage_fractions=(0.0, 1.0))
    grid = [
        ("table8", "H3DP", base),
        ("table8", "w/o depth layering", base.replace(N=1)),
        ("table8", "w/o hierarchical action", base.replace(hierarchical=False)),
        ("table8", "w/o multi-scale", base.replace(**single)),
    ]
    grid += [("table9", f"H3DP (N={n})", base.replace(N=n)) for n in N_SWEEP]
    return grid


def _config_key(cfg: PolicyConfig) -> str:
    d = cfg.to_dict()
    d.pop("seed")
    return repr(sorted(d.items()))


def _train_and_eval(job):
    cfg, episodes, world, eval_episodes, eval_seed = job
    policy = train(episodes, cfg).policy
    rate = evaluate(PolicyController(policy, seed=eval_seed), eval_episodes, seed=eval_seed, cfg=world)
    return rate, policy


def run_ablation(base: PolicyConfig, episodes, seeds: Sequence[int] = (0, 1, 2),
                 eval_episodes: int = 20, world: WorldConfig | None = None, out_csv=None,
                 grid=None, workers: int = 1,
                 progress: Callable[[str, int, float], None] | None = None,
                 policies: dict | None = None) -> list[dict]:
    """Train and evaluate every grid cell for every seed.

    Cells whose configs coincide (the full model and N=3, no layering and
    N=1) are trained once per seed and reported under both labels.
    Returns one row per grid entry with the per-seed success rates.  A
    ``policies`` dict is filled with the trained models keyed by
    ``(label, seed)``.
    """
    world = world or WorldConfig()
    grid = ablation_grid(base) if grid is None else grid
    episodes = list(episodes)
    unique: dict[str, PolicyConfig] = {}
    for _, _, cfg in grid:
        unique.setdefault(_config_key(cfg), cfg)
    jobs = [(key, seed) for key in unique for seed in seeds]
    payload = [(unique[k].replace(seed=s), episodes, world, eval_episodes, 1000 + s) for k, s in jobs]
    scores: dict[tuple[str, int], float] = {}
    models: dict[tuple[str, int], H3Policy] = {}

    def record(key, seed, out):
        scores[key, seed], models[key, seed] = out
        log.info("ablation cell seed %d: %.2f", seed, scores[key, seed])
        if progress is not None:
            progress(key, seed, scores[key, seed])

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for (key, seed), out in zip(jobs, pool.map(_train_and_eval, payload)):
                record(key, seed, out)
    else:
        for (key, seed), job in zip(jobs, payload):
            record(key, seed, _train_and_eval(job))
    if policies is not None:
        for _, label, cfg in grid:
            for s in seeds:
                policies[label, s] = models[_config_key(cfg), s]
    rows = []
    for table, label, cfg in grid:
        rates = [scores[_config_key(cfg), s] for s in seeds]
        rows.append({"table": table, "variant": label, "N": cfg.N, "K": cfg.K,
                     "hierarchical": cfg.hierarchical, "seeds": list(seeds), "success": rates,
                     "mean": float(np.mean(rates)), "std": float(np.std(rates))})
    if out_csv is not None:
        write_ablation_csv(out_csv, rows)
    return rows


def write_ablation_csv(path, rows: list[dict]) -> None:
    seeds = rows[0]["seeds"] if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "variant", "N", "K", "hierarchical"]
                   + [f"seed_{s}" for s in seeds] + ["mean", "std"])
        for r in rows:
            w.writerow([r["table"], r["variant"], r["N"], r["K"], r["hierarchical"]]
                       + [f"{x:.4f}" for x in r["success"]] + [f"{r['mean']:.4f}", f"{r['std']:.4f}"])


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sweep_peak(rows: list[dict]) -> int:
    """Layer count N with the best mean success in the sweep rows (lowest N on ties)."""
    sweep = sorted((r for r in rows if r["table"] == "table9"), key=lambda r: r["N"])
    if not sweep:
        raise ValueError("no N-sweep rows")
    best = max(r["mean"] for r in sweep)
    return next(r["N"] for r in sweep if r["mean"] == best)


def observation_sample(episodes, policy: H3Policy, n: int, rng: np.random.Generator):
    """``n`` random (layers, proprio, expert chunk) triples drawn from demonstration frames."""
    from .policy import TrainingSet

    data = TrainingSet.build(list(episodes), policy)
    idx = rng.choice(len(data), size=n, replace=n > len(data))
    return data.batch(idx)
