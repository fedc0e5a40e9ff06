"""A small LSTM-RDAE end to end, in memory.

Generates two weeks of 14-bus measurements, trains a recurrent denoising
autoencoder for a few epochs, calibrates one threshold per missing-ratio
bucket on the validation windows and scores clean and attacked test
windows. Takes a couple of minutes on one core; the numbers are far from a
converged model but the mechanics are all there.

    python demos/02_desk_detector.py
"""
import numpy as np

from rdaegrid.attacks import AttackScenario
from rdaegrid.detector import calibrate_thresholds, decide, score
from rdaegrid.experiment import DataConfig, ModelConfig, build_model, generate_data
from rdaegrid.nn import TrainConfig, train

ds = generate_data(DataConfig(train_days=12, test_days=2), seed=1)
print(f"{ds.obs.m} measurements, {ds.series.Z_raw.shape[1]} five-minute steps, "
      f"load scaled by {ds.series.meta['load_factor']:.3f} to fit generation")

model = build_model(ModelConfig(), ds.obs.m, ds.T, seed=2, scaler=ds.scaler)
print("layer widths", model.sizes)
model, hist, _ = train(model, ds.windows("train"), TrainConfig(epochs=15, learning_rate=1e-3, seed=3),
                       ds.windows("val"))
print(f"loss after {model.epochs_trained} epochs: train {hist.train_loss[-1]:.5f}, val {hist.val_loss[-1]:.5f}")

ctx = ds.context()
table = calibrate_thresholds(model, ds.windows("val"), alpha=0.95, seed=4, sampler=ctx.sampler)
for g, t in zip(table.gammas, table.taus):
    print(f"  bucket gamma={g:.2f}: tau2={t:.5f}")


def scaled(raw):
    return ds.scaler.apply(raw.transpose(1, 0, 2)).transpose(1, 0, 2)


rng = np.random.default_rng(5)
n_test = ds.series.Z_raw.shape[1] - ds.train_steps - ds.T + 1
wins = rng.integers(0, n_test, 300)
clean = scaled(np.stack([ctx.window_raw(int(w)) for w in wins]))
print(f"\nclean test windows flagged: {decide(score(model, clean), np.zeros(300), table).mean():.1%}")

for mu, gamma, steps in [(0.05, 0.0, 1), (0.2, 0.0, 1), (0.1, 0.2, 1), (0.1, 0.2, 3)]:
    scen = [AttackScenario(k, "combined" if gamma else "fdia", int(w), int(rng.choice(ds.obs.state_buses)),
                           mu * rng.choice([-1, 1]), steps, gamma, "mcar" if gamma else "none", k)
            for k, w in enumerate(wins)]
    raw = np.stack([ctx.apply(s) for s in scen])
    masks = np.vstack([s.mask.d for s in scen])
    alarms = decide(score(model, scaled(raw), masks), masks.mean(axis=1), table)
    print(f"|mu|={mu:.2f} gamma={gamma:.1f} steps={steps}: detected {alarms.mean():.1%}")
