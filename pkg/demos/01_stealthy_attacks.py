"""Why residual-based bad data detection cannot see a perfect FDIA.

Walks through the 118-bus measurement model, the degree of a few buses, the
attack neighbourhood used for targeted blinding, and then shows that an
attack built from a column of H leaves the WLS residual untouched while a
random perturbation of the same size is caught.

    python demos/01_stealthy_attacks.py
"""
import numpy as np

from rdaegrid.attacks import MaskSampler, attack_neighborhood, contaminated_set, synth_fdia
from rdaegrid.estimation import NoiseModel, WlsEstimator, bdd_detect, calibrate_tau1
from rdaegrid.grid import build_observation_matrix, bus_degree, load_case

case = load_case("case118")
obs = build_observation_matrix(case)
print(f"{case.name}: m = {obs.m} measurements, {obs.n_states} states (reference bus {obs.reference_bus})")

degrees = {b: bus_degree(obs, b) for b in obs.state_buses}
lo = sorted(b for b, d in degrees.items() if d == min(degrees.values()))
hi = max(degrees, key=degrees.get)
print(f"least connected buses (degree {min(degrees.values())}): {lo}")
print(f"most connected bus: {hi} (degree {degrees[hi]})")

for bus in (93, 94):
    Ia, Na = contaminated_set(obs, bus), attack_neighborhood(obs, bus)
    print(f"bus {bus}: |I_a| = {len(Ia)}, blinding N_a removes {len(Na)}/{obs.m} = {len(Na) / obs.m:.2%}")

# noisy measurements around a random operating point
rng = np.random.default_rng(0)
noise = NoiseModel.uniform(obs.m, 0.01)
tau = calibrate_tau1(obs, noise, "empirical", 0.95, seed=1)
est = WlsEstimator(obs, noise)
z = obs.H @ rng.uniform(-0.1, 0.1, obs.n_states) + noise.sample(rng)
x_hat = est.estimate(z)

a = synth_fdia(obs, 49, 0.2, x_hat)
junk = rng.normal(size=obs.m)
junk *= np.linalg.norm(a) / np.linalg.norm(junk)
print(f"\nBDD threshold tau1 = {tau.tau1:.4f}")
print(f"clean residual      {est.residuals(z):.4f}  alarm={bdd_detect(z, obs, noise, tau)}")
print(f"perfect FDIA        {est.residuals(z + a):.4f}  alarm={bdd_detect(z + a, obs, noise, tau)}")
print(f"random, same norm   {est.residuals(z + junk):.4f}  alarm={bdd_detect(z + junk, obs, noise, tau)}")

# an availability attack on top: blind 10% of the meters, never the attacked ones
mask = MaskSampler(obs).mcar((0.1, 0.1), exclusions=contaminated_set(obs, 49), rng=rng)
print(f"\nMCAR mask blinds {int(mask.d.sum())} meters; overlap with the attacked rows: "
      f"{len(mask.indices & contaminated_set(obs, 49))}")
