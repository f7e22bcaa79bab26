"""Generator and orthogonality batteries on the conforming LQ ensemble for
several step counts and seeds: pass fraction inside 3 SE and the largest |z|.

    python scripts/weakform_step_sweep.py --steps 25 50 100 --seeds 1 7 11 31
"""

import argparse

from relaxpa.measure import TimeGrid, build_intensity_grid, simulate_base_measure
from relaxpa.models import lq_hamiltonian, lq_model
from relaxpa.principal import LPolicy, constant_z, simulate_contract_controlled
from relaxpa.weakform import (
    GeneratorSpec,
    default_battery,
    discounted_split,
    generator_residual,
    joint_paths,
    orthogonality_residual,
)


def sweep(steps, seeds, n_paths):
    model = lq_model()
    hspec = lq_hamiltonian(model)
    gen = GeneratorSpec(model, hspec)
    for n_steps in steps:
        for seed in seeds:
            noise = simulate_base_measure(build_intensity_grid(16), TimeGrid(1.0, n_steps), 1, n_paths, seed)
            b = simulate_contract_controlled(model, hspec, 0.0, constant_z(1.0), LPolicy(), noise)
            split = discounted_split(model, b)
            jp = joint_paths(model, b, split)
            battery = default_battery(jp)
            g = generator_residual(gen, battery, jp)
            o = orthogonality_residual(gen, battery, jp, split.u_terminal)
            yield n_steps, seed, g.fraction_within(3.0), g.max_z(), o.fraction_within(3.0), o.max_z()


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, nargs="+", default=[25, 50, 100])
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 7, 11, 31])
    p.add_argument("--paths", type=int, default=10000)
    a = p.parse_args()
    print(f"{'steps':>5} {'seed':>5} {'gen in 3SE':>10} {'gen max|z|':>10} {'orth in 3SE':>11} {'orth max|z|':>11}")
    for n, s, gf, gz, of, oz in sweep(a.steps, a.seeds, a.paths):
        print(f"{n:5d} {s:5d} {gf:10.3f} {gz:10.2f} {of:11.3f} {oz:11.2f}")
