"""Print sampler error vs step count on Gaussian data and the fitted log-log slope."""

import argparse

import numpy as np

from echolab.diffusion_core import GaussianDenoiser, NoiseSchedule, sigma_steps
from echolab.samplers import initial_noise, integrate, nfe_for


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dim", type=int, default=4)
    parser.add_argument("--n", type=int, default=200)
    parser.add_argument("--reference-steps", type=int, default=10_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal((args.dim, args.dim))
    d = GaussianDenoiser(rng.standard_normal(args.dim), a @ a.T / args.dim + 0.1 * np.eye(args.dim))
    edm = NoiseSchedule.edm()
    x0 = edm.sigma_max * initial_noise(args.seed, args.n, (args.dim,))
    ref, _ = integrate(d, sigma_steps(edm, args.reference_steps), x0.copy(), "heun")

    steps = [5, 10, 20, 40, 80, 160, 320]
    print("method,steps,nfe,rms_error")
    for method in ("euler", "heun"):
        errs = []
        for n in steps:
            x, _ = integrate(d, sigma_steps(edm, n), x0.copy(), method)
            errs.append(float(np.sqrt(np.mean((x - ref) ** 2))))
            print(f"{method},{n},{nfe_for(n, method)},{errs[-1]:.3e}")
        slope = np.polyfit(np.log(steps[1:-1]), np.log(errs[1:-1]), 1)[0]
        print(f"# {method} slope {slope:.2f}")


if __name__ == "__main__":
    main()
