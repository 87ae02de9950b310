"""Scan discriminator-guidance weights on a shifted Gaussian model.

Uses the analytic (optimal) discriminator, so the only error left is the
weighting itself. Prints raw-pixel FID for each (first-order, correction,
scale) triple next to the unguided baseline.
"""

import argparse

import numpy as np

from echolab.diffusion_core import GaussianDenoiser, NoiseSchedule
from echolab.guidance import AnalyticDiscriminator, GuidanceConfig
from echolab.metrics_fid import FeatureExtractor, FIDContext
from echolab.samplers import sample

GRID = [(0.25, 0, 2), (0.5, 0, 2), (1, 0, 1), (0.5, 0.5, 1), (1, 1, 1), (1, 0, 2), (2, 0, 2), (5, 0, 2)]


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--dim", type=int, default=8)
    parser.add_argument("--shift", type=float, default=0.2, help="norm of the model mean offset")
    parser.add_argument("--n", type=int, default=20_000)
    parser.add_argument("--steps", type=int, default=18)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()

    real = GaussianDenoiser(np.zeros(args.dim), 0.25)
    model = real.shifted(np.full(args.dim, args.shift / np.sqrt(args.dim)))
    disc = AnalyticDiscriminator(real, model)
    ctx = FIDContext.from_images(real.sample(args.n, np.random.default_rng(12345)), FeatureExtractor())
    edm = NoiseSchedule.edm()

    def mean_fid(cfg):
        runs = [sample("heun", model, edm, args.steps, args.n, s, disc if cfg else None, cfg).samples
                for s in range(args.seeds)]
        return np.mean([ctx.fid(x) for x in runs])

    print("w_first_order,w_correction,dg_scale,fid")
    print(f"unguided,,,{mean_fid(None):.4f}")
    for w1, w2, scale in GRID:
        print(f"{w1},{w2},{scale},{mean_fid(GuidanceConfig(w1, w2, scale)):.4f}")


if __name__ == "__main__":
    main()
