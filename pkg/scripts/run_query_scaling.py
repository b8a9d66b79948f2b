"""Oracle query counts of each optimizer as the number of blocks grows (untrained models)."""

import numpy as np

from parkflow.data import FeatureSample
from parkflow.model import ModelConfig, ModelParams
from parkflow.pricing import OptimizationRequest, gradient_optimize, greedy_optimize, one_shot_optimize


def main() -> None:
    rng = np.random.default_rng(0)
    print("N    oneshot  gradient  greedy")
    for N in (2, 4, 8, 16, 32):
        params = ModelParams.init(ModelConfig(N=N, dim_h_short=4, M=3, c_init=0.05, p_max=6.0), seed=N)
        sample = FeatureSample(rng.uniform(0, 1, (1, N)), rng.uniform(0, 1, (12, N)), np.full(N, 1.0), rng.uniform(0, 1, N))
        req = OptimizationRequest(sample, np.full(N, 0.7), (0.25, 6.0))
        q = [f(req, params).oracle_queries for f in (one_shot_optimize, gradient_optimize, greedy_optimize)]
        print(f"{N:<4d} {q[0]:<8d} {q[1]:<9d} {q[2]}")


if __name__ == "__main__":
    main()
