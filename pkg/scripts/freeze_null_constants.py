"""Regenerate the frozen null-variant effect constants in itecover.dgp.

Each constant is the population mean of the family's heterogeneous effect,
estimated from 10^6 covariate draws with the exact per-row theta functions.
Run and paste the printed table into NULL_EFFECT_CONSTANTS, bumping
NULL_CONSTANTS_VERSION.
"""

import numpy as np

from itecover import dgp

N_DRAWS = 1_000_000
SEED = 20260823


def main():
    print(f"# generated by scripts/freeze_null_constants.py, {N_DRAWS} draws, seed {SEED}")
    for family in dgp.FAMILIES:
        for index in (1, 2, 3, 4):
            spec = dgp.DgpSpec(family=family, dgp_index=index, n=N_DRAWS, seed=SEED)
            X = dgp._gen_covariates(spec, SEED)
            theta = dgp.theta_true(spec, X)
            se = theta.std(ddof=1) / np.sqrt(N_DRAWS)
            print(f'    ("{family}", {index}): {theta.mean():.6f},  # mc se {se:.2e}')


if __name__ == "__main__":
    main()
