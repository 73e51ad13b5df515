# scripts/check_discretizers.py
#!/usr/bin/env python3
"""Total variation between the PDP / reflected-diffusion kernels and one-step Monte Carlo."""

import logging
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.oracles import discretizer_distance, sample_pdp_step, sample_reflected_step  # noqa: E402
from src.reference_models import pdp_parameters, pdp_reference, reflected_reference  # noqa: E402

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TV_TOLERANCE = 0.02


def main() -> int:
    n_samples = int(sys.argv[1]) if len(sys.argv) > 1 else 1_000_000
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()

    pdp = pdp_reference()
    params = pdp_parameters()
    coords = pdp.grid.coordinates
    pdp_tv = discretizer_distance(
        pdp.kernel.rows,
        lambda x: sample_pdp_step(params.flow, params.jump_rate, params.shift_map, params.noise_std,
                                  coords, coords[x], pdp.kernel.delta, n_samples, rng),
        list(range(pdp.grid.size)),
    )

    reflected = reflected_reference()
    coords_r = reflected.grid.coordinates
    reflected_tv = discretizer_distance(
        reflected.kernel.rows,
        lambda x: sample_reflected_step(lambda y: np.ones_like(y), (0.0, 1.0), coords_r, coords_r[x],
                                        reflected.kernel.delta, n_samples, rng),
        list(range(reflected.grid.size)),
    )

    print("\nDiscretizer fidelity (total variation per row)")
    print("-" * 50)
    for name, tv in (("pdp", pdp_tv), ("reflected", reflected_tv)):
        worst = max(tv, key=tv.get)
        print(f"{name:<10} max TV {tv[worst]:.4f} at state {worst}  (tolerance {TV_TOLERANCE})")
    print(f"elapsed {time.perf_counter() - t0:.1f} s")
    print("-" * 50)
    ok = max(pdp_tv.values()) <= TV_TOLERANCE and max(reflected_tv.values()) <= TV_TOLERANCE
    if not ok:
        logger.error("Discretizer fidelity above tolerance")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
