"""Sample a few masks and paint them onto a synthetic image.

Writes mask_m1.ppm, mask_m2.ppm and mask_m4.ppm into the working directory.
"""

import numpy as np

from lsmae.imaging import write_ppm
from lsmae.masking import mask_to_preview, sample_mask
from lsmae.specs import derive_input_spec, derive_mask_plan
from lsmae.training import make_synthetic_corpus

img = make_synthetic_corpus("gaussian-blobs", 1, 64, seed=4)[0]
spec = derive_input_spec(64, 4)  # 16x16 grid, L=256

for m in (1, 2, 4):
    plan = derive_mask_plan(spec, m, 0.75)
    a = sample_mask(plan, rng_seed=0, sample_id=0)
    print(f"m={m}: {plan.masked_units} of {plan.total_units} units hidden, "
          f"{len(a.visible_patch_indices)} patches reach the encoder")
    print("   first unit row:", "".join(np.where(a.unit_mask[0], "#", ".")))
    write_ppm(f"mask_m{m}.ppm", mask_to_preview(a, img))

# A mask depends only on (seed, epoch, sample id): any worker can rebuild it.
plan = derive_mask_plan(spec, 2, 0.75)
same = sample_mask(plan, 0, 7, epoch=3).unit_mask == sample_mask(plan, 0, 7, epoch=3).unit_mask
print("reproducible:", bool(same.all()))
