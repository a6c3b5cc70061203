"""Pre-train the tiny model on checker textures and look at a reconstruction.

About ten seconds on one CPU core. Writes tiny.ckpt, tiny.log and recon.ppm.
"""

import numpy as np

from lsmae import checkpoint as C
from lsmae import model as M
from lsmae import training as T
from lsmae.cli import triptych
from lsmae.imaging import write_ppm
from lsmae.masking import mask_to_preview, sample_mask
from lsmae.specs import derive_mask_plan

cfg = M.preset("tiny", 32, 4)
plan = derive_mask_plan(cfg.spec, 2, 0.75)
print(f"{M.count_params(cfg)} parameters; encoder sees {plan.enc_len} of {plan.seq_len} patches")

corpus = T.make_synthetic_corpus("checkers", 256, 32, seed=0)
tcfg = T.TrainConfig(epochs=25, batch_size=32, base_lr=3e-3 * 256 / 32, warmup_epochs=1.25,
                     crop="none", flip=True, seed=0)
ckpt, log = T.pretrain(corpus, cfg.spec, plan, cfg, tcfg)
losses = log.losses
print(f"loss: first 50 steps {losses[:50].mean():.3f}, last 50 steps {losses[-50:].mean():.3f}")

C.save(ckpt, "tiny.ckpt")
log.write("tiny.log")

# Reconstruct a held-out image with a fresh mask
img = T.make_synthetic_corpus("checkers", 1, 32, seed=123)[0]
a = sample_mask(plan, rng_seed=99, sample_id=0)
params = M.as_tensors(ckpt.params(), requires_grad=False)
recon = M.reconstruct(img, a, params, cfg)
hidden = np.repeat(np.repeat(a.patch_mask().reshape(8, 8), 4, 0), 4, 1)
err = np.abs(recon - img)[hidden].mean()
print(f"mean abs error on hidden pixels: {err:.3f}")
write_ppm("recon.ppm", triptych([img, mask_to_preview(a, img), recon]))
