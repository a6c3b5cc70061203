"""Move a checkpoint to a different image or patch size.

Learned position tables are resized as grids; patch filters and the pixel
head are resized as images. Expects tiny.ckpt from 03_pretrain_tiny.py, or
trains a short one.
"""

from pathlib import Path

import numpy as np

from lsmae import checkpoint as C
from lsmae import model as M
from lsmae import training as T
from lsmae.masking import sample_mask
from lsmae.specs import derive_input_spec, derive_mask_plan
from lsmae.transfer import resample_checkpoint

if Path("tiny.ckpt").exists():
    ckpt = C.load("tiny.ckpt")
else:
    cfg = M.preset("tiny", 32, 4)
    plan = derive_mask_plan(cfg.spec, 2, 0.75)
    corpus = T.make_synthetic_corpus("checkers", 64, 32)
    ckpt, _ = T.pretrain(corpus, cfg.spec, plan, cfg, T.TrainConfig(epochs=2, crop="none"))

src = derive_input_spec(int(ckpt.meta["spec.I"]), int(ckpt.meta["spec.p"]))
for I, p in [(64, 4), (16, 2), (64, 8)]:
    dst = derive_input_spec(I, p)
    moved = resample_checkpoint(ckpt, src, dst)
    cfg = M.ViTMAEConfig.from_meta(moved.meta)
    plan = derive_mask_plan(dst, 2, 0.75)
    img = T.make_synthetic_corpus("checkers", 1, I, seed=5)[0]
    loss, _, _ = M.mae_forward_loss(img[None], [sample_mask(plan, 0, 0)],
                                    M.as_tensors(moved.params(), requires_grad=False), cfg)
    print(f"{src} -> {dst}: patch filters {moved.tensors['patch_embed.weight'].shape}, "
          f"loss {loss.item():.3f}, finite={np.isfinite(loss.item())}")
