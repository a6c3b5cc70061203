"""How image size, patch size and mask size set the sequence lengths and the cost.

Run: python3 demos/01_sequence_geometry.py
"""

from lsmae import model as M
from lsmae.specs import derive_input_spec, derive_mask_plan, enumerate_fix_one_vary_two, estimate_flops

# The usual starting point: 224px images cut into 16px patches.
base = derive_input_spec(224, 16)
print(base)

# Doubling the image side quadruples L. With per-patch masking at 0.75 the
# encoder would see 196 scattered patches; masking 2x2 blocks keeps the same
# 196 visible patches but hides whole neighbourhoods, so the task stays hard.
long = derive_input_spec(448, 16)
for m in (1, 2, 4):
    plan = derive_mask_plan(long, m, 0.75)
    print(f"m={m}: U={plan.total_units:4d} units, L_e={plan.enc_len}, L_d={plan.dec_len}")

# Three ways to reach the same L=784
for spec in enumerate_fix_one_vary_two("L", 784, [224, 448, 672]):
    print("  ", spec)

# Rough per-image cost for a ViT-B sized model
for I, m, down in [(224, 1, False), (448, 2, False), (448, 2, True)]:
    cfg = M.preset("b", I, 16, decoder_downsample=down)
    plan = derive_mask_plan(cfg.spec, m, 0.75, down)
    cost = estimate_flops(cfg, plan)
    print(f"I={I} m={m} downsample={down}: encoder {cost.encoder_flops / 1e9:6.2f} G, "
          f"decoder {cost.decoder_flops / 1e9:6.2f} G")
