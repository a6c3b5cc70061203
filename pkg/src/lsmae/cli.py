"""``lsmae`` command line: spec tables, mask previews, pre-training,
reconstructions, checkpoint resampling and corpus ingestion.

Exit codes: 0 on success, 1 on a runtime/geometry error, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import imaging
from . import model as M
from . import training as T
from .checkpoint import CheckpointError
from .masking import mask_to_preview, sample_mask
from .specs import GeometryError, derive_input_spec, derive_mask_plan, enumerate_fix_one_vary_two, estimate_flops
from .transfer import IncompatibleCheckpointError, resample_checkpoint

SEPARATOR_PX = 2

log = logging.getLogger("lsmae")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _spec_pair(text: str):
    vals = _csv_ints(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected I,p, got {text!r}")
    return derive_input_spec(*vals)


def _add_geometry(p: argparse.ArgumentParser, image_default=None) -> None:
    p.add_argument("--image-size", type=int, default=image_default, help="image side I in pixels")
    p.add_argument("--patch-size", type=int, default=None, help="patch side p in pixels")
    p.add_argument("--mask-size", type=int, default=None, help="mask unit side m in patches")
    p.add_argument("--mask-ratio", type=float, default=None, help="mask ratio gamma")


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` comments; keys use flag spelling."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{n}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, cfg: dict[str, str]):
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cfg.items():
        action = known.get(key)
        if action is None:
            parser.error(f"config key {key!r} is not an option of this command")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = raw  # argparse applies type= to string defaults
    sub.set_defaults(**defaults)


def _load_image(path) -> np.ndarray:
    try:
        return imaging.read_pnm(path)
    except (OSError, imaging.ImageFormatError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _write_image(path, img: np.ndarray) -> None:
    if str(path).lower().endswith(".pgm"):
        imaging.write_pgm(path, img)
    else:
        imaging.write_ppm(path, img)


def _load_ckpt(path):
    try:
        return ckpt_io.load(path)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_spec(args) -> int:
    if args.fix:
        if args.value is None or not args.candidates:
            raise CliError("--fix needs --value and --candidates")
        diagnostics: list[str] = []
        specs = enumerate_fix_one_vary_two(args.fix, args.value, args.candidates, diagnostics)
        for msg in diagnostics:
            print(f"skipped: {msg}", file=sys.stderr)
        if not specs:
            raise CliError("no valid combination")
    else:
        if args.image_size is None or args.patch_size is None:
            raise CliError("--image-size and --patch-size are required without --fix")
        specs = [derive_input_spec(args.image_size, args.patch_size)]
    m = args.mask_size or 1
    ratio = 0.75 if args.mask_ratio is None else args.mask_ratio
    header = f"{'I':>6} {'p':>4} {'L':>6} {'m':>3} {'gamma':>7} {'U':>6} {'L_e':>6} {'L_d':>6} {'GFLOPs':>9}"
    print(header)
    for spec in specs:
        plan = derive_mask_plan(spec, m, ratio, args.decoder_downsample)
        cfg = M.preset(args.preset, spec.image_size, spec.patch_size, decoder_downsample=args.decoder_downsample)
        gflops = estimate_flops(cfg, plan).total_flops / 1e9
        print(
            f"{spec.image_size:>6} {spec.patch_size:>4} {spec.seq_len:>6} {m:>3} {ratio:>7.4g} "
            f"{plan.total_units:>6} {plan.enc_len:>6} {plan.dec_len:>6} {gflops:>9.2f}"
        )
    return 0


def cmd_mask_preview(args) -> int:
    img = _load_image(args.input)
    h, w = img.shape[:2]
    if h != w:
        raise CliError(f"{args.input} is {w}x{h}; mask previews need a square image")
    size = args.image_size or h
    if size != h:
        raise CliError(f"{args.input} is {h}px but --image-size is {size}")
    spec = derive_input_spec(size, args.patch_size or 16)
    plan = derive_mask_plan(spec, args.mask_size or 2, 0.75 if args.mask_ratio is None else args.mask_ratio)
    assignment = sample_mask(plan, args.seed, args.sample_id)
    _write_image(args.out, mask_to_preview(assignment, img))
    print(f"masked={len(assignment.masked_patch_indices)} visible={len(assignment.visible_patch_indices)} L={spec.seq_len}")
    return 0


def _corpus(args, side: int):
    if args.synthetic:
        kind, _, n = args.synthetic.partition(",")
        return T.make_synthetic_corpus(kind, int(n or 64), side, args.corpus_seed)
    if not args.data:
        raise CliError("give --data DIR or --synthetic KIND,N")
    files = sorted(p for p in Path(args.data).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    return [_load_image(f) for f in files]


def cmd_pretrain(args) -> int:
    size = args.image_size or 32
    psize = args.patch_size or 4
    overrides = {"decoder_downsample": args.decoder_downsample, "pos_embed": args.pos_embed}
    cfg = M.preset(args.preset, size, psize, **overrides)
    spec = cfg.spec
    plan = derive_mask_plan(spec, args.mask_size or 2, 0.75 if args.mask_ratio is None else args.mask_ratio,
                            args.decoder_downsample)
    tcfg = T.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.base_lr,
        warmup_epochs=args.warmup_epochs,
        weight_decay=args.weight_decay,
        seed=args.seed,
        crop=args.crop,
        flip=not args.no_flip,
        log_every=args.log_every,
        max_steps=args.max_steps,
        fixed_masks=args.fixed_masks,
        record_wall_time=args.wall_time,
    )
    corpus = _corpus(args, size)
    init = _load_ckpt(args.resume) if args.resume else None
    try:
        ckpt, metrics = T.pretrain(corpus, spec, plan, cfg, tcfg, init=init)
    except T.TrainingError as exc:
        raise CliError(str(exc)) from exc
    ckpt_io.save(ckpt, args.out)
    if args.log:
        metrics.write(args.log)
    last = metrics.records[-1] if metrics.records else None
    print(f"{spec} m={plan.mask_size} gamma={plan.mask_ratio} L_e={plan.enc_len} L_d={plan.dec_len}")
    if last:
        print(f"steps={last.step} final_loss={last.loss:.6g} -> {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    ck = _load_ckpt(args.ckpt)
    try:
        cfg = M.ViTMAEConfig.from_meta(ck.meta)
    except (TypeError, ValueError) as exc:
        raise CliError(f"checkpoint metadata does not describe a model: {exc}") from exc
    img = _load_image(args.input)
    if img.shape[:2] != (cfg.image_size, cfg.image_size):
        raise CliError(
            f"{args.input} is {img.shape[1]}x{img.shape[0]} but the checkpoint expects "
            f"{cfg.image_size}x{cfg.image_size}; run `lsmae resample-ckpt --from-spec "
            f"{cfg.image_size},{cfg.patch_size} --to-spec {img.shape[0]},P` or resize the image"
        )
    m = args.mask_size or int(ck.meta.get("mask.m", 2))
    ratio = args.mask_ratio if args.mask_ratio is not None else float(ck.meta.get("mask.ratio", 0.75))
    plan = derive_mask_plan(cfg.spec, m, ratio, cfg.decoder_downsample)
    assignment = sample_mask(plan, args.seed, args.sample_id)
    params = M.as_tensors(ck.params(), requires_grad=False)
    recon = M.reconstruct(img, assignment, params, cfg)
    _write_image(args.out, triptych([img, mask_to_preview(assignment, img), recon]))
    return 0


def triptych(panels) -> np.ndarray:
    h = panels[0].shape[0]
    sep = np.ones((h, SEPARATOR_PX, 3), dtype=np.float32)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def cmd_resample_ckpt(args) -> int:
    ck = _load_ckpt(args.input)
    try:
        out = resample_checkpoint(ck, args.from_spec, args.to_spec, renormalize=args.renormalize)
    except (IncompatibleCheckpointError, GeometryError) as exc:
        raise CliError(f"{args.input}: {exc}") from exc
    if args.from_spec == args.to_spec:
        Path(args.output).write_bytes(Path(args.input).read_bytes())
    else:
        ckpt_io.save(out, args.output)
    print(f"{args.from_spec} -> {args.to_spec}: {args.output}")
    return 0


def cmd_ingest(args) -> int:
    src = Path(args.data)
    dst = Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise CliError(f"no PPM/PGM files in {src}")
    for f in files:
        img = _load_image(f)
        out = imaging.resize_long_side(img, args.long_side)
        imaging.write_ppm(dst / (f.stem + ".ppm"), out)
        print(f"{f.name}: {img.shape[1]}x{img.shape[0]} -> {out.shape[1]}x{out.shape[0]}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsmae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name, fn, help_):
        p = subs.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key=value file; explicit flags take precedence")
        p.set_defaults(func=fn)
        return p

    p = sub("spec", cmd_spec, "print I, p, L, U, L_e, L_d and estimated FLOPs")
    _add_geometry(p)
    p.add_argument("--fix", choices=["I", "p", "L"])
    p.add_argument("--value", type=int)
    p.add_argument("--candidates", type=_csv_ints)
    p.add_argument("--preset", default="b", choices=sorted(M.PRESETS))
    p.add_argument("--decoder-downsample", action="store_true")

    p = sub("mask-preview", cmd_mask_preview, "paint a sampled mask onto an image")
    _add_geometry(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-id", type=int, default=0)

    p = sub("pretrain", cmd_pretrain, "pre-train a masked autoencoder")
    _add_geometry(p)
    p.add_argument("--data")
    p.add_argument("--synthetic", help="KIND,N with KIND in checkers|gradients|gaussian-blobs")
    p.add_argument("--corpus-seed", type=int, default=0)
    p.add_argument("--preset", default="tiny", choices=sorted(M.PRESETS))
    p.add_argument("--decoder-downsample", action="store_true")
    p.add_argument("--pos-embed", default="sincos", choices=["sincos", "learned"])
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--base-lr", type=float, default=1.5e-4)
    p.add_argument("--warmup-epochs", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", default="random_resized_crop", choices=["random_resized_crop", "none"])
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--fixed-masks", action="store_true")
    p.add_argument("--wall-time", action="store_true", help="record real wall_ms in the log")
    p.add_argument("--resume", help="checkpoint to warm-start from")
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub("reconstruct", cmd_reconstruct, "original | masked | reconstruction triptych")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-id", type=int, default=0)
    p.add_argument("--mask-size", type=int, default=None)
    p.add_argument("--mask-ratio", type=float, default=None)

    p = sub("resample-ckpt", cmd_resample_ckpt, "transfer a checkpoint to another I, p")
    p.add_argument("--from-spec", type=_spec_pair, required=True, metavar="I,p")
    p.add_argument("--to-spec", type=_spec_pair, required=True, metavar="I,p")
    p.add_argument("--renormalize", action="store_true")
    p.add_argument("input")
    p.add_argument("output")

    p = sub("ingest", cmd_ingest, "resize a PPM/PGM folder to a fixed long side")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--long-side", type=int, default=640)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            _apply_config(parser, sub, read_config(args.config))
        except (OSError, CliError) as exc:
            print(f"lsmae: {exc}", file=sys.stderr)
            return 1
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (CliError, GeometryError, ValueError) as exc:
        print(f"lsmae {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
