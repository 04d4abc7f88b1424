"""``soe`` command line: toy training, guided edits, benchmarks, attention geometry.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 error reported by an external client.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .bench import (HTTPEmbedder, HTTPVQA, Manifest, StubEmbedder, StubVQA, build_manifest,
                    edit_pair, evaluate_manifest, read_annotations, write_report)
from .errors import ConfigError, SOEError, StorageError, UsageError
from .guidance import GuidanceConfig, SampleTrace, write_attention_dump
from .imageio import read_ppm, write_ppm
from .latentdiff import load_checkpoint, make_schedule, save_checkpoint
from .masks import RectMask, project_mask_to_grid
from .shapes import ToyTraining, train_toy
from .text import make_condition

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SERVICE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _mask(text: str, img_w: int, img_h: int) -> RectMask:
    try:
        cx, cy, w, h = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"mask must be cx,cy,w,h; got {text!r}") from exc
    return RectMask(cx, cy, w, h, img_w, img_h)


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"size must be WxH; got {text!r}") from exc
    return w, h


def _guidance(args) -> GuidanceConfig:
    return GuidanceConfig(eta=args.eta, K=args.K, J=args.J, s_min=args.s_min, s_max=args.s_max,
                          seed=args.seed)


def _schedule(args, model):
    T = args.T or model.config.timesteps
    if args.K > T:
        raise ConfigError(f"K={args.K} exceeds T={T}")
    return make_schedule(T)


def _add_guidance_flags(p):
    p.add_argument("--model", required=True, help="checkpoint written by train-toy")
    p.add_argument("--T", type=int, default=None, help="timesteps (default: the model's)")
    p.add_argument("--K", type=int, default=5, help="guided timesteps")
    p.add_argument("--J", type=int, default=5, help="inner updates per guided timestep")
    p.add_argument("--eta", type=float, default=1.0, help="guidance learning rate")
    p.add_argument("--s-min", type=float, default=1.5)
    p.add_argument("--s-max", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soe", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file; flags given on the command line win")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-toy", help="train the toy denoiser on synthetic shapes")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--out", default="toy.soed", help="checkpoint path")

    p = sub.add_parser("edit", help="guided edit of one image, with its unguided baseline")
    _add_guidance_flags(p)
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--mask", required=True, help="cx,cy,w,h in pixels")
    p.add_argument("--prompt", required=True)
    p.add_argument("--label", help="object label inside the prompt (default: last word)")
    p.add_argument("--out", default="edit_out", help="output directory")

    p = sub.add_parser("bench", help="build or run a benchmark split")
    bsub = p.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    b = bsub.add_parser("build", help="annotations -> manifest")
    b.add_argument("--annotations", required=True, help="COCO-style JSON lines")
    b.add_argument("--split", default=None, help="split name (default: output stem)")
    b.add_argument("--vqa", choices=("stub", "external"), default="stub")
    b.add_argument("--vqa-url", default=None)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True, help="manifest path")
    b = bsub.add_parser("run", help="manifest -> metric report")
    _add_guidance_flags(b)
    b.add_argument("--manifest", required=True)
    b.add_argument("--split", default=None)
    b.add_argument("--embedder", choices=("stub", "external"), default="stub")
    b.add_argument("--embedder-url", default=None)
    b.add_argument("--out", default=None, help="CSV path (default: stdout only)")

    p = sub.add_parser("attn-geometry", help="mask footprint on each attention grid")
    p.add_argument("--image-size", default="512x512", help="WxH")
    p.add_argument("--mask", required=True, help="cx,cy,w,h in pixels")
    p.add_argument("--levels", default="64,32,16,8", help="grid sides, comma separated")
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; a ``--config`` file supplies flags that the command line may override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    # config flags go right after the subcommand words so later user flags win
    words = [args.command] + ([args.bench_command] if args.command == "bench" else [])
    at = max(argv.index(w) for w in words) + 1
    extra = []
    for key, value in read_config(args.config).items():
        if key == "config":
            raise ConfigError("config files cannot include other config files")
        extra += ["--" + key.replace("_", "-"), value]
    try:
        return parser.parse_args(argv[:at] + extra + argv[at:])
    except UsageError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc


# --- commands -------------------------------------------------------------


def cmd_train_toy(args, out) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    recipe = ToyTraining(steps=args.steps, seed=args.seed, batch=args.batch, lr=args.lr,
                         timesteps=args.T)
    model, losses = train_toy(recipe)
    save_checkpoint(model, args.out)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, loss in enumerate(losses, 1):
        w.writerow([i, f"{loss:.8f}"])
    return EXIT_OK


def cmd_edit(args, out) -> int:
    model = load_checkpoint(args.model)
    sched = _schedule(args, model)
    image = read_ppm(args.image)
    mask = _mask(args.mask, image.shape[2], image.shape[1])
    label = args.label or args.prompt.split()[-1]
    trace = SampleTrace()
    base, edited = edit_pair(model, sched, image, mask, args.prompt, label, _guidance(args),
                             args.seed, trace)
    dest = Path(args.out)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {dest}: {exc}") from exc
    write_ppm(dest / "edited.ppm", edited)
    write_ppm(dest / "baseline.ppm", base)
    c = make_condition(args.prompt, label, model.config.token_dim)
    files = write_attention_dump(trace, dest / "attention", mask, c.c_req)
    print(f"edited\t{dest / 'edited.ppm'}", file=out)
    print(f"baseline\t{dest / 'baseline.ppm'}", file=out)
    print(f"attention\t{len(files)} maps in {dest / 'attention'}", file=out)
    print(f"scale\t{trace.scale:.6f}", file=out)
    return EXIT_OK


def cmd_bench(args, out) -> int:
    if args.bench_command == "build":
        records = read_annotations(args.annotations)
        root = Path(args.annotations).parent
        if args.vqa == "external":
            if not args.vqa_url:
                raise ConfigError("--vqa external needs --vqa-url")
            client = HTTPVQA(args.vqa_url)
        else:
            client = StubVQA()
        split = args.split or Path(args.out).stem
        manifest = build_manifest(records, client, split,
                                  lambda r: read_ppm(root / r.image), workers=args.workers)
        manifest.write(args.out)
        print(f"{split}\t{len(manifest)} items of {len(records)} records", file=out)
        return EXIT_OK

    model = load_checkpoint(args.model)
    sched = _schedule(args, model)
    manifest = Manifest.read(args.manifest, args.split)
    if args.embedder == "external":
        if not args.embedder_url:
            raise ConfigError("--embedder external needs --embedder-url")
        embedder = HTTPEmbedder(args.embedder_url)
    else:
        embedder = StubEmbedder()
    reports = evaluate_manifest(manifest, model, sched, _guidance(args), embedder, args.seed,
                                Path(args.manifest).parent)
    out.write(write_report(reports, args.out))
    return EXIT_OK


def cmd_attn_geometry(args, out) -> int:
    img_w, img_h = _size(args.image_size)
    mask = _mask(args.mask, img_w, img_h)
    try:
        levels = [int(v) for v in args.levels.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --levels {args.levels!r}") from exc
    if any(v < 1 for v in levels):
        raise UsageError("levels must be positive")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["level", "rows", "cols", "r0", "r1", "c0", "c1"])
    for lv in levels:
        r = project_mask_to_grid(mask, lv, lv)
        w.writerow([f"{lv}x{lv}", r.rows, r.cols, r.r0, r.r1, r.c0, r.c1])
    return EXIT_OK


COMMANDS = {"train-toy": cmd_train_toy, "edit": cmd_edit, "bench": cmd_bench,
            "attn-geometry": cmd_attn_geometry}


def main(argv=None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args, out)
    except SOEError as exc:
        print(f"soe: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"soe: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
