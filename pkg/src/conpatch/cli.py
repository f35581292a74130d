"""Command-line front end.

Every subcommand resolves its parameters from three layers: the built-in
preset (``paper`` defaults or the smaller ``desk`` scale), an optional
``key = value`` configuration file, then explicit flags. The resolved set
is printed, written as ``#`` comment lines at the top of the CSV report,
and summarised by a digest stored in every report row.

Exit status: 0 on success, 2 for invalid arguments, 3 for I/O failures.

Report columns
--------------
denoise:       run_id, image, method, param_digest, psnr_noisy, psnr, wall_time
               (psnr scores the 8-bit output, psnr_noisy the unclipped noisy input)
fruc:          run_id, frame, method, param_digest, psnr, wall_time
eval-matching: run_id, query, method, param_digest, E_GT, E_small, E_large, E_con, wall_time
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("conpatch")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3


class UsageError(ValueError):
    pass


# --- parameter tables -----------------------------------------------------------
# name: (type, paper default, desk default, help)

_BOOL = "bool"

PARAMS = {
    "build-db": {
        "n": (int, 4_500_000, 200_000, "number of sampled con-patches"),
        "c": (int, 7, 7, "central patch side"),
        "h": (int, 21, 21, "context window side"),
        "b": (int, 8, 8, "histogram bins"),
        "m": (int, 4, 4, "neighbour sampling stride"),
        "sigma": (float, 5.0, 5.0, "illumination tolerance on clean images"),
        "sqrt_alpha": (float, 0.9, 0.9, "context gain stored in the database"),
        "normalize": (_BOOL, True, True, "per-pixel patch distance inside the weights"),
    },
    "denoise": {
        "sigma_v": (float, 25.0, 25.0, "noise standard deviation"),
        "k": (int, 500, 100, "neighbours per patch"),
        "stride": (int, 1, 3, "patch-centre grid step"),
        "sqrt_alpha": (float, None, None, "context gain (default: noise-level schedule)"),
        "methods": (str, "context", "context", "comma list of context, regular, internal"),
        "exact": (_BOOL, False, False, "exact scan instead of the kd-tree"),
        "max_visits": (int, 4096, 4096, "kd-tree node expansions per query"),
        "leaf_size": (int, 32, 32, "kd-tree leaf size"),
        "window": (int, 21, 21, "internal NLM search window"),
        "patch_side": (int, 7, 7, "internal NLM patch side"),
        "nlm_h": (float, None, None, "internal NLM filter parameter (default 0.4 sigma_v)"),
        "input_noisy": (_BOOL, False, False, "inputs are already noisy (no PSNR)"),
    },
    "eval-matching": {
        "n_queries": (int, 800_000, 2_000, "query patches"),
        "n_examples": (int, 3_500_000, 100_000, "example patches"),
        "sigma_v": (float, 35.0, 35.0, "noise standard deviation"),
        "k": (int, 20, 20, "neighbours per query"),
        "c": (int, 7, 7, "central patch side"),
        "h_large": (int, 17, 17, "large patch side"),
        "b": (int, 8, 8, "histogram bins"),
        "m": (int, 4, 4, "neighbour sampling stride"),
        "sigma": (float, 5.0, 5.0, "illumination tolerance on clean examples"),
        "sqrt_alpha": (float, 0.9, 0.9, "context gain"),
        "require_neighbors": (_BOOL, True, True, "keep queries with k clean matches below the noise level"),
    },
    "fruc": {
        "block": (int, 16, 16, "block side"),
        "radius": (int, 10, 10, "search radius in pixels"),
        "halfpel": (_BOOL, True, True, "half-pel refinement"),
        "sigma": (float, 10.0, 10.0, "context illumination tolerance"),
        "c": (int, 7, 7, "context patch side"),
        "h": (int, 21, 21, "context window side"),
        "b": (int, 8, 8, "histogram bins"),
        "m": (int, 4, 4, "neighbour sampling stride"),
        "sqrt_alpha": (str, "1.3", "1.3", "comma list of context gains, one report method each"),
        "metric": (str, "ssd", "ssd", "block distance: ssd or sad"),
        "evaluate": (_BOOL, False, False, "drop odd frames, rebuild them and score"),
        "baseline": (_BOOL, True, True, "also score frame averaging when evaluating"),
    },
    "synth-clip": {
        "frames": (int, 32, 32, "clip length"),
        "width": (int, 128, 128, "frame width"),
        "height": (int, 96, 96, "frame height"),
        "step_x": (int, 2, 2, "horizontal motion per frame"),
        "step_y": (int, 0, 0, "vertical motion per frame"),
    },
}


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _convert(kind, value, name):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "")):
        return None
    try:
        if kind == _BOOL:
            return _parse_bool(value)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid value for {name}: {value!r}") from exc


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment, dashes equal underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(command: str, preset: str, config: dict, flags: dict) -> dict:
    """Merge preset defaults, config-file values and explicit flags, in that order."""
    table = PARAMS[command]
    col = 1 if preset == "paper" else 2
    resolved = {name: spec[col] for name, spec in table.items()}
    for key, value in config.items():
        if key in table:
            resolved[key] = _convert(table[key][0], value, key)
        elif key not in ("seed", "preset", "report"):
            log.warning("config key %r is not used by %s", key, command)
    for key, value in flags.items():
        if key in table and value is not None:
            resolved[key] = _convert(table[key][0], value, key)
    return resolved


def param_digest(command: str, resolved: dict, seed: int, extra: dict | None = None) -> str:
    payload = {"command": command, "seed": seed, "params": resolved, "extra": extra or {}}
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


class Report:
    """CSV report with the resolved configuration as leading comment lines."""

    def __init__(self, columns, header_lines):
        self.columns = list(columns)
        self.header_lines = list(header_lines)
        self.rows = []

    def add(self, **row):
        self.rows.append([_fmt(row[c]) for c in self.columns])

    def text(self) -> str:
        buf = io.StringIO()
        for line in self.header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, path):
        if path is None:
            return
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.text(), encoding="utf-8")
        tmp.replace(path)


def _config_lines(command, resolved, seed, preset, extra):
    lines = [f"conpatch {__version__} {command}", f"preset = {preset}", f"seed = {seed}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(resolved.items())]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted((extra or {}).items())]
    return lines


def _echo(lines):
    for line in lines:
        print(f"# {line}")


def _image_list(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(q for q in p.iterdir() if q.suffix.lower() in (".pgm", ".png"))
            if not found:
                from .imgcore import ImageIOError

                raise ImageIOError(f"{p}: no PGM or PNG images found")
            out.extend(found)
        else:
            out.append(p)
    return out


# --- subcommands ------------------------------------------------------------------


def cmd_corpus(args) -> int:
    from .datasets import write_desk_corpus

    train, test = write_desk_corpus(args.out_dir)
    print(f"wrote {len(train)} training tiles and {len(test)} test images to {args.out_dir}")
    return EXIT_OK


def cmd_synth_clip(args, p) -> int:
    from .datasets import translating_clip
    from .imgcore import save_frames

    frames = translating_clip(p["frames"], p["height"], p["width"], (p["step_x"], p["step_y"]), args.seed)
    save_frames(frames, args.out_dir)
    print(f"wrote {len(frames)} frames to {args.out_dir}")
    return EXIT_OK


def cmd_build_db(args, p) -> int:
    from .context import ContextParams, alpha_from_sqrt
    from .patchdb import sample_database

    params = ContextParams(
        sigma=p["sigma"], h=p["h"], b=p["b"], m=p["m"], c=p["c"],
        alpha=alpha_from_sqrt(p["sqrt_alpha"]), normalize=p["normalize"],
    )
    corpus = _image_list(args.corpus)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        db = sample_database([str(c) for c in corpus], p["n"], params, args.seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    db.save(args.out)
    print(f"count = {db.count}")
    print(f"dim = {db.dim}")
    print(f"digest = {db.digest()}")
    return EXIT_OK


def _denoise_methods(p, args) -> list[str]:
    methods = [m.strip() for m in p["methods"].split(",") if m.strip()]
    bad = [m for m in methods if m not in ("context", "regular", "internal")]
    if bad or not methods:
        raise UsageError(f"unknown denoising method(s): {bad or methods}")
    if args.internal and "internal" not in methods:
        methods.append("internal")
    return methods


def cmd_denoise(args, p, lines, digest) -> int:
    from .denoise import DenoiseParams, denoise_image, internal_nlm, prepare_search
    from .imgcore import NoiseSpec, add_gaussian_noise, load_image, psnr, quantize, save_image
    from .patchdb import PatchDatabase

    methods = _denoise_methods(p, args)
    if args.alpha is not None:
        p["sqrt_alpha"] = math.sqrt(args.alpha) if args.alpha > 0 else 0.0
    needs_db = any(m != "internal" for m in methods)
    if needs_db and args.db is None:
        raise UsageError("--db is required unless only the internal method runs")
    db = PatchDatabase.load(args.db) if needs_db else None
    if db is not None:
        base = db.params.with_(alpha=0.0, noise_sigma=0.0)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    report = Report(["run_id", "image", "method", "param_digest", "psnr_noisy", "psnr", "wall_time"], lines)
    searches = {}
    images = _image_list(args.images)
    for i, path in enumerate(images):
        src = load_image(path)
        if p["input_noisy"]:
            clean, noisy = None, src
        else:
            clean, noisy = src, add_gaussian_noise(src, NoiseSpec(p["sigma_v"], args.seed + i))
        noisy_psnr = psnr(clean, noisy) if clean is not None else math.nan
        for method in methods:
            t0 = time.perf_counter()
            if method == "internal":
                out = internal_nlm(noisy, p["window"], p["patch_side"], p["sigma_v"], h=p["nlm_h"])
            else:
                sa = 0.0 if method == "regular" else p["sqrt_alpha"]
                dp = DenoiseParams(
                    sigma_v=p["sigma_v"], k=p["k"], stride=p["stride"], context=base,
                    sqrt_alpha=sa, exact=p["exact"], max_visits=p["max_visits"],
                )
                if method not in searches:
                    searches[method] = prepare_search(db, dp, p["leaf_size"])
                sdb, index = searches[method]
                out = denoise_image(noisy, sdb, index, dp)
            wall = time.perf_counter() - t0
            # score the 8-bit result, i.e. exactly what --out writes
            value = psnr(clean, quantize(out)) if clean is not None else math.nan
            if out_dir is not None:
                save_image(out, out_dir / f"{path.stem}_{method}.pgm")
            report.add(run_id=digest, image=path.name, method=method, param_digest=digest,
                       psnr_noisy=noisy_psnr, psnr=value, wall_time=round(wall, 3))
            print(f"{path.name} {method}: noisy {noisy_psnr:.3f} dB -> {value:.3f} dB ({wall:.1f} s)")
        if out_dir is not None and clean is not None:
            save_image(noisy, out_dir / f"{path.stem}_noisy.pgm")
    report.write(args.report)
    return EXIT_OK


def cmd_eval_matching(args, p, lines, digest) -> int:
    from .denoise import database_context, eval_matching, matching_sets
    from .imgcore import load_image

    images = [load_image(q) for q in _image_list(args.corpus)]
    t0 = time.perf_counter()
    sets = matching_sets(images, p["n_queries"], p["n_examples"], p["h_large"], p["sigma_v"],
                         args.seed, p["k"], p["c"], p["require_neighbors"])
    if sets.clean_queries.shape[0] == 0:
        raise UsageError("no query satisfies the neighbour requirement; disable require_neighbors")
    ctx = database_context(c=p["c"], h=p["h_large"], b=p["b"], m=p["m"], sigma=p["sigma"])
    rep = eval_matching(sets.clean_queries, sets.noisy_queries, sets.examples, p["k"], p["c"], p["h_large"],
                        ctx, p["sigma_v"], p["sqrt_alpha"])
    wall = time.perf_counter() - t0
    report = Report(["run_id", "query", "method", "param_digest", "E_GT", "E_small", "E_large", "E_con",
                     "wall_time"], lines)
    for q, gt, sm, lg, con in rep.rows():
        report.add(run_id=digest, query=q, method="matching", param_digest=digest, E_GT=gt, E_small=sm,
                   E_large=lg, E_con=con, wall_time=round(wall, 3))
    report.write(args.report)
    means = rep.means()
    print(f"queries = {len(rep)} (of {sets.candidates} drawn)")
    for k, v in means.items():
        print(f"mean {k} = {v:.4f}")
    edges = np.linspace(0.0, max(float(rep.e_gt.max()), 1.0), 11)
    if args.summary:
        with open(args.summary, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["E_GT_lo", "E_GT_hi", "count", "E_small", "E_large", "E_con"])
            for row in rep.binned_means(edges):
                w.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return EXIT_OK


def _fruc_params(p, sqrt_alpha):
    from .context import ContextParams
    from .fruc import FrucParams

    ctx = ContextParams(sigma=p["sigma"], h=p["h"], b=p["b"], m=p["m"], c=p["c"], alpha=0.0, normalize=True)
    return FrucParams(block=p["block"], radius=p["radius"], halfpel=p["halfpel"], context=ctx,
                      sqrt_alpha=sqrt_alpha, metric=p["metric"])


def cmd_fruc(args, p, lines, digest) -> int:
    from .fruc import FrameScore, mean_psnr, rebuild_odd, upconvert
    from .imgcore import frame_path, load_frames, psnr, save_frames, save_image

    frames = load_frames(args.frames_dir)
    try:
        gains = [float(s) for s in p["sqrt_alpha"].split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"invalid sqrt_alpha list {p['sqrt_alpha']!r}") from exc
    if not gains:
        raise UsageError("sqrt_alpha list is empty")
    report = Report(["run_id", "frame", "method", "param_digest", "psnr", "wall_time"], lines)
    out_dir = Path(args.out) if args.out else None
    runs = [(f"mc_sqrt_alpha_{g:g}", g) for g in gains]
    if p["evaluate"] and p["baseline"]:
        runs.append(("average", None))
    for name, gain in runs:
        params = _fruc_params(p, 0.0 if gain is None else gain)
        method = "average" if gain is None else "mc"
        t0 = time.perf_counter()
        if p["evaluate"]:
            rebuilt = rebuild_odd(frames, params, method)
            scores = [FrameScore(2 * j + 1, method, psnr(frames[2 * j + 1], f)) for j, f in enumerate(rebuilt)]
            wall = time.perf_counter() - t0
            if out_dir is not None:
                target = out_dir / name
                target.mkdir(parents=True, exist_ok=True)
                for sc in scores:
                    save_image(rebuilt[sc.frame // 2], frame_path(target, sc.frame))
            for s in scores:
                report.add(run_id=digest, frame=s.frame, method=name, param_digest=digest, psnr=s.psnr,
                           wall_time=round(wall, 3))
            print(f"{name}: mean PSNR {mean_psnr(scores):.3f} dB over {len(scores)} frames ({wall:.1f} s)")
        else:
            seq = upconvert(frames, params, method)
            wall = time.perf_counter() - t0
            if out_dir is not None:
                save_frames(seq, out_dir / name if len(runs) > 1 else out_dir)
            print(f"{name}: wrote {len(seq)} frames ({wall:.1f} s)")
    report.write(args.report)
    return EXIT_OK


def cmd_psnr(args) -> int:
    from .imgcore import load_image, psnr

    value = psnr(load_image(args.reference), load_image(args.test))
    print(_fmt(value))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def _add_params(sub, command):
    for name, (kind, paper, desk, text) in PARAMS[command].items():
        flag = "--" + name.replace("_", "-")
        default_note = f"paper {paper}, desk {desk}" if paper != desk else f"default {paper}"
        if kind == _BOOL:
            sub.add_argument(flag, dest=name, nargs="?", const="true", default=None, metavar="BOOL",
                             help=f"{text} ({default_note})")
        else:
            sub.add_argument(flag, dest=name, default=None, help=f"{text} ({default_note})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="64-bit seed for every random draw (default 0)")
    common.add_argument("--preset", choices=("paper", "desk"), default=None,
                        help="built-in defaults: full-scale 'paper' or smaller 'desk' (default paper)")
    common.add_argument("--report", default=None, help="CSV report path")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="conpatch",
        description="Context-augmented patch matching: databases, denoising, matching benchmark, FRUC.",
        epilog=__doc__.split("Report columns", 1)[1].strip("-\n "),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"conpatch {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("corpus", parents=[common], help="write the desk-scale natural image corpus")
    s.add_argument("out_dir")

    s = subs.add_parser("synth-clip", parents=[common], help="write a translating-texture clip")
    s.add_argument("out_dir")
    _add_params(s, "synth-clip")

    s = subs.add_parser("build-db", parents=[common], help="sample a con-patch database")
    s.add_argument("corpus", nargs="+", help="image files or directories")
    s.add_argument("--out", required=True, help="output .cpdb path")
    _add_params(s, "build-db")

    s = subs.add_parser("denoise", parents=[common], help="external / internal denoising with PSNR report")
    s.add_argument("images", nargs="+", help="clean images (noise is synthesised) or directories")
    s.add_argument("--db", help=".cpdb database")
    s.add_argument("--out", help="directory for output images")
    s.add_argument("--alpha", type=float, default=None, help="context gain as alpha (overrides sqrt-alpha)")
    s.add_argument("--internal", action="store_true", help="also run internal NLM")
    _add_params(s, "denoise")

    s = subs.add_parser("eval-matching", parents=[common], help="ground-truth matching benchmark")
    s.add_argument("corpus", nargs="+", help="image files or directories")
    s.add_argument("--summary", help="CSV of binned means against E_GT")
    _add_params(s, "eval-matching")

    s = subs.add_parser("fruc", parents=[common], help="frame-rate up-conversion")
    s.add_argument("frames_dir")
    s.add_argument("--out", help="directory for the up-converted sequence (rebuilt odd frames with --evaluate)")
    _add_params(s, "fruc")

    s = subs.add_parser("psnr", parents=[common], help="PSNR between two images")
    s.add_argument("reference")
    s.add_argument("test")
    return parser


def _global(args, config, name, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    config = read_config(args.config) if args.config else {}
    args.seed = int(_global(args, config, "seed", 0))
    args.report = _global(args, config, "report", None)
    preset = _global(args, config, "preset", "paper")
    if preset not in ("paper", "desk"):
        raise UsageError(f"unknown preset {preset!r}")

    command = args.command
    if command == "corpus":
        return cmd_corpus(args)
    if command == "psnr":
        return cmd_psnr(args)
    flags = {name: getattr(args, name, None) for name in PARAMS[command]}
    p = resolve(command, preset, config, flags)
    if command == "synth-clip":
        return cmd_synth_clip(args, p)
    if command == "build-db":
        return cmd_build_db(args, p)

    extra = {}
    if command == "denoise":
        _denoise_methods(p, args)
        if args.alpha is not None:
            extra["alpha"] = args.alpha
        if args.internal:
            extra["internal"] = True
        if args.db:
            from .imgcore import ImageIOError
            from .patchdb import file_digest

            try:
                extra["db_sha256"] = file_digest(args.db)
            except OSError as exc:
                raise ImageIOError(f"{args.db}: cannot read database ({exc.strerror or exc})") from exc
    digest = param_digest(command, p, args.seed, extra)
    lines = _config_lines(command, p, args.seed, preset, extra) + [f"param_digest = {digest}"]
    _echo(lines)
    handler = {"denoise": cmd_denoise, "eval-matching": cmd_eval_matching, "fruc": cmd_fruc}[command]
    return handler(args, p, lines, digest)


def main(argv=None) -> int:
    try:
        return run(argv)
    except OSError as exc:
        print(f"conpatch: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"conpatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
