"""Command-line entry point: ``mesostitch {reconstruct,synth,eval,inspect-distortion}``."""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import distortion, fileio, pipeline, synthlab
from .geometry import AutofocusContext

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("mesostitch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _plot_heights(path, hm):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = np.asarray(hm.data, dtype=float)
    rows, cols = data.shape
    extent = [hm.origin[0], hm.origin[0] + cols * hm.pitch,
              hm.origin[1] + rows * hm.pitch, hm.origin[1]]
    fig, ax = plt.subplots(figsize=(6, 6 * rows / max(cols, 1) + 0.6))
    finite = data[np.isfinite(data)]
    lo, hi = (np.percentile(finite, [1, 99]) if finite.size else (0.0, 1.0))
    im = ax.imshow(data, cmap="viridis", vmin=lo, vmax=hi, extent=extent)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    fig.colorbar(im, ax=ax, label="height (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_profile(path, r, m, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(r, m, "o-", ms=3)
    ax.set_xlabel("radius (px)")
    ax.set_ylabel("relative magnification")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- reconstruct ----------------------------------------------------------------------

def load_config(args):
    kv = {}
    if args.config:
        with open(args.config) as fh:
            kv.update(fileio.parse_keyvalue(fh.read()))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    if args.M0 is not None:
        kv["M_0"] = str(args.M0)
    for key in ("input", "output"):
        kv.pop(key, None)
    return pipeline.Config.from_mapping(kv).validate()


def load_frames(directory, downsample=1):
    paths = fileio.list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no PNG/PPM frames in {directory}")
    frames = [fileio.read_rgb(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise fileio.FormatError(f"frames differ in size: {sorted(shapes)}")
    if downsample > 1:
        frames = [fileio.downsample_image(f, downsample) for f in frames]
    return np.stack(frames).astype(np.float32), paths


def cmd_reconstruct(args):
    config = load_config(args)
    frames, paths = load_frames(args.input, config.downsample)
    out = args.output
    os.makedirs(out, exist_ok=True)
    log.info("%d frames of %dx%d from %s", len(paths), frames.shape[3], frames.shape[2], args.input)
    with open(os.path.join(out, "progress.log"), "w") as sink:
        result = pipeline.run(frames, config, sink=sink)
    recon = result.reconstruction
    hm = recon.height_map()
    fileio.write_height_map(os.path.join(out, "height.mesoh"), hm)
    fileio.write_rgb(os.path.join(out, "orthomosaic.png"), recon.rgb())
    with open(os.path.join(out, "poses.txt"), "w") as fh:
        fh.write("# estimated poses: X Y Z nx ny nz theta (mm, rad)\n")
        fh.write("".join(f"# frame_{i:03d} = {os.path.basename(p)}\n" for i, p in enumerate(paths)))
        fh.write(result.params.to_text())
        fh.write(f"pitch = {recon.pitch!r}\norigin = {recon.origin[0]!r} {recon.origin[1]!r}\n")
        fh.write(distortion.format_profile(result.params.undist.model()))
    _plot_heights(os.path.join(out, "height_preview.png"), hm)
    pipeline.save_checkpoint(os.path.join(out, "checkpoint"), result, config)
    final = result.history[-1] if result.history else {}
    print(f"wrote {out}: {recon.shape[1]}x{recon.shape[0]} cells at {recon.pitch:.4f} mm"
          + (f", final loss {final['loss']:.6g}" if final else ""))
    return EXIT_OK


# -- synth -----------------------------------------------------------------------------

def load_spec(path):
    """Phantom spec file: key=value lines plus repeated ``plateau = x y w l h_um`` lines."""
    plateaus, kv = [], {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise fileio.FormatError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k == "plateau":
                vals = [float(x) for x in v.split()]
                if len(vals) != 5:
                    raise fileio.FormatError(f"{path}:{n}: plateau needs x y width length height_um")
                plateaus.append(synthlab.Plateau(*vals))
            else:
                kv[k] = v
    return plateaus, kv


def cmd_synth(args):
    kv = {}
    plateaus = []
    if args.spec:
        plateaus, kv = load_spec(args.spec)
        if kv.get("cards", "").lower() in ("1", "true", "yes"):
            plateaus = synthlab.card_spec(int(kv.get("seed", args.seed))).plateaus
    seed = int(kv.get("seed", args.seed))
    spec = synthlab.PhantomSpec(plateaus, seed=seed)
    if "extent" in kv:
        spec.extent = tuple(float(v) for v in kv["extent"].split())
    spec.validate()
    scene = synthlab.make_phantom(spec)
    rows = int(kv.get("rows", 189))
    cols = int(kv.get("cols", 252))
    camera = synthlab.Camera((rows, cols), float(kv.get("pixel_pitch", 0.0224)),
                             float(kv.get("blur", 0.7)))
    ctx = AutofocusContext.from_height(float(kv.get("f_eff", 4.3)), float(kv.get("Z_0", 75.0)))
    kind = kv.get("distortion", "barrel")
    center = tuple(float(v) for v in kv.get("center", "0 0").split())
    if kind == "barrel":
        undist = synthlab.barrel_profile(camera.shape, float(kv.get("strength", 0.04)), center)
    elif kind == "kinked":
        undist = synthlab.kinked_profile(camera.shape, center=center)
    elif kind == "none":
        undist = None
    else:
        raise fileio.FormatError(f"unknown distortion {kind!r}")
    seq = synthlab.make_sequence(scene, int(kv.get("n_frames", args.frames)), undist, camera, ctx,
                                 seed=seed, noise=float(kv.get("noise", 0.0)),
                                 spread=float(kv.get("spread", 1.0)))
    synthlab.save_dataset(seq, args.output)
    print(f"wrote {seq.n_frames} frames to {args.output} (M_0 = {ctx.M_0:.6f})")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------

def cmd_eval(args):
    hm = fileio.read_height_map(args.height)
    truth = synthlab.load_ground_truth(args.truth)
    if truth.labels is None:
        raise fileio.FormatError(f"{args.truth} has no region labels")
    regions = synthlab.region_labels_on(hm, truth.labels, truth.label_pitch, truth.label_origin,
                                        erode=args.erode)
    ev = synthlab.evaluate_heights(hm.data, regions, truth.region_heights)
    print(ev.format())
    report = {"regions": [dict(zip(("region", "truth", "mean", "accuracy", "precision", "cells"),
                                   row)) for row in ev.as_rows()],
              "shift": ev.shift, "rescale": ev.rescale,
              "mean_accuracy_plateaus": float(np.mean(ev.accuracy[1:])) if len(ev.regions) > 1
              else None}
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


# -- inspect-distortion ------------------------------------------------------------------

def cmd_inspect_distortion(args):
    path = args.checkpoint
    if os.path.isdir(path):
        path = os.path.join(path, "distortion.txt")
    with open(path) as fh:
        try:
            model = distortion.parse_profile(fh.read())
        except (ValueError, IndexError, KeyError) as exc:
            raise fileio.FormatError(f"corrupt distortion profile in {path}: {exc}") from exc
    report = distortion.fit_report(model, args.samples)
    cx, cy = report["center"]
    print(f"principal point (vertical / horizontal): {cy:.1f} / {cx:.1f} px")
    print(f"{'r_px':>10} {'M':>12}")
    for r, m in zip(report["r"], report["magnification"]):
        print(f"{r:10.3f} {m:12.6f}")
    out = args.output or os.path.dirname(os.path.abspath(path))
    os.makedirs(out, exist_ok=True)
    _plot_profile(os.path.join(out, "distortion_profile.png"), report["r"],
                  report["magnification"], "radial undistortion")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="mesostitch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("reconstruct", help="register frames and estimate a height map")
    r.add_argument("input", help="directory of PNG/PPM frames")
    r.add_argument("output", help="output directory")
    r.add_argument("--config", help="key = value run configuration")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--M0", type=float, help="magnification of the first frame")
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("synth", help="render a synthetic phantom sequence")
    s.add_argument("output")
    s.add_argument("--spec", help="phantom spec file (empty spec: flat scene)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=10)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score a height map against synthetic ground truth")
    e.add_argument("height", help="height map file")
    e.add_argument("truth", help="dataset directory written by synth")
    e.add_argument("--json", help="write the report as JSON")
    e.add_argument("--erode", type=float, default=1.0, help="region erosion (mm)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("inspect-distortion", help="print and plot an undistortion profile")
    d.add_argument("checkpoint", help="checkpoint directory or distortion profile file")
    d.add_argument("--output", help="where to write the plot")
    d.add_argument("--samples", type=int, default=None)
    d.set_defaults(func=cmd_inspect_distortion)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except (UsageError, pipeline.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.NumericalFailure, pipeline.NoValidSamples,
            pipeline.NonFiniteGradient) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, fileio.FormatError, distortion.DistortionError, synthlab.SynthError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
