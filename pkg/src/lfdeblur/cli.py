"""Command-line front end.

Subcommands: ``psf``, ``render``, ``deblur``, ``bench``, ``mask``.  Every
command takes ``--config`` (INI file), ``--seed``, ``--threads``,
``--out-dir`` and ``--force``, and writes ``manifest.json`` with content
hashes beside its outputs.

Configuration keys
------------------
``[camera]``
    ``preset = table1`` fills in the Lytro-Illum-like optics; any of
    ``main_lens_focal_length``, ``f_number``, ``pixel_size``,
    ``microlens_spacing``, ``lens_to_mla_distance``,
    ``mla_to_sensor_distance``, ``microlens_focal_length``, ``scene_depth``
    (metres) override it.  ``f_number = inf`` gives a pinhole main lens.
``[lattice]``
    ``layout`` (rectangular | hexagonal), ``pixels_per_block`` and
    ``texture_units_per_block`` (one integer, or ``rows cols``),
    optional ``support_radius`` (blocks).
``[deblur]``
    any :class:`~lfdeblur.deblur.DeblurConfig` field, e.g. ``lambda_alt``,
    ``kernel_extent = 9 9``, ``pyramid_levels``; plus ``patches = rows cols``
    and ``overlap``.
``[corrections]``
    ``warp`` (six numbers, row-major 2x3), ``radial_center``, ``kappa1``,
    ``kappa2``, ``radial_scale``, ``white``/``dark``/``mask`` (image paths,
    relative to the config file), ``mask_threshold``, ``hot_level``.
``[bench]``
    ``texture_size``, ``kernel_extent``, ``kernels``, ``noise_levels``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure (divergence, degenerate kernels).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io as lfio
from .deblur import DeblurConfig, DivergenceError, blind_deconvolve, deconvolve_known_kernel
from .forward import CorrectionSet, ForwardModel, PatchLayout, build_mask, normalize_white
from .geometry import CameraConfig, LatticeSpec
from .harness import SyntheticCamera, add_noise, run_suite, standard_kernels, standard_textures
from .psf import DegenerateKernelError, build_psf_bank, camera_hash, load_bank, read_bank_header, save_bank

log = logging.getLogger("lfdeblur")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _pair(text: str) -> tuple[int, int]:
    v = _ints(text)
    if len(v) == 1:
        return v[0], v[0]
    if len(v) != 2:
        raise ConfigError(f"expected one or two integers, got {text!r}")
    return v[0], v[1]


class Settings:
    """Parsed configuration file."""

    def __init__(self, path: str | None = None):
        self.path = Path(path) if path else None
        self.parser = configparser.ConfigParser()
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file not found: {path}")
            self.parser.read(path)

    def section(self, name) -> dict:
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def resolve(self, value: str) -> Path:
        p = Path(value)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    def camera(self) -> CameraConfig:
        sec = self.section("camera")
        preset = sec.pop("preset", "table1")
        if preset != "table1":
            raise ConfigError(f"unknown camera preset {preset!r}")
        fields = {f.name for f in dataclasses.fields(CameraConfig)} - {"extra"}
        unknown = set(sec) - fields
        if unknown:
            raise ConfigError(f"unknown [camera] keys: {sorted(unknown)}")
        try:
            return CameraConfig.table1(**{k: float(v) for k, v in sec.items()})
        except ValueError as exc:
            raise ConfigError(f"[camera] {exc}") from exc

    def lattice(self, blocks=(1, 1)) -> LatticeSpec:
        sec = self.section("lattice")
        layout = sec.get("layout", "rectangular")
        J = _pair(sec.get("pixels_per_block", "16"))
        D = _pair(sec.get("texture_units_per_block", "4"))
        try:
            return LatticeSpec(layout, J, D, blocks)
        except ValueError as exc:
            raise ConfigError(f"[lattice] {exc}") from exc

    def support_radius(self):
        sec = self.section("lattice")
        return int(sec["support_radius"]) if "support_radius" in sec else None

    def deblur(self) -> tuple[DeblurConfig, PatchLayout]:
        sec = self.section("deblur")
        grid = _pair(sec.pop("patches", "2 3"))
        overlap = float(sec.pop("overlap", 0.5))
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(DeblurConfig)}
        for key, val in sec.items():
            if key not in types:
                raise ConfigError(f"unknown [deblur] key {key!r}")
            if key == "kernel_extent":
                kw[key] = _pair(val)
            elif types[key] == "int":
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        try:
            return DeblurConfig(**kw), PatchLayout(grid, overlap)
        except ValueError as exc:
            raise ConfigError(f"[deblur] {exc}") from exc

    def corrections(self, spec: LatticeSpec) -> CorrectionSet:
        sec = self.section("corrections")
        kw = {}
        if "warp" in sec:
            w = _floats(sec["warp"])
            if len(w) != 6:
                raise ConfigError("[corrections] warp needs six numbers")
            kw["warp"] = np.array(w).reshape(2, 3)
        if "radial_center" in sec:
            kw["radial_center"] = tuple(_floats(sec["radial_center"]))
        for key in ("kappa1", "kappa2", "radial_scale"):
            if key in sec:
                kw[key] = float(sec[key])
        white = dark = None
        if "white" in sec:
            white = lfio.read_image(self.resolve(sec["white"]))
        if "dark" in sec:
            dark = lfio.read_image(self.resolve(sec["dark"]))
        if "mask" in sec:
            mask = lfio.read_mask(self.resolve(sec["mask"]))
        elif white is not None:
            mask = build_mask(white, dark, float(sec.get("mask_threshold", 0.2)),
                              float(sec.get("hot_level", 0.1)), spec)
        else:
            mask = None
        if white is not None:
            kw["raw_shape"] = white.shape
            kw["white"] = np.where(mask, white, 1.0) if mask is not None else white
        if mask is not None:
            kw["mask"] = mask
            kw.setdefault("raw_shape", mask.shape)
        try:
            return CorrectionSet(**kw)
        except ValueError as exc:
            raise ConfigError(f"[corrections] {exc}") from exc


# --------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args, inputs, outputs, cache_key=None):
    entry = {
        "command": command,
        "version": __version__,
        "config": str(args.config) if args.config else None,
        "seed": args.seed,
        "bank_cache_key": cache_key,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": {str(Path(p).name): _sha256(p) for p in outputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(entry, indent=2) + "\n")
    return entry


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _bank_for(settings: Settings, args, blocks, cache_dir: Path):
    """Load the bank from ``--bank`` or the cache, building it on a miss."""
    camera = settings.camera()
    spec = settings.lattice(blocks)
    if getattr(args, "bank", None):
        path = Path(args.bank)
        bank = load_bank(path, blocks)
        if bank.spec.pixels_per_block != spec.pixels_per_block or \
                bank.spec.texture_units_per_block != spec.texture_units_per_block:
            raise ConfigError("bank lattice does not match [lattice]")
        return bank, path, bank.camera_hash, False
    key = camera_hash(camera, spec)
    path = cache_dir / f"bank-{key}.lfpsf"
    if path.exists() and not args.force:
        return load_bank(path, blocks), path, key, True
    bank = build_psf_bank(camera, spec.with_blocks((1, 1)), settings.support_radius(),
                          workers=args.threads)
    save_bank(bank, path)
    return bank.with_spec(spec), path, key, False


def _channels(img):
    return [img] if img.ndim == 2 else [img[..., c] for c in range(img.shape[2])]


def _stack(chans):
    return chans[0] if len(chans) == 1 else np.stack(chans, axis=-1)


def _load_kernel(path):
    if path is None:
        return np.ones((1, 1))
    k = lfio.read_image(path)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ConfigError("kernel must be a single-channel image with odd extents")
    if k.sum() <= 0:
        raise ConfigError("kernel has no positive weight")
    return k / k.sum()


# --------------------------------------------------------------------------
# commands


def cmd_psf(args, settings: Settings) -> int:
    out = _out_dir(args)
    camera = settings.camera()
    spec = settings.lattice()
    key = camera_hash(camera, spec)
    path = out / f"bank-{key}.lfpsf"
    if path.exists() and not args.force:
        log.info("cache hit: %s", path)
        print(f"cache hit {path}")
    else:
        bank = build_psf_bank(camera, spec, settings.support_radius(), workers=args.threads)
        save_bank(bank, path)
        print(f"wrote {path}")
    header = read_bank_header(path)
    print(json.dumps(header))
    _write_manifest(out, "psf", args, [settings.path], [path], key)
    return EXIT_OK


def cmd_render(args, settings: Settings) -> int:
    out = _out_dir(args)
    texture = lfio.read_image(args.texture)
    spec0 = settings.lattice()
    D = spec0.texture_units_per_block
    blocks = (texture.shape[0] // D[0], texture.shape[1] // D[1])
    if min(blocks) < 1:
        raise ConfigError("texture smaller than one block")
    bank, bank_path, key, _ = _bank_for(settings, args, blocks, out)
    corr = settings.corrections(bank.spec)
    kernel = _load_kernel(args.kernel)
    model = ForwardModel(bank, corr, workers=args.threads)
    te = bank.spec.texture_extent
    lfs = []
    for ch in _channels(texture):
        lf = model.apply(ch[:te[0], :te[1]], kernel)
        if corr.white is not None:
            lf = lf * np.where(model.mask, corr.white, 0.0)
        if args.noise:
            lf = add_noise(lf, args.noise, args.seed)
        lfs.append(lf)
    target = out / args.output
    _guard(target, args.force)
    lfio.write_image(target, _stack(lfs))
    _write_manifest(out, "render", args, [settings.path, Path(args.texture), args.kernel,
                                          bank_path], [target], key)
    print(f"wrote {target}")
    return EXIT_OK


def _write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,data_term\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v:.12g}\n")


def cmd_deblur(args, settings: Settings) -> int:
    out = _out_dir(args)
    raw = lfio.read_image(args.input)
    spec0 = settings.lattice()
    corr0 = settings.corrections(spec0)
    J = spec0.pixels_per_block
    model_extent = raw.shape[:2] if corr0.warp_is_identity else _ints_or(args.model_extent, raw.shape[:2])
    blocks = (model_extent[0] // J[0], model_extent[1] // J[1])
    bank, bank_path, key, _ = _bank_for(settings, args, blocks, out)
    corr = settings.corrections(bank.spec)
    if corr.raw_shape is None:
        corr = corr.with_(raw_shape=raw.shape[:2])
    cfg, patches = settings.deblur()
    model = ForwardModel(bank, corr, patches, workers=args.threads)
    r0, r1 = model.raw_shape
    chans = [c[:r0, :r1] for c in _channels(raw)]
    if corr.white is not None:
        chans = [normalize_white(c, corr.white, model.mask) for c in chans]
    # kernels come from the channel mean, then each channel is re-solved
    data = np.mean(chans, axis=0) * model.mask
    result = blind_deconvolve(model, data, cfg)
    if len(chans) == 1:
        texture = result.texture
    else:
        texture = _stack([deconvolve_known_kernel(model, c * model.mask, result.kernels,
                                                  cfg.lambda_final, cfg.final_iters,
                                                  tv_epsilon=cfg.tv_epsilon)
                          for c in chans])
    outputs = []
    for name in ("texture.png", "texture.raw"):
        _guard(out / name, args.force)
    lfio.write_image(out / "texture.png", texture)
    lfio.write_raw(out / "texture.raw", texture, "texture")
    outputs += [out / "texture.png", out / "texture.raw"]
    for i, h in enumerate(result.kernels):
        lfio.write_image(out / f"kernel_{i}.png", h / h.max())
        lfio.write_raw(out / f"kernel_{i}.raw", h, "texture")
        outputs += [out / f"kernel_{i}.png", out / f"kernel_{i}.raw"]
    _write_trace(out / "energy_trace.csv", result.energy_trace)
    outputs.append(out / "energy_trace.csv")
    _write_manifest(out, "deblur", args, [settings.path, Path(args.input), bank_path],
                    outputs, key)
    print(f"wrote {out / 'texture.png'} and {len(result.kernels)} kernel(s)")
    return EXIT_OK


def _ints_or(text, default):
    return _pair(text) if text else tuple(default)


def cmd_bench(args, settings: Settings) -> int:
    out = _out_dir(args)
    sec = settings.section("bench")
    size = int(sec.get("texture_size", 64))
    extent = int(sec.get("kernel_extent", 9))
    n_kernels = int(sec.get("kernels", 4))
    noise = tuple(_floats(sec.get("noise_levels", "0 2.5 5")))
    cfg, patches = settings.deblur()
    if "kernel_extent" not in settings.section("deblur"):
        cfg = cfg.replace(kernel_extent=(extent, extent))
    spec = settings.lattice()
    camera = SyntheticCamera(settings.camera(), spec.pixels_per_block[0],
                             spec.texture_units_per_block[0], patches=patches.grid)
    textures = standard_textures(size)
    kernels = standard_kernels(extent, n_kernels, seed=args.seed + 7)
    csv_path = out / "report.csv"
    _guard(csv_path, args.force)
    csv_path.write_text("")

    rows_so_far = []

    def flush(rows):
        from .harness import ExperimentReport
        rows_so_far.extend(rows)
        csv_path.write_text(ExperimentReport(rows_so_far).to_csv())

    report = run_suite(textures, kernels, noise, cfg, camera, seed=args.seed,
                       workers=args.threads, on_rows=flush)
    csv_path.write_text(report.to_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    _write_manifest(out, "bench", args, [settings.path],
                    [csv_path, out / "report.txt"])
    print(report.table())
    failed = [r for r in report.rows if r.error]
    if failed:
        print(f"{len(failed)} case(s) failed; see report.csv", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_mask(args, settings: Settings) -> int:
    out = _out_dir(args)
    white = lfio.read_image(args.white)
    if white.ndim == 3:
        white = white.mean(axis=2)
    dark = lfio.read_image(args.dark) if args.dark else None
    if dark is not None and dark.ndim == 3:
        dark = dark.mean(axis=2)
    sec = settings.section("corrections")
    spec = settings.lattice() if args.rings else None
    mask = build_mask(white, dark, float(sec.get("mask_threshold", 0.2)),
                      float(sec.get("hot_level", 0.1)), spec)
    target = out / args.output
    _guard(target, args.force)
    lfio.write_mask(target, mask)
    _write_manifest(out, "mask", args,
                    [settings.path, Path(args.white), Path(args.dark) if args.dark else None],
                    [target])
    print(f"wrote {target} ({mask.mean():.1%} of pixels valid)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes (default: logical cores)")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--force", action="store_true",
                        help="overwrite outputs and rebuild cached banks")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lfdeblur", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("psf", parents=[common], help="build and cache a PSF bank")

    p = sub.add_parser("render", parents=[common], help="render a (blurred) LF image")
    p.add_argument("--texture", required=True)
    p.add_argument("--kernel", help="motion kernel image (default: none)")
    p.add_argument("--bank", help="PSF bank file (default: build or use cache)")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise, percent")
    p.add_argument("--output", default="lf.png")

    p = sub.add_parser("deblur", parents=[common], help="blind deblurring of an LF image")
    p.add_argument("--input", required=True)
    p.add_argument("--bank")
    p.add_argument("--model-extent", help="ideal sensor extent 'rows cols' when warping")

    sub.add_parser("bench", parents=[common], help="synthetic benchmark suite")

    p = sub.add_parser("mask", parents=[common], help="vignetting / hot-pixel mask")
    p.add_argument("--white", required=True)
    p.add_argument("--dark")
    p.add_argument("--rings", action="store_true", help="also mask microlens border rings")
    p.add_argument("--output", default="mask.png")
    return parser


COMMANDS = {"psf": cmd_psf, "render": cmd_render, "deblur": cmd_deblur,
            "bench": cmd_bench, "mask": cmd_mask}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.threads = max(1, args.threads)
    try:
        settings = Settings(args.config)
        return COMMANDS[args.command](args, settings)
    except (DivergenceError, DegenerateKernelError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError, KeyError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
