"""``modred`` command line: simulate, sample, build projectors, reconstruct.

Every subcommand writes its outputs atomically and records a ``key=value``
manifest. Settings come from an INI file (``--config``) with sections
``[tomo]``, ``[eit]``, ``[prior]`` and ``[solver]``; ``--set
section.key=value`` overrides single entries.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import eit, tomo
from .baecore import ErrorSample, error_statistics
from .formats import (atomic_write_bytes, format_header, read_header, read_mrd1, write_header,
                      write_mrd1, write_pgm)
from .spotlight import empty_projector, projector_from_basis, projector_from_error_sample

log = logging.getLogger("modred")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit status 2."""


# ---------------------------------------------------------------- configuration

TOMO_KEYS = {
    **{("tomo", f): f for f in ("n_side", "n_angles", "n_rays", "region_size", "block", "noise_rel",
                                "n_draws", "k", "data_seed", "sample_seed", "source_radius",
                                "display_min", "display_max")},
    ("prior", "lambda"): "prior_lambda", ("prior", "xi0"): "prior_xi0",
    ("prior", "alpha"): "prior_alpha", ("prior", "gamma"): "prior_gamma",
    ("solver", "tau"): "tau", ("solver", "max_iter"): "max_iter",
}

EIT_KEYS = {
    **{("eit", f): f for f in ("n_electrodes", "coverage", "z", "base_boundary", "refinement",
                               "data_refinement", "fixed_radius", "n_draws", "noise_rel",
                               "data_seed", "sample_seed", "sigma0", "sigma1")},
    ("prior", "lambda"): "prior_lambda", ("prior", "xi0"): "prior_xi0",
    ("prior", "alpha"): "prior_alpha", ("prior", "gamma"): "prior_gamma",
    ("solver", "delta"): "delta", ("solver", "n_iter"): "n_iter",
}


@dataclasses.dataclass
class TomoConfig(tomo.TomoSetup):
    display_min: float = 0.0
    display_max: float = 1.5


def _convert(text: str, default):
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    return float(text)


def load_config(path, overrides, cls, keys):
    """Build ``cls`` from defaults, the INI file, then ``section.key=value`` overrides."""
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file {path} not found")
        parser.read(path)
    for item in overrides or []:
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value)
    defaults = cls()
    values = {}
    for section in parser.sections():
        for key, text in parser.items(section):
            field = keys.get((section, key))
            if field is None:
                # settings of the other experiment kind may share a file
                if (section, key) in TOMO_KEYS or (section, key) in EIT_KEYS:
                    continue
                raise UsageError(f"unknown configuration key [{section}] {key}")
            default = getattr(defaults, field)
            if default is None:
                default = 0 if field == "k" else 0.0
            try:
                values[field] = _convert(text, default)
            except ValueError as exc:
                raise UsageError(f"bad value for [{section}] {key}: {text!r}") from exc
    try:
        return cls(**{**dataclasses.asdict(defaults), **values})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def dump_config(cfg, keys) -> str:
    parser = configparser.ConfigParser()
    for (section, key), field in keys.items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, repr(getattr(cfg, field)) if getattr(cfg, field) is not None else "none")
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def thread_count(arg) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("MODRED_THREADS", "1")
        try:
            n = int(env)
        except ValueError as exc:
            raise UsageError(f"MODRED_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


# ---------------------------------------------------------------- manifest helpers

def _fmt(value) -> str:
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_manifest(outdir: Path, entries: dict) -> None:
    atomic_write_bytes(outdir / "manifest.txt", format_header({k: _fmt(v) for k, v in entries.items()}).encode())


def write_effective_config(outdir: Path, cfg, keys) -> None:
    atomic_write_bytes(outdir / "config.ini", dump_config(cfg, keys).encode())


# ---------------------------------------------------------------- tomography commands

def _tomo_problem(cfg: TomoConfig, with_data: bool):
    return tomo.build_tomo_problem(cfg, with_data=with_data)


def cmd_tomo_simulate(args) -> int:
    cfg = load_config(args.config, args.set, TomoConfig, TOMO_KEYS)
    if args.seed is not None:
        cfg.data_seed = args.seed
    out = Path(args.out)
    prob = _tomo_problem(cfg, with_data=True)
    sino = prob.sino
    write_mrd1(out / "sinogram.mrd1", sino.data)
    write_header(out / "sinogram.mrd1", {"n_angles": cfg.n_angles, "n_rays": cfg.n_rays,
                                          "noise_std": repr(sino.noise_std), "n_side": cfg.n_side,
                                          "source_radius": repr(cfg.source_radius), "seed": cfg.data_seed})
    write_mrd1(out / "phantom.mrd1", prob.phantom)
    lo, hi = write_pgm(out / "phantom.pgm", prob.phantom.reshape(cfg.n_side, cfg.n_side),
                       cfg.display_min, cfg.display_max)
    write_effective_config(out, cfg, TOMO_KEYS)
    write_manifest(out, {"command": "tomo-simulate", "data_seed": cfg.data_seed, "noise_rel": cfg.noise_rel,
                         "noise_std": sino.noise_std, "noise_norm": sino.noise_norm,
                         "m": sino.b.size, "N": prob.grid.N, "pgm_min": lo, "pgm_max": hi})
    return 0


def _read_sinogram(path, cfg: TomoConfig):
    data = read_mrd1(path)
    meta = read_header(path) if Path(str(path) + ".hdr").exists() else {}
    for key in ("n_angles", "n_rays", "n_side"):
        if key in meta:
            setattr(cfg, key, int(meta[key]))
    if "source_radius" in meta:
        cfg.source_radius = float(meta["source_radius"])
    if data.shape != (cfg.n_angles, cfg.n_rays):
        raise ValueError(f"sinogram is {data.shape}, geometry expects {(cfg.n_angles, cfg.n_rays)}")
    std = meta.get("noise_std", "unknown")
    return tomo.Sinogram(data, None if std in ("", "unknown", "None") else float(std))


def _load_sample(path) -> ErrorSample:
    meta = read_header(path) if Path(str(path) + ".hdr").exists() else {}
    return ErrorSample(read_mrd1(path), seed=int(meta.get("seed", 0)), description=meta.get("description", ""))


def cmd_tomo_reconstruct(args) -> int:
    cfg = load_config(args.config, args.set, TomoConfig, TOMO_KEYS)
    if args.tau is not None:
        cfg.tau = args.tau
    if args.max_iter is not None:
        cfg.max_iter = args.max_iter
    workers = thread_count(args.threads)
    sino = _read_sinogram(args.sino, cfg)
    prob = _tomo_problem(cfg, with_data=False)
    m = sino.b.size
    if args.noise_std is not None:
        std, noise_source = args.noise_std, "flag"
    elif sino.noise_std is not None:
        std, noise_source = sino.noise_std, "header"
    else:
        std, noise_source = tomo.estimate_noise_from_air(sino, prob.A_N), "air rays"
    noise_norm = std * math.sqrt(m)

    model = proj = None
    extra = {}
    if args.method in ("bae", "spotlight"):
        if args.sample:
            sample = _load_sample(args.sample)
            if sample.m != m:
                raise ValueError(f"error sample has {sample.m} rows, data has {m}")
        else:
            prior = tomo.tomo_prior(cfg, prob.grid, gamma_default=float(prob.phantom.max()))
            sample = tomo.tomo_error_sample(prob, prior, cfg.n_draws, cfg.sample_seed, workers)
        model = error_statistics(sample, std)
        extra["n_draws"] = sample.L
        if args.method == "spotlight":
            if args.basis:
                proj = projector_from_basis(read_mrd1(args.basis))
            else:
                k = cfg.k if cfg.k is not None else max(1, sample.L - 1)
                proj, _ = projector_from_error_sample(sample, k, noise_norm=noise_norm)
            extra["projector_rank"] = proj.rank

    reference = roi = None
    if args.reference:
        ref_fine = read_mrd1(args.reference).ravel()
        reference = ref_fine if args.method == "fine" else tomo.restrict_image(prob.cmap, ref_fine)
        roi = (np.flatnonzero(prob.region.mask(prob.grid)) if args.method == "fine"
               else np.arange(prob.cmap.n_spot))
    x, diag = tomo.tomo_reconstruct(args.method, sino.b, noise_norm, A_fine=prob.A_N, A_coarse=prob.A_n,
                                    model=model, projector=proj, tau=cfg.tau, max_iter=cfg.max_iter,
                                    reference=reference, roi=roi)
    out = Path(args.out)
    write_mrd1(out / "image.mrd1", x)
    fine_view = x if args.method == "fine" else tomo.expand_image(prob.cmap, x)
    lo, hi = write_pgm(out / "image.pgm", fine_view.reshape(cfg.n_side, cfg.n_side),
                       cfg.display_min, cfg.display_max)
    write_effective_config(out, cfg, TOMO_KEYS)
    entries = {"command": "tomo-reconstruct", "method": args.method, "noise_std": std,
               "noise_source": noise_source, "noise_norm": noise_norm, "tau": cfg.tau,
               "max_iter": cfg.max_iter, "iters": diag.iters, "stop_reason": diag.stop_reason,
               "reached_target": diag.reached_target, "residual_norm": diag.residual_norm,
               **extra, "pgm_min": lo, "pgm_max": hi, "discrepancy_history": diag.history}
    if diag.roi_error is not None:
        entries["roi_rel_error"] = diag.roi_error
    write_manifest(out, entries)
    if not diag.reached_target:
        log.warning("%s reconstruction stopped by %s before the discrepancy target", args.method, diag.stop_reason)
    return 0


# ---------------------------------------------------------------- EIT commands

def _eit_parts(cfg: eit.EITSetup):
    electrodes = eit.Electrodes(cfg.n_electrodes, cfg.coverage, cfg.z)
    frame = eit.pairwise_frame(cfg.n_electrodes)
    unit = eit.unit_disk_mesh(cfg.refinement, cfg.base_boundary)
    return electrodes, frame, unit, eit.free_elements(unit, cfg.fixed_radius)


def cmd_eit_simulate(args) -> int:
    cfg = load_config(args.config, args.set, eit.EITSetup, EIT_KEYS)
    if args.seed is not None:
        cfg.data_seed = args.seed
    electrodes, frame, unit, free = _eit_parts(cfg)
    shape = eit.draw_random_shape(cfg.data_seed)
    V, std = eit.simulate_eit_data(cfg, shape, electrodes, frame)
    out = Path(args.out)
    U = V.reshape(frame.n_patterns, electrodes.n).T
    write_mrd1(out / "voltages.mrd1", U)
    write_header(out / "voltages.mrd1", {"L": electrodes.n, "frame": "pairwise e_k - e_L",
                                          "noise_std": repr(std)})
    truth = eit.smooth_inclusion(unit.centroids(), sigma0=cfg.sigma0, sigma1=cfg.sigma1)
    truth[np.setdiff1d(np.arange(unit.n_elements), free)] = cfg.sigma0
    write_mrd1(out / "truth.mrd1", truth)
    eit.write_mesh(out / "reference_mesh.txt", eit.deform_mesh(unit, eit.STANDARD_SHAPE), electrodes)
    write_effective_config(out, cfg, EIT_KEYS)
    write_manifest(out, {"command": "eit-simulate", "data_seed": cfg.data_seed, "a_c": shape.a_c,
                         "a_s": shape.a_s, "x_scale": shape.x_scale, "noise_std": std, "m": V.size})
    return 0


def cmd_eit_reconstruct(args) -> int:
    cfg = load_config(args.config, args.set, eit.EITSetup, EIT_KEYS)
    workers = thread_count(args.threads)
    electrodes, frame, unit, free = _eit_parts(cfg)
    U = read_mrd1(args.data)
    if U.shape != (electrodes.n, frame.n_patterns):
        raise ValueError(f"voltage matrix is {U.shape}, expected {(electrodes.n, frame.n_patterns)}")
    V = U.T.ravel()
    entries = {"command": "eit-reconstruct", "projected": not args.no_projection, "delta": cfg.delta,
               "n_iter": cfg.n_iter}
    if args.no_projection:
        proj, mu = empty_projector(V.size), None
    else:
        if args.sample:
            sample = _load_sample(args.sample)
            if sample.m != V.size:
                raise ValueError(f"error sample has {sample.m} rows, data has {V.size}")
        else:
            prior = eit.eit_prior(unit, free, cfg.prior_lambda, cfg.prior_xi0, cfg.prior_alpha, cfg.prior_gamma)
            sample = eit.eit_error_sample(cfg.n_draws, cfg.sample_seed, prior, electrodes, frame,
                                          eit.STANDARD_SHAPE, unit, free, cfg.sigma0, workers)
        proj, _ = projector_from_error_sample(sample, max(1, sample.L - 1))
        mu = sample.draws.mean(axis=1)
        entries["projector_rank"] = proj.rank
    hist = eit.GNHistory()
    x = eit.gauss_newton_eit(V, proj, mu, eit.deform_mesh(unit, eit.STANDARD_SHAPE), electrodes, frame,
                             reg_lambda=cfg.prior_lambda, delta=cfg.delta, n_iter=cfg.n_iter, free=free,
                             sigma0=cfg.sigma0, history=hist)
    sigma = eit.embed_conductivity(cfg.sigma0 * np.exp(x), free, unit.n_elements, cfg.sigma0)
    out = Path(args.out)
    write_mrd1(out / "conductivity.mrd1", sigma)
    entries.update(misfit_history=hist.misfit, step_norms=hist.step_norm)
    if args.truth:
        truth = read_mrd1(args.truth).ravel()
        entries["rel_error"] = eit.conductivity_error(sigma, truth, unit.signed_areas(), free)
    write_effective_config(out, cfg, EIT_KEYS)
    write_manifest(out, entries)
    return 0


# ---------------------------------------------------------------- sampling and projectors

def cmd_bae_sample(args) -> int:
    workers = thread_count(args.threads)
    if args.kind == "tomo":
        cfg = load_config(args.config, args.set, TomoConfig, TOMO_KEYS)
        keys = TOMO_KEYS
        L = args.draws if args.draws is not None else cfg.n_draws
        seed = args.seed if args.seed is not None else cfg.sample_seed
        prob = _tomo_problem(cfg, with_data=False)
        prior = tomo.tomo_prior(cfg, prob.grid, gamma_default=float(prob.phantom.max()))
        sample = tomo.tomo_error_sample(prob, prior, L, seed, workers)
    else:
        cfg = load_config(args.config, args.set, eit.EITSetup, EIT_KEYS)
        keys = EIT_KEYS
        L = args.draws if args.draws is not None else cfg.n_draws
        seed = args.seed if args.seed is not None else cfg.sample_seed
        electrodes, frame, unit, free = _eit_parts(cfg)
        prior = eit.eit_prior(unit, free, cfg.prior_lambda, cfg.prior_xi0, cfg.prior_alpha, cfg.prior_gamma)
        sample = eit.eit_error_sample(L, seed, prior, electrodes, frame, eit.STANDARD_SHAPE, unit, free,
                                      cfg.sigma0, workers)
    out = Path(args.out)
    write_mrd1(out, sample.draws)
    write_header(out, {"kind": args.kind, "L": sample.L, "m": sample.m, "seed": seed,
                       "description": sample.description})
    atomic_write_bytes(Path(str(out) + ".ini"), dump_config(cfg, keys).encode())
    return 0


def cmd_spotlight_basis(args) -> int:
    sample = _load_sample(args.sample)
    k = args.k if args.k is not None else max(1, sample.L - 1)
    if not 1 <= k <= sample.L:
        raise UsageError(f"-k must lie in [1, {sample.L}]")
    proj, diag = projector_from_error_sample(sample, k, noise_norm=args.noise_norm)
    out = Path(args.out)
    write_mrd1(out, proj.U)
    write_header(out, {"k_requested": k, "rank": proj.rank, "suggested_k": diag.suggested_k,
                       "lambdas": _fmt(diag.lambdas), "tail": _fmt(diag.tail),
                       "warnings": " | ".join(diag.warnings)})
    return 0


def cmd_check(args) -> int:
    from .checks import run_checks

    ok_all = True
    for name, ok, detail in run_checks():
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if ok_all else 1


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modred", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI file with [tomo], [eit], [prior], [solver]")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
        p.add_argument("--threads", type=int, help="worker cap (default: MODRED_THREADS or 1)")

    p = sub.add_parser("tomo-simulate", help="synthetic phantom and noisy fan-beam sinogram")
    common(p)
    p.add_argument("--seed", type=int, help="data seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tomo_simulate)

    p = sub.add_parser("tomo-reconstruct", help="fine, naive, BAE or spotlight reconstruction")
    common(p)
    p.add_argument("--sino", required=True, help="sinogram MRD1 file (with .hdr sidecar)")
    p.add_argument("--method", required=True, choices=tomo.METHODS)
    p.add_argument("--sample", help="error sample MRD1 (drawn on the fly when omitted)")
    p.add_argument("--basis", help="projector basis MRD1 for the spotlight method")
    p.add_argument("--reference", help="fine reference image MRD1 for the error report")
    p.add_argument("--noise-std", type=float, help="noise std (default: header, else air rays)")
    p.add_argument("--tau", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tomo_reconstruct)

    p = sub.add_parser("eit-simulate", help="voltages of the inclusion phantom on a random shape")
    common(p)
    p.add_argument("--seed", type=int, help="data seed (also selects the shape)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eit_simulate)

    p = sub.add_parser("eit-reconstruct", help="Gauss-Newton on the reference shape")
    common(p)
    p.add_argument("--data", required=True, help="voltage MRD1 file (L x L-1)")
    p.add_argument("--sample", help="error sample MRD1 (drawn on the fly when omitted)")
    p.add_argument("--no-projection", action="store_true", help="ignore the modelling error")
    p.add_argument("--truth", help="true conductivity MRD1 for the error report")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eit_reconstruct)

    p = sub.add_parser("bae-sample", help="draw an approximation-error sample")
    common(p)
    p.add_argument("--kind", required=True, choices=("tomo", "eit"))
    p.add_argument("-L", "--draws", type=int, help="number of draws")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", required=True, help="MRD1 output file")
    p.set_defaults(func=cmd_bae_sample)

    p = sub.add_parser("spotlight-basis", help="projector basis from an error sample")
    common(p, config=False)
    p.add_argument("--sample", required=True, help="error sample MRD1")
    p.add_argument("-k", type=int, help="number of singular vectors (default: L - 1)")
    p.add_argument("--noise-norm", type=float, help="noise norm for the suggested k")
    p.add_argument("--out", required=True, help="MRD1 output file")
    p.set_defaults(func=cmd_spotlight_basis)

    p = sub.add_parser("check", help="run the invariant suite")
    common(p, config=False)
    p.set_defaults(func=cmd_check)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"modred: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"modred: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
