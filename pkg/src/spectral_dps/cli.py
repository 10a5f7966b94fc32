"""``spectral-dps`` command line.

Subcommands: phantom, simulate, train, decompose, evaluate, export.  Every
command reads the same flat configuration (``--config`` YAML plus ``--set
key=value`` overrides; see ``spectral-dps keys``).  Exit codes: 0 success,
2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import resource
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import io, metrics, physics
from .config import ConfigError, ExperimentConfig, describe
from .phantoms import synth_phantom
from .projector import Geometry

log = logging.getLogger("spectral_dps")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TIMING_THRESHOLD = 0.3


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def geometry_from_config(cfg: ExperimentConfig) -> Geometry:
    return Geometry(image_size=cfg["geometry.image_size"], n_views=cfg["geometry.n_views"],
                    n_det=cfg["geometry.n_det"], det_pitch=cfg["geometry.det_pitch"],
                    pixel_size=cfg["geometry.pixel_size"], arc=cfg["geometry.arc"],
                    beam=cfg["geometry.beam"], sod=cfg["geometry.sod"], sdd=cfg["geometry.sdd"])


def system_from_config(cfg: ExperimentConfig, n_views: int):
    return physics.make_system(cfg["system"], n_views, mas_per_view=cfg["exposure.mas_per_view"],
                               photons_per_mas=cfg["exposure.photons_per_mas"])


def _set_threads(n: int):
    try:
        import torch
        torch.set_num_threads(n)
    except ImportError:  # pragma: no cover
        pass


# -- commands ----------------------------------------------------------------

def cmd_phantom(cfg: ExperimentConfig, out: Path):
    written = []
    for k in range(cfg["phantom.count"]):
        seed = cfg["seed"] + k
        img = synth_phantom(seed, cfg["phantom.recipe"], cfg["geometry.image_size"],
                            cfg["geometry.pixel_size"])
        bin_path, meta_path = io.save_material_image(out / f"phantom_{cfg['phantom.recipe']}_s{seed}", img)
        written += [bin_path, meta_path]
        print(f"{bin_path.name} sha256={_digest(bin_path)}")
    return written


def cmd_simulate(cfg: ExperimentConfig, out: Path):
    cfg.require_paths("paths.phantom")
    truth = io.load_material_image(cfg["paths.phantom"])
    geom = geometry_from_config(cfg)
    if truth.shape != (geom.image_size, geom.image_size):
        raise ConfigError([f"paths.phantom: image is {truth.shape}, geometry.image_size is {geom.image_size}"])
    sys_ = system_from_config(cfg, geom.n_views)
    mean = physics.mean_measurement(truth, sys_, geom)
    io.atomic_write(out / "system.txt", physics.system_to_text(sys_))
    io.save_sinogram(out / "sino_mean", mean, geom, phantom=Path(cfg["paths.phantom"]).name)
    paths = [out / "sino_mean.bin"]
    if cfg["exposure.noise"]:
        noisy = physics.sample_measurement(mean, cfg["seed"])
        io.save_sinogram(out / "sino", noisy, geom, phantom=Path(cfg["paths.phantom"]).name)
        paths.append(out / "sino.bin")
    tags = [",".join(sys_.labels[c] for c in range(sys_.n_channels) if sys_.view_mask[c, v])
            for v in range(min(4, geom.n_views))]
    print(f"system {sys_.kind}: {geom.n_views} views, channels {' '.join(sys_.labels)}; "
          f"first views {tags}")
    return paths


def _load_dataset(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("*.meta"))
    imgs = [io.load_material_image(f) for f in files]
    imgs = [im.stack() for im in imgs if "_var" not in im.meta.get("role", "")]
    if not imgs:
        raise RuntimeError(f"dataset directory {directory} holds no material images")
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise RuntimeError(f"dataset images differ in shape: {sorted(shapes)}")
    return np.stack(imgs)


def cmd_train(cfg: ExperimentConfig, out: Path):
    from . import denoiser
    from .diffusion import make_schedule

    cfg.require_paths("paths.dataset")
    data = _load_dataset(cfg["paths.dataset"])
    sched = make_schedule(cfg["diffusion.T"], cfg["diffusion.beta_1"], cfg["diffusion.beta_T"])
    scale = (cfg["train.scale_water"], cfg["train.scale_calcium"])
    tcfg = denoiser.TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
                                lr=cfg["train.lr"], max_steps=cfg["train.max_steps"] or None,
                                scale=scale, net=denoiser.NetConfig(base_width=cfg["train.base_width"]))
    net = opt_state = state = None
    prior_losses = []
    if cfg["paths.resume"]:
        cfg.require_paths("paths.resume")
        model, sched, info = denoiser.load_checkpoint(cfg["paths.resume"])
        net, opt_state, state = model.net, info["optimizer"], info["train_state"]
        loss_csv = Path(cfg["paths.resume"]).with_name("loss.csv")
        if loss_csv.exists():
            prior_losses = [float(r[1]) for r in io.read_csv(loss_csv)[1]]
        prior_losses = prior_losses[:state.step]
    t0 = time.monotonic()
    net, opt, state = denoiser.train_denoiser(data, sched, tcfg, seed=cfg["seed"], net=net,
                                              optimizer_state=opt_state, state=state)
    wall = time.monotonic() - t0
    losses = prior_losses + state.losses
    ckpt = denoiser.save_checkpoint(out / "denoiser.ckpt", net, sched, scale, opt, state,
                                    extra={"dataset": str(cfg["paths.dataset"]), "images": len(data),
                                           "seed": cfg["seed"]})
    io.write_csv(out / "loss.csv", ("step", "loss"), [(i + 1, float(v)) for i, v in enumerate(losses)])
    seg = state.losses
    print(f"trained {len(seg)} steps in {wall:.1f} s on {len(data)} images; "
          f"loss {seg[0]:.4f} -> {np.mean(seg[-min(50, len(seg)):]):.4f}" if seg else "no steps run")
    return [ckpt, out / "loss.csv"]


def _run_algorithm(cfg, name, y, sys_, geom, model, sched, seeds, eta=None):
    from . import decompose

    kind, default_eta = cfg.step()
    step = decompose.StepSizeSchedule(kind, default_eta if eta is None else eta)
    clamp = cfg["algorithm.clamp"]
    if name == "sdps":
        return decompose.sdps(y, sys_, geom, model, sched, step, seed=seeds, clamp=clamp)
    return decompose.jsdps(y, sys_, geom, model, sched, cfg["algorithm.t_prime"], step,
                           grad_approx=cfg["algorithm.grad_approx"], seed=seeds, clamp=clamp)


def cmd_decompose(cfg: ExperimentConfig, out: Path):
    from . import decompose

    name = cfg["algorithm.name"]
    cfg.require_paths("paths.sinogram")
    y, meta = io.load_sinogram(cfg["paths.sinogram"])
    geom = Geometry.from_meta(meta)
    sys_path = Path(cfg["paths.sinogram"]).with_name("system.txt")
    sys_ = physics.system_from_text(sys_path.read_text()) if sys_path.exists() \
        else system_from_config(cfg, geom.n_views)
    result_dir = out / name
    manifest = {"algorithm": name, "sinogram": cfg["paths.sinogram"], "system": sys_.kind,
                "base_seed": cfg["seed"], "clamp": cfg["algorithm.clamp"]}
    if name == "image-domain":
        t0 = time.monotonic()
        img = decompose.image_domain_decomposition(y, sys_, geom, filter=cfg["algorithm.filter"],
                                                   clamp=cfg["algorithm.clamp"])
        wall = time.monotonic() - t0
        results = [decompose.DecompositionResult(img, 1, wall, np.zeros(1), name,
                                                 {"filter": cfg["algorithm.filter"], "clamp": cfg["algorithm.clamp"]})]
    elif name == "mbmd":
        results = [decompose.mbmd(y, sys_, geom, cfg["algorithm.lam_w"], cfg["algorithm.lam_c"],
                                  cfg["algorithm.n_iter"], cfg["algorithm.init"], cfg["algorithm.clamp"])]
    else:
        from .denoiser import load_checkpoint

        cfg.require_paths("paths.checkpoint")
        model, sched, _ = load_checkpoint(cfg["paths.checkpoint"])
        if name == "jsdps" and cfg["algorithm.t_prime"] > sched.T:
            raise ConfigError([f"algorithm.t_prime: {cfg['algorithm.t_prime']} exceeds the checkpoint's T = {sched.T}"])
        seeds = [cfg["seed"] + i for i in range(cfg["ensemble.size"])]
        eta = None
        if cfg["algorithm.sweep"]:
            cfg.require_paths("paths.truth")
            truth = io.load_material_image(cfg["paths.truth"])
            base = cfg.step()[1]
            eta, table = decompose.sweep_step_size(
                lambda e: _run_algorithm(cfg, name, y, sys_, geom, model, sched, seeds[:1], e),
                truth, [base * f for f in cfg["algorithm.sweep_grid"]], metrics.fov_mask(truth.shape))
            manifest["sweep_grid"] = [e for e, _ in table]
            manifest["sweep_mse"] = [m for _, m in table]
            manifest["sweep_eta"] = eta
            print(f"eta sweep: chose {eta:g} from " + ", ".join(f"{e:g}:{m:.3g}" for e, m in table))
        results = _run_algorithm(cfg, name, y, sys_, geom, model, sched, seeds, eta)
        kind, default_eta = cfg.step()
        manifest.update(step_kind=kind, eta=default_eta if eta is None else eta, T=sched.T,
                        steps=results[0].iterations, seeds=seeds)
    for i, res in enumerate(results):
        io.save_result(result_dir, res, i)
    manifest.update(members=len(results), iterations=results[0].iterations,
                    wall_time_s=results[0].wall_time, config=results[0].config,
                    peak_rss_mb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0)  # informational
    io.atomic_write(result_dir / "manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")
    print(f"{name}: {len(results)} member(s), {results[0].iterations} iterations/steps, "
          f"{results[0].wall_time:.2f} s")
    return [result_dir]


def cmd_evaluate(cfg: ExperimentConfig, out: Path):
    cfg.require_paths("paths.results", "paths.truth")
    truth = io.load_material_image(cfg["paths.truth"])
    mask = metrics.fov_mask(truth.shape)
    report, timing = {"mask": "inscribed circle", "mask_pixels": int(mask.sum()), "algorithms": {}}, []
    for rdir in cfg["paths.results"]:
        rdir = Path(rdir)
        man = json.loads((rdir / "manifest.json").read_text())
        members = io.load_results(rdir)
        if not members:
            raise RuntimeError(f"{rdir} holds no results")
        quality = [metrics.quality_report(m, truth, mask).to_dict() for m in members]
        entry = {"members": len(members), "quality_first": quality[0]}
        if len(members) >= 2:
            entry["ensemble"] = metrics.ensemble_stats(members, truth, mask).to_dict()
            entry["quality_mean_image"] = metrics.quality_report(
                np.mean([m.stack() for m in members], axis=0), truth, mask).to_dict()
        report["algorithms"][man["algorithm"]] = entry
        it = int(man["iterations"])
        timing.append((man["algorithm"], len(members), it, float(man["wall_time_s"]),
                       float(man["wall_time_s"]) / max(it, 1)))
    io.atomic_write(out / "report.json", json.dumps(report, indent=2, default=float) + "\n")
    io.write_csv(out / "timing.csv", ("algorithm", "members", "steps", "wall_time_s", "time_per_step_s"), timing)
    lines = [f"{'algorithm':14s} {'members':>7s} {'steps':>6s} {'wall_s':>10s} {'s/step':>10s}"]
    lines += [f"{a:14s} {m:7d} {s:6d} {w:10.3f} {p:10.5f}" for a, m, s, w, p in timing]
    walls = {a: w for a, _, _, w, _ in timing}
    if "sdps" in walls and "jsdps" in walls:
        ratio = walls["jsdps"] / walls["sdps"]
        verdict = "PASS" if ratio <= TIMING_THRESHOLD else "FAIL"
        lines.append(f"jsdps/sdps wall-time ratio {ratio:.3f} (threshold {TIMING_THRESHOLD}): {verdict}")
    text = "\n".join(lines) + "\n"
    io.atomic_write(out / "timing.txt", text)
    for name, entry in report["algorithms"].items():
        q = entry["quality_first"]
        print(f"{name}: " + "; ".join(f"{mat} SSIM {q['ssim'][mat]:.4f} PSNR {q['psnr'][mat]:.2f} "
                                      f"RMSE {q['rmse'][mat]:.4f}" for mat in metrics.MATERIALS))
    print(text, end="")
    return [out / "report.json", out / "timing.csv", out / "timing.txt"]


def cmd_export(cfg: ExperimentConfig, out: Path, files, window=None, level=None, fmt="png"):
    written = []
    for f in files:
        img = io.load_material_image(f)
        for mat, plane in zip(metrics.MATERIALS, img.stack()):
            w, l = io.WINDOWS[mat]
            w = w if window is None else window
            l = l if level is None else level
            if not w > 0:
                raise ConfigError([f"window must be positive, got {w}"])
            written.append(io.export_image(out / f"{Path(f).with_suffix('').name}_{mat}.{fmt}", plane, w, l))
    for p in written:
        print(p)
    return written


# -- entry point -------------------------------------------------------------

def _parse_set(items):
    overrides = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="torch threads")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spectral-dps", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="write procedural phantoms")
    sub.add_parser("simulate", parents=[common], help="simulate mean and noisy sinograms")
    sub.add_parser("train", parents=[common], help="train the denoiser")
    sub.add_parser("decompose", parents=[common], help="run a decomposition algorithm")
    sub.add_parser("evaluate", parents=[common], help="metrics and timing table")
    ex = sub.add_parser("export", parents=[common], help="8-bit window/level images")
    ex.add_argument("files", nargs="+", help="material image files (.bin or .meta)")
    ex.add_argument("--window", type=float)
    ex.add_argument("--level", type=float)
    ex.add_argument("--format", choices=("png", "pgm"), default="png")
    sub.add_parser("keys", help="list configuration keys and defaults")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "keys":
        print(describe(), end="")
        return EXIT_OK
    try:
        overrides = _parse_set(args.set)
        flags = {"seed": args.seed, "out": str(args.out) if args.out else None, "threads": args.threads}
        overrides.update({k: v for k, v in flags.items() if v is not None})
        cfg = ExperimentConfig.load(args.config, overrides)
        _set_threads(cfg["threads"])
        out = Path(cfg["out"])
        if args.command == "export":
            cmd_export(cfg, out, args.files, args.window, args.level, args.format)
        else:
            globals()[f"cmd_{args.command}"](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - map every failure to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
