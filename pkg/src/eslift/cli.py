"""Command-line interface.

Subcommands cover the full experiment cycle: synthetic data generation,
single-pass rotation estimation, joint refinement, sampling-set export, the
interval sequence diagnostic, and rotation evaluation.  Option precedence is
defaults < config file (--config, key=value lines) < explicit flags; every
command is deterministic given its flags and seed.  Exit codes: 0 on success,
1 on runtime failures, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .cryoem import CtfParams, ImageStack, Volume, generate_dataset
from .errors import EsliftError
from .esl import EslConfig
from .manifold import Rotation
from .metrics import align_rotations, euler_zyz, summarize, w2_to_dirac
from .refine import (
    RefinementConfig,
    default_parameters,
    joint_refine,
    rotation_losses,
    update_rotations,
)
from .sampling import interval_decay_report, nn_spacing_stats, so3_mesh


def _check_input(path: str, parser: argparse.ArgumentParser) -> Path:
    p = Path(path)
    if not p.is_file():
        parser.error(f"input file not found: {p}")
    return p


def _load_volume(path) -> Volume:
    data = io.read_eslt(path).astype(np.float64)
    if data.ndim != 3:
        raise EsliftError(f"{path}: expected a rank-3 ESLT volume")
    return Volume(data=data, voxel_size=_VOXEL_SIZE)


# Physical pixel size is carried outside the ESLT payload; commands set it
# from --pixel-size-nm (kept module-level so helpers stay small).
_VOXEL_SIZE = 1.0


def _ctf_from_args(args) -> CtfParams:
    return CtfParams.from_conventional(args.defocus_um, args.cs_mm,
                                       args.wavenumber_invnm, args.amp_contrast)


def cmd_gen_data(args, parser) -> int:
    volume = _load_volume(_check_input(args.volume, parser))
    params = _ctf_from_args(args)
    dataset = generate_dataset(volume, args.num_images, args.snr, params,
                               args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_eslt(out / "images.eslt", dataset.images.data)
    io.write_rotations_csv(out / "gt_rotations.csv", dataset.gt_rotations)
    io.write_params_txt(out / "params.txt", {
        "num_images": args.num_images,
        "snr": args.snr,
        "defocus_um": args.defocus_um,
        "cs_mm": args.cs_mm,
        "wavenumber_invnm": args.wavenumber_invnm,
        "amp_contrast": args.amp_contrast,
        "seed": args.seed,
        "pixel_size_nm": args.pixel_size_nm,
        "noise_sigma": dataset.noise_sigma,
    })
    print(f"wrote {dataset.images.n_images} images of size "
          f"{dataset.images.n}x{dataset.images.n} to {out}")
    return 0


def cmd_estimate_rotations(args, parser) -> int:
    volume = _load_volume(_check_input(args.volume, parser))
    images_data = io.read_eslt(_check_input(args.images, parser)).astype(np.float64)
    images = ImageStack(data=images_data, pixel_size=volume.voxel_size)
    sampling = so3_mesh(args.mesh_level)
    sigma, _, _ = default_parameters(images, volume)
    losses = rotation_losses(volume, images, sampling, _ctf_from_args(args),
                             sigma, chunk_size=args.chunk, threads=args.threads)
    cfg = EslConfig(eta=args.eta, j0=args.j0, gamma=args.gamma)
    rots, weights, gammas, _ = update_rotations(losses, sampling, cfg)
    io.write_rotations_csv(args.out_rotations, rots)
    if args.out_weights:
        io.write_weights_csv(args.out_weights, weights)

    row = {"iter": 1, "mean_l0": float(np.mean([w.support_size for w in weights])),
           "mean_gamma": float(np.mean(gammas)), "objective": float("nan"),
           "mean_err_deg": float("nan"), "std_err_deg": float("nan"),
           "mean_w2_deg": float("nan")}
    if args.gt_rotations:
        gt = io.read_rotations_csv(_check_input(args.gt_rotations, parser))
        ali = align_rotations(rots, gt)
        w2s = [w2_to_dirac(w, Rotation(gt[i])) for i, w in enumerate(weights)]
        row["mean_err_deg"] = float(np.degrees(ali.mean))
        row["std_err_deg"] = float(np.degrees(ali.std))
        row["mean_w2_deg"] = float(np.degrees(np.mean(w2s)))
    if args.out_metrics:
        io.write_metrics_csv(args.out_metrics, [row])
    print(f"estimated {rots.shape[0]} rotations over {len(sampling)} samples; "
          f"mean support {row['mean_l0']:.2f}")
    return 0


def cmd_refine(args, parser) -> int:
    v0 = _load_volume(_check_input(args.init_volume, parser))
    images_data = io.read_eslt(_check_input(args.images, parser)).astype(np.float64)
    images = ImageStack(data=images_data, pixel_size=v0.voxel_size)
    gt = None
    if args.gt_rotations:
        gt = io.read_rotations_csv(_check_input(args.gt_rotations, parser))
    sampling = so3_mesh(args.mesh_level)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = RefinementConfig(eta=args.eta, j0=args.j0, outer_iters=args.iters,
                              sampling_level=args.mesh_level,
                              loss_chunk=args.chunk, threads=args.threads)

    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()

    def persist(state):
        io.write_eslt(out / f"volume_{state.iteration}.eslt", state.volume.data)
        io.write_rotations_csv(out / f"rotations_{state.iteration}.csv",
                               state.rotations)
        io.append_metrics_row(metrics_path, state.history[-1])

    state = joint_refine(images, v0, _ctf_from_args(args), sampling, config,
                         gt_rotations=gt, on_iteration=persist)
    io.write_rotations_csv(out / "rotations.csv", state.rotations)
    io.write_eslt(out / "volume.eslt", state.volume.data)
    print(f"refined for {state.iteration} iterations; outputs in {out}")
    return 0


def cmd_lds_check(args, parser) -> int:
    if not 0.0 < args.eta < 2.0:
        parser.error(f"eta must lie in (0, 2), got {args.eta}")
    reports = interval_decay_report(args.eta, args.b, args.levels)
    lines = ["level,size,count_gap,quad_gap,count_gap_norm,quad_gap_norm"]
    for rep in reports:
        cn = rep.count_gap * rep.size ** ((1.0 + args.eta) / 3.0)
        qn = rep.quad_gap * rep.size ** (1.0 + args.eta)
        lines.append(f"{rep.level},{rep.size},{rep.count_gap:.17g},"
                     f"{rep.quad_gap:.17g},{cn:.17g},{qn:.17g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    # decay trend check on the tail (the first levels are too coarse to order)
    tail = reports[2:]
    cns = [r.count_gap * r.size ** ((1.0 + args.eta) / 3.0) for r in tail]
    qns = [r.quad_gap * r.size ** (1.0 + args.eta) for r in tail]
    ok = all(a > b for a, b in zip(cns, cns[1:])) and \
        all(a > b for a, b in zip(qns, qns[1:]))
    print(f"normalised gaps decreasing from level 3: {ok}")
    return 0 if ok else 1


def cmd_so3_mesh(args, parser) -> int:
    sampling = so3_mesh(args.level)
    io.write_rotations_csv(args.out, sampling.points)
    mean, cov, mn = nn_spacing_stats(sampling)
    print(f"level {args.level}: {len(sampling)} rotations; nearest-neighbour "
          f"spacing mean {np.degrees(mean):.4f} deg, cv {cov:.4f}, "
          f"min {np.degrees(mn):.4f} deg")
    return 0


def cmd_eval(args, parser) -> int:
    est = io.read_rotations_csv(_check_input(args.est, parser))
    gt = io.read_rotations_csv(_check_input(args.gt, parser))
    if est.shape != gt.shape:
        parser.error(f"length mismatch: {est.shape[0]} estimates vs "
                     f"{gt.shape[0]} ground-truth rotations")
    ali = align_rotations(est, gt)
    row = summarize(est.shape[0], float("nan"), ali.aligned_errors, [], [])
    lines = ["index,err_deg,phi_deg,theta_deg,psi_deg"]
    for i in range(est.shape[0]):
        phi, theta, psi = euler_zyz(Rotation(est[i]))
        lines.append(f"{i},{np.degrees(ali.aligned_errors[i]):.8f},"
                     f"{np.degrees(phi):.8f},{np.degrees(theta):.8f},"
                     f"{np.degrees(psi):.8f}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"mean aligned error {row.mean_err_deg:.4f} deg "
          f"(std {row.std_err_deg:.4f}), reflection gauge: {ali.reflected}")
    return 0


def _add_ctf_args(p: argparse.ArgumentParser):
    p.add_argument("--defocus-um", type=float, default=1.5)
    p.add_argument("--cs-mm", type=float, default=2.0)
    p.add_argument("--wavenumber-invnm", type=float, default=0.25)
    p.add_argument("--amp-contrast", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eslift",
        description="Lifted rotation estimation and joint map refinement")
    parser.add_argument("--config", help="key=value file overriding defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesise a projection stack")
    p.add_argument("--volume", required=True)
    p.add_argument("--num-images", type=int, default=256)
    p.add_argument("--snr", type=float, default=0.0625)
    _add_ctf_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pixel-size-nm", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("estimate-rotations", help="one rotation-update pass")
    p.add_argument("--volume", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--mesh-level", type=int, default=1)
    p.add_argument("--eta", type=float, default=0.66)
    p.add_argument("--j0", type=float, default=15.0)
    p.add_argument("--gamma", type=float, default=None)
    _add_ctf_args(p)
    p.add_argument("--pixel-size-nm", type=float, default=1.0)
    p.add_argument("--chunk", type=int, default=2048)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-rotations", required=True)
    p.add_argument("--out-weights")
    p.add_argument("--out-metrics")
    p.add_argument("--gt-rotations")
    p.set_defaults(func=cmd_estimate_rotations)

    p = sub.add_parser("refine", help="alternating joint refinement")
    p.add_argument("--images", required=True)
    p.add_argument("--init-volume", required=True)
    p.add_argument("--mesh-level", type=int, default=1)
    p.add_argument("--eta", type=float, default=0.66)
    p.add_argument("--j0", type=float, default=15.0)
    p.add_argument("--iters", type=int, default=10)
    _add_ctf_args(p)
    p.add_argument("--pixel-size-nm", type=float, default=1.0)
    p.add_argument("--chunk", type=int, default=2048)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--gt-rotations")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("lds-check", help="interval sequence decay diagnostic")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--levels", type=int, default=7)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lds_check)

    p = sub.add_parser("so3-mesh", help="export a rotation sampling set")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_so3_mesh)

    p = sub.add_parser("eval", help="align and score estimated rotations")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold --config key=value pairs in as defaults (flags still win)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        parser.error("--config requires a path")
    try:
        overrides = io.read_config_file(path)
    except OSError as exc:
        parser.error(f"cannot read config file: {exc}")
    out = argv[:i] + argv[i + 2:]
    # insert right after the subcommand so explicit flags (later) override
    inject = []
    for k, v in overrides.items():
        inject.extend([f"--{k.replace('_', '-')}", v])
    if out:
        return out[:1] + inject + out[1:]
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    global _VOXEL_SIZE
    _VOXEL_SIZE = getattr(args, "pixel_size_nm", 1.0)
    try:
        return args.func(args, parser)
    except EsliftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
