"""Command-line pipeline: synth, build-atlas, register, evaluate, invert.

Exit codes: 0 success, 1 runtime/numeric/I-O failure, 2 usage or config
error.  All commands read the same flat ``key = value`` config format
('#' starts a comment; unknown keys are rejected).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .atlas import Cohort
from .errors import ConfigError
from .evaluation import (
    eval_atlas_space,
    eval_bridge,
    eval_image_space,
    fold_statistics,
    plurality_vote,
)
from .fileio import export_pgm, read_field, read_map, write_field
from .grid import LabelField, ScalarField, warp_labels
from .inverse import numeric_inverse
from .losses import LossWeights
from .optim import OptimConfig, register_image, run_atlas_build
from .svf import integrate, integrate_inverse
from .synth import SynthConfig, generate

_OPTIM_KEYS = {
    "step_size": float,
    "method": str,
    "epochs": int,
    "atlas_refresh_period": int,
    "quadrature_samples": int,
    "squaring_steps": int,
    "seed": int,
    "similarity": str,
    "pair_sampling": str,
    "atlas_mode": str,
    "atlas_step": float,
    "threads": int,
    "reset_momentum_on_refresh": bool,
    "sim_weight": float,
    "lambda": float,
    "gamma1": float,
    "gamma2": float,
}

_SYNTH_KEYS = {
    "dims": tuple,
    "cohort_size": int,
    "structures": int,
    "velocity_scale": float,
    "smoothness": float,
    "affine_scale": float,
    "noise_sigma": float,
    "seed": int,
}

_INVERT_KEYS = {
    "max_iters": int,
    "step": float,
    "tol": float,
    "fail_threshold": float,
}


def read_config(path) -> dict:
    """Flat key = value file; '#' comments; duplicate keys rejected."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str, typ):
    try:
        if typ is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ is tuple:
            return tuple(int(tok) for tok in value.split())
        return typ(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from exc


def _typed(cfg: dict, allowed: dict, context: str) -> dict:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {context} config keys: {', '.join(unknown)}")
    return {key: _convert(key, val, allowed[key]) for key, val in cfg.items()}


def build_optim_config(cfg: dict) -> OptimConfig:
    typed = _typed(cfg, _OPTIM_KEYS, "optimizer")
    weights = LossWeights(
        sim_weight=typed.pop("sim_weight", 1.0),
        lam=typed.pop("lambda", 0.0),
        gamma1=typed.pop("gamma1", 0.0),
        gamma2=typed.pop("gamma2", 0.0),
    )
    return OptimConfig(weights=weights, **typed)


def build_synth_config(cfg: dict) -> SynthConfig:
    typed = _typed(cfg, _SYNTH_KEYS, "synth")
    try:
        return SynthConfig(**typed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_cfg(args, builder, default):
    if getattr(args, "config", None) is None:
        return default
    return builder(read_config(args.config))


def _read_manifest(path: Path):
    """Lines of 'image[,labels]' paths relative to the manifest directory."""
    entries = []
    base = path.parent
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        img = base / parts[0]
        lab = base / parts[1] if len(parts) > 1 and parts[1] else None
        entries.append((img, lab))
    if not entries:
        raise ValueError(f"manifest {path} lists no images")
    return entries


def _write_log(path: Path, log: list) -> None:
    lines = ["epoch,total,sim,reg,pair_atlas,pair_image,folds,wall_time"]
    for row in log:
        lines.append(
            ",".join(
                [
                    str(row["epoch"]),
                    repr(float(row["total"])),
                    repr(float(row["sim"])),
                    repr(float(row["reg"])),
                    repr(float(row["pair_atlas"])),
                    repr(float(row["pair_image"])),
                    repr(float(row["folds"])),
                    f"{row['wall_time']:.3f}",
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    config = _load_cfg(args, build_synth_config, SynthConfig())
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    result = generate(config)
    manifest = []
    for i in range(len(result.images)):
        write_field(out / f"img_{i}.afraw", result.images[i])
        write_field(out / f"lab_{i}.afraw", result.labels[i])
        write_field(out / f"phi_fwd_{i}.afraw", result.fwd_maps[i])
        write_field(out / f"phi_inv_{i}.afraw", result.inv_maps[i])
        manifest.append(f"img_{i}.afraw,lab_{i}.afraw")
    write_field(out / "template.afraw", result.template)
    write_field(out / "template_labels.afraw", result.template_labels)
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(result.images)} members to {out}")
    return 0


def cmd_build_atlas(args) -> int:
    config = _load_cfg(args, build_optim_config, OptimConfig())
    entries = _read_manifest(Path(args.manifest))
    images = []
    for img_path, _ in entries:
        field = read_field(img_path)
        if not isinstance(field, ScalarField):
            raise ValueError(f"{img_path}: expected a scalar image")
        images.append(field)
    cohort = Cohort(images)
    out = Path(args.out)
    out.mkdir(exist_ok=True)

    def snapshot(epoch, state):
        export_pgm(out / f"atlas_epoch{epoch}.pgm", state.atlas)

    state, log = run_atlas_build(cohort, config, snapshot_fn=snapshot)
    write_field(out / "atlas.afraw", state.atlas)
    for i, v in enumerate(state.velocities):
        write_field(out / f"v_{i}.afraw", v)
        write_field(out / f"phi_fwd_{i}.afraw", integrate(v, config.squaring_steps))
        write_field(out / f"phi_inv_{i}.afraw", integrate_inverse(v, config.squaring_steps))
    _write_log(out / "train_log.csv", log)
    export_pgm(out / "atlas_final.pgm", state.atlas)
    print(f"final loss {log[-1]['total']:.6g} after {len(log)} epochs")
    return 0


def cmd_register(args) -> int:
    config = _load_cfg(args, build_optim_config, OptimConfig())
    atlas = read_field(args.atlas)
    image = read_field(args.image)
    if not isinstance(atlas, ScalarField) or not isinstance(image, ScalarField):
        raise ValueError("register expects scalar atlas and image files")
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    v, log = register_image(atlas, image, config)
    write_field(out / "v.afraw", v)
    write_field(out / "phi_fwd.afraw", integrate(v, config.squaring_steps))
    write_field(out / "phi_inv.afraw", integrate_inverse(v, config.squaring_steps))
    _write_log(out / "train_log.csv", log)
    print(f"final loss {log[-1]['total']:.6g} after {len(log)} epochs")
    return 0


def _csv_rows(measure: str, stats: dict):
    rows = []
    for structure in sorted(stats, key=lambda s: (s == "all", s)):
        mean, std = stats[structure]
        rows.append(f"{structure},{measure},{repr(mean)},{repr(std)}")
    return rows


def cmd_evaluate(args) -> int:
    entries = _read_manifest(Path(args.manifest))
    maps_dir = Path(args.maps_dir)
    segs, fwd_maps, inv_maps = [], [], []
    for i, (_, lab_path) in enumerate(entries):
        if lab_path is None:
            raise ValueError(f"manifest entry {i} has no label file; evaluation needs labels")
        lab = read_field(lab_path)
        if not isinstance(lab, LabelField):
            raise ValueError(f"{lab_path}: expected a label field")
        segs.append(lab)
        fwd_maps.append(read_map(maps_dir / f"phi_fwd_{i}.afraw"))
        inv_maps.append(read_map(maps_dir / f"phi_inv_{i}.afraw"))

    rows = ["structure,measure,mean,std"]
    rows += _csv_rows("d_atlas", eval_atlas_space(segs, fwd_maps))
    if args.pairwise_atlas:
        rows += _csv_rows("d_atlas_pairwise", eval_atlas_space(segs, fwd_maps, pairwise=True))
    if args.image_space:
        # no dedicated atlas segmentation exists; synthesize one by voting the
        # forward-warped cohort labels and flag the measure name accordingly
        atlas_seg = plurality_vote([warp_labels(segs[i], fwd_maps[i]) for i in range(len(segs))])
        rows += _csv_rows("d_image(voted_atlas_seg)", eval_image_space(atlas_seg, segs, inv_maps))
    rows += _csv_rows("d_bridge", eval_bridge(segs, fwd_maps, inv_maps))
    fold_mean, fold_std = fold_statistics(inv_maps)
    rows.append(f"all,folds,{repr(fold_mean)},{repr(fold_std)}")

    out = Path(args.out) if args.out else maps_dir / "eval.csv"
    out.write_text("\n".join(rows) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_invert(args) -> int:
    cfg = _typed(read_config(args.config), _INVERT_KEYS, "invert") if args.config else {}
    mapping = read_map(args.map_file)
    inverse, info = numeric_inverse(mapping, return_info=True, **cfg)
    out = Path(args.out) if args.out else Path(args.map_file).with_name(
        Path(args.map_file).stem + "_inverse.afraw"
    )
    write_field(out, inverse)
    print(f"residual {info['residual']:.6g} after {info['iterations']} iterations")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlasflow",
        description="Groupwise diffeomorphic atlas construction on regular grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with ground truth")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-atlas", help="estimate an atlas and per-image velocities")
    p.add_argument("manifest", help="cohort manifest (image[,label] per line)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build_atlas)

    p = sub.add_parser("register", help="register one image to a frozen atlas")
    p.add_argument("atlas", help="atlas image (.afraw scalar)")
    p.add_argument("image", help="moving image (.afraw scalar)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="label-overlap and fold statistics")
    p.add_argument("manifest", help="cohort manifest with label files")
    p.add_argument("maps_dir", help="directory with phi_fwd_<i>/phi_inv_<i> maps")
    p.add_argument("--pairwise-atlas", action="store_true", help="add O(M^2) pairwise atlas-space Dice")
    p.add_argument("--image-space", action="store_true", help="add image-space Dice against a voted atlas segmentation")
    p.add_argument("--out", help="output CSV path (default: <maps_dir>/eval.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("invert", help="numerically invert a deformation map")
    p.add_argument("map_file", help="map to invert (.afraw vector)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="output path (default: <map>_inverse.afraw)")
    p.set_defaults(func=cmd_invert)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime/numeric/io failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
