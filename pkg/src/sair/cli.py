"""Command-line surface: degradation synthesis, inversion, direction
discovery, restoration, the finite-difference suite, and the seeded
experiment protocols.

Exit codes: 0 success, 2 invalid input (bad flags, unreadable or
malformed files), 1 runtime failure during compute.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .degradation import DegradationSpec, degrade
from .directions import (
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    ExternalCommandLabeler,
    PlantedLabeler,
    discover_direction,
)
from .generator import GeneratorSpec, invert, save_latent
from .gradcheck import MODULES, run_checks
from .harness import run_ablation, run_e2e, run_robustness
from .jsonio import dump_json, load_json
from .pngio import read_image, write_image
from .restore import RestoreConfig, restore
from .semantics import EmbedderSpec, SemanticDirection, mask_provider_from_config
from . import numerics as nm

__all__ = ["main"]


class ValidationError(ValueError):
    """Bad input detected before compute starts."""


def _default_seed() -> int:
    env = os.environ.get("SAIR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ValidationError(f"SAIR_SEED must be an integer, got {env!r}") from exc


def _load_json_file(path: str, what: str) -> dict:
    try:
        return load_json(path)
    except FileNotFoundError as exc:
        raise ValidationError(f"{what} file not found: {path}") from exc
    except ValueError as exc:
        raise ValidationError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _load_image_file(path: str) -> np.ndarray:
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise ValidationError(f"image not found: {path}") from exc
    except Exception as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc


def _generator_from(path: str) -> GeneratorSpec:
    try:
        return GeneratorSpec.from_json_dict(_load_json_file(path, "generator spec"))
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad generator spec {path}: {exc}") from exc


def _degradation_from(path: str) -> DegradationSpec:
    try:
        return DegradationSpec.from_json_dict(_load_json_file(path, "degradation spec"))
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad degradation spec {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def _cmd_degrade(args) -> int:
    spec = _degradation_from(args.spec)
    image = _load_image_file(args.infile)
    if args.seed is not None:
        spec = replace(spec, noise_seed=args.seed)
    out = degrade(nm.constant(image), spec)
    write_image(args.out, out.data)
    return 0


def _cmd_invert(args) -> int:
    gen = _generator_from(args.gen)
    target = _load_image_file(args.infile)
    if target.shape != gen.output_shape:
        raise ValidationError(
            f"image shape {target.shape} does not match generator output "
            f"{gen.output_shape}"
        )
    if args.iters < 0:
        raise ValidationError("--iters must be >= 0")
    result = invert(gen, target, iterations=args.iters, lr=args.lr, seed=_seed_of(args))
    save_latent(result.latent, args.out)
    print(f"inversion loss {result.loss:.6g} after {args.iters} iterations")
    return 0


def _parse_labeler(gen: GeneratorSpec, text: str):
    if text.startswith("planted:"):
        ref = text[len("planted:"):]
        if not ref:
            raise ValidationError("planted: labeler needs a direction name or file")
        try:
            planted = gen.planted_by_name(ref)
            return PlantedLabeler(direction=planted.vector, threshold=0.0)
        except KeyError:
            pass
        if Path(ref).exists():
            obj = _load_json_file(ref, "planted direction")
            vec = np.asarray(obj["direction"], dtype=np.float64)
            return PlantedLabeler(
                direction=vec, threshold=float(obj.get("threshold", 0.0))
            )
        names = ", ".join(sorted(d.name for d in gen.planted))
        raise ValidationError(
            f"planted labeler {ref!r} is neither a generator attribute "
            f"({names}) nor a file"
        )
    if text.startswith("cmd:"):
        command = shlex.split(text[len("cmd:"):])
        if not command:
            raise ValidationError("cmd: labeler needs a command line")
        return ExternalCommandLabeler(command)
    raise ValidationError(f"labeler must start with planted: or cmd:, got {text!r}")


def _cmd_learn_direction(args) -> int:
    gen = _generator_from(args.gen)
    labeler = _parse_labeler(gen, args.labeler)
    if args.n < 2:
        raise ValidationError("--n must be >= 2")
    direction = discover_direction(
        gen,
        labeler,
        name=args.name,
        n=args.n,
        rng=_seed_of(args),
        epochs=args.epochs,
        lr=args.lr,
    )
    dump_json(direction.to_json_dict(), args.out)
    print(f"direction {direction.name!r} accuracy {direction.accuracy:.4f}")
    return 0


def _pool_from_dir(path: str) -> list[np.ndarray]:
    pool_dir = Path(path)
    if not pool_dir.is_dir():
        raise ValidationError(f"pool directory not found: {path}")
    files = sorted(p for p in pool_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValidationError(f"pool directory {path} holds no .png files")
    return [_load_image_file(str(p)) for p in files]


def _cmd_restore(args) -> int:
    gen = _generator_from(args.gen)
    cfg_obj = _load_json_file(args.config, "restore config")
    try:
        config = RestoreConfig.from_json_dict(cfg_obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad restore config {args.config}: {exc}") from exc
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    observation = _load_image_file(args.infile)
    pool = _pool_from_dir(args.pool)

    emb_spec = EmbedderSpec()
    if args.embedder:
        emb_spec = EmbedderSpec.from_json_dict(
            _load_json_file(args.embedder, "embedder spec")
        )

    directions = {}
    for path in args.direction or []:
        obj = _load_json_file(path, "semantic direction")
        try:
            d = SemanticDirection.from_json_dict(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad direction file {path}: {exc}") from exc
        directions[d.name] = d
    if args.emotion_target:
        if args.emotion_target not in directions:
            raise ValidationError(
                f"--emotion-target {args.emotion_target!r} has no matching "
                f"--direction file"
            )
        config = replace(
            config, enable_emotion=True, emotion_target=args.emotion_target
        )

    mask_provider = None
    if args.mask:
        mask_provider = mask_provider_from_config(
            _load_json_file(args.mask, "mask config")
        )

    result = restore(
        observation,
        pool,
        config,
        gen,
        emb_spec,
        directions=directions or None,
        mask_provider=mask_provider,
    )
    write_image(args.out, result.image)
    if args.report:
        report = {"config": config.to_json_dict()}
        report.update(result.trace_json_dict())
        dump_json(report, args.report)
    total = result.trace["total"]
    if total:
        print(f"restored; best total loss {min(total):.6g} over {len(total)} iterations")
    else:
        print("restored with zero iterations; output decodes the guide latent")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_checks(module=args.module)
    failures = 0
    for res in results:
        status = "PASS" if res.ok else "FAIL"
        failures += not res.ok
        print(
            f"{status} {res.module}/{res.name}: max rel err {res.max_rel_err:.3e} "
            f"(tolerance {res.tolerance:.0e}, {res.points} points)"
        )
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 1 if failures else 0


def _cmd_eval(args) -> int:
    if args.trials < 1:
        raise ValidationError("--trials must be >= 1")
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    seed = _seed_of(args)
    if args.protocol == "ablation":
        report = run_ablation(trials=args.trials, base_seed=seed, jobs=args.jobs)
    elif args.protocol == "robustness":
        report = run_robustness(trials=args.trials, base_seed=seed, jobs=args.jobs)
    else:
        report = run_e2e(trials=args.trials, base_seed=seed, jobs=args.jobs)
    dump_json(report.to_json_dict(), args.out)
    for condition in sorted(report.aggregates):
        stats = report.aggregates[condition]
        print(
            f"{condition}: mean PSNR {stats['mean_psnr_restored']:.2f} dB over "
            f"{stats['trials']} trials"
        )
    return 0


def _seed_of(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sair",
        description=(
            "Latent-space image restoration with reference guidance: "
            "synthesize degradations, invert images, learn attribute "
            "directions, and run restorations or whole experiment protocols."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument(
            "--seed",
            type=int,
            default=None,
            help="randomness seed (default: SAIR_SEED env var, else 0)",
        )

    p = sub.add_parser("degrade", help="apply a degradation spec to an image")
    p.add_argument("--in", dest="infile", required=True, help="input PNG")
    p.add_argument("--spec", required=True, help="degradation spec JSON")
    p.add_argument("--out", required=True, help="output PNG")
    add_seed(p)
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("invert", help="fit a latent that reproduces an image")
    p.add_argument("--gen", required=True, help="generator spec JSON")
    p.add_argument("--in", dest="infile", required=True, help="target PNG")
    p.add_argument("--iters", type=int, default=2000, help="optimization steps")
    p.add_argument("--lr", type=float, default=0.05, help="Adam learning rate")
    p.add_argument("--out", required=True, help="output latent JSON")
    add_seed(p)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser(
        "learn-direction", help="discover a latent attribute direction"
    )
    p.add_argument("--gen", required=True, help="generator spec JSON")
    p.add_argument(
        "--labeler",
        required=True,
        help='planted:<attribute-or-json> or cmd:"program args"',
    )
    p.add_argument("--name", default="attribute", help="name for the direction")
    p.add_argument("--n", type=int, default=2000, help="training samples")
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--out", required=True, help="output direction JSON")
    add_seed(p)
    p.set_defaults(func=_cmd_learn_direction)

    p = sub.add_parser("restore", help="restore a degraded image from a pool")
    p.add_argument("--in", dest="infile", required=True, help="degraded PNG")
    p.add_argument("--pool", required=True, help="directory of candidate PNGs")
    p.add_argument("--config", required=True, help="restore config JSON")
    p.add_argument("--gen", required=True, help="generator spec JSON")
    p.add_argument("--embedder", default=None, help="embedder spec JSON")
    p.add_argument(
        "--direction",
        action="append",
        default=None,
        help="semantic direction JSON (repeatable)",
    )
    p.add_argument(
        "--emotion-target", default=None, help="direction name to optimize along"
    )
    p.add_argument("--mask", default=None, help="mask provider config JSON")
    p.add_argument("--out", required=True, help="restored PNG")
    p.add_argument("--report", default=None, help="trial report JSON")
    add_seed(p)
    p.set_defaults(func=_cmd_restore)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument(
        "--module",
        default="all",
        choices=("all",) + MODULES,
        help="restrict to one module",
    )
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("eval", help="run a seeded experiment protocol")
    p.add_argument(
        "--protocol",
        required=True,
        choices=("e2e", "ablation", "robustness"),
    )
    p.add_argument("--trials", type=int, default=20, help="trials per condition")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.add_argument("--out", required=True, help="report JSON")
    add_seed(p)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
