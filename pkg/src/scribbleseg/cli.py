"""Command-line interface.

File-format tools (``convert``, ``geodesic``, ``graphcut``, ``phantom``,
``scribble-sim``, ``pretrain``) operate on grid/scribble files directly.
``refine`` is a thin client of the HTTP service: it uploads the study,
synthesizes corrective scribbles against the ground truth each round, posts
them, triggers refine rounds, and collects reports - against a remote
``--server`` or an embedded in-process service by default.  ``serve`` runs
the service under uvicorn.

Exit codes: 0 success, 2 missing input file, 3 format/validation error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import formats, metrics
from .client import ServiceClient, ServiceError, embedded_client
from .errors import FormatError, TrainingDivergedError, ValidationError
from .geodesic import GeodesicConfig, geodesic_distance, weights_from_distance
from .graphcut import GraphCutConfig, graphcut_refine
from .grid import ScribbleSet
from .metrics import EvalReport, write_report
from .model import LikelihoodModel, ModelConfig, load_config, pretrain_offline, save_model
from .synth import CorruptionSpec, PhantomSpec, ScribblerConfig, corrupt_segmentation, make_phantom, synthesize_scribbles

_SCRIBBLER_STREAM = 3  # rng stream tag for per-round scribble synthesis


def _dims(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated sizes, got {text!r}")
    return parts


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _load_scribbler_config(path: str | None, seed: int) -> ScribblerConfig:
    if path is None:
        return ScribblerConfig(seed=seed)
    values: dict = {"seed": seed}
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ValidationError(f"scribbler config line {line_no}: expected 'key: value'")
            key, raw = (part.strip() for part in line.split(":", 1))
            if key in ("max_per_round", "min_component", "seed"):
                values[key] = int(raw)
            elif key == "length":
                lo, hi = (int(v) for v in raw.split(","))
                values[key] = (lo, hi)
            else:
                raise ValidationError(f"scribbler config line {line_no}: unknown key {key!r}")
    return ScribblerConfig(**values)


# --- subcommands -------------------------------------------------------------------


def cmd_convert(args) -> int:
    if args.kind == "scribbles":
        formats.write_scribbles(formats.read_scribbles(args.input), args.output)
    else:
        formats.write_nrrd(formats.read_nrrd(args.input, args.kind), args.output)
    return 0


def cmd_geodesic(args) -> int:
    volume = formats.read_volume(args.volume)
    scribbles = formats.read_scribbles(args.scribbles)
    if scribbles.dims != volume.dims:
        raise ValidationError(f"scribble dims {scribbles.dims} do not match volume dims {volume.dims}")
    cfg = GeodesicConfig(
        tau=args.tau, connectivity=args.connectivity, passes=args.passes, spatial_weight=args.nu
    )
    dmap = geodesic_distance(volume, scribbles, cfg)
    if args.out_distance:
        formats.write_float_grid(dmap.dist, volume.dims, args.out_distance, volume.spacing)
    if args.out_weights:
        wmap = weights_from_distance(dmap, cfg.tau)
        formats.write_float_grid(wmap.w, volume.dims, args.out_weights, volume.spacing)
    return 0


def cmd_graphcut(args) -> int:
    from .grid import normalize_volume

    prob = formats.read_probmap(args.prob)
    volume = normalize_volume(formats.read_volume(args.volume))
    scribbles = formats.read_scribbles(args.scribbles) if args.scribbles else None
    labels = graphcut_refine(prob, volume, scribbles, GraphCutConfig(lam=args.lam, sigma=args.sigma))
    formats.write_nrrd(labels, args.out)
    return 0


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=args.dims,
        blobs=args.blobs,
        radius=(args.radius_min, args.radius_max),
        contrast=args.contrast,
        noise=args.noise,
        seed=args.seed,
    )
    volume, gt = make_phantom(spec)
    formats.write_nrrd(volume, args.out_volume)
    formats.write_nrrd(gt, args.out_gt)
    if args.out_init_labels or args.out_init_probs:
        cspec = CorruptionSpec(
            boundary_amplitude=args.boundary_amplitude,
            drop_prob=args.drop_prob,
            false_positive_blobs=args.false_positives,
            sharpness=args.sharpness,
            seed=args.seed + 1,
        )
        labels, probs = corrupt_segmentation(gt, cspec)
        if args.out_init_labels:
            formats.write_nrrd(labels, args.out_init_labels)
        if args.out_init_probs:
            formats.write_nrrd(probs, args.out_init_probs)
        print(f"initial dice: {metrics.dice(labels, gt):.4f}")
    return 0


def cmd_scribble_sim(args) -> int:
    pred = formats.read_labelmap(args.pred)
    gt = formats.read_labelmap(args.gt)
    existing = formats.read_scribbles(args.existing) if args.existing else None
    cfg = ScribblerConfig(
        max_per_round=args.max_per_round,
        min_component=args.min_component,
        length=(args.length_min, args.length_max),
        seed=args.seed,
    )
    additions = synthesize_scribbles(pred, gt, cfg, existing)
    formats.write_scribbles(additions, args.out)
    print(f"emitted {len(additions)} scribble voxels")
    return 0


def cmd_pretrain(args) -> int:
    if len(args.volume) != len(args.labels):
        raise ValidationError("each --volume needs a matching --labels")
    from .grid import normalize_volume

    pairs = [
        (normalize_volume(formats.read_volume(v)), formats.read_labelmap(l))
        for v, l in zip(args.volume, args.labels)
    ]
    config = load_config(args.config) if args.config else ModelConfig(seed=args.seed)
    if args.epochs is not None:
        config = config.replace(pretrain_epochs=args.epochs)
    if args.lr is not None:
        config = config.replace(pretrain_lr=args.lr)
    model = LikelihoodModel(config, rng=np.random.default_rng([args.seed, 0xA]))
    curve = pretrain_offline(model, pairs, np.random.default_rng([args.seed, 0xB]))
    save_model(model, args.out)
    if curve:
        print(f"pretraining loss: first={curve[0]:.4f} last={curve[-1]:.4f}")
    return 0


def cmd_refine(args) -> int:
    volume_bytes = _read_bytes(args.volume)
    labels_bytes = _read_bytes(args.init_seg)
    probs_bytes = _read_bytes(args.init_prob)
    gt_bytes = _read_bytes(args.gt) if args.gt else None
    checkpoint_bytes = _read_bytes(args.model_in) if args.model_in else None
    config_bytes = _read_bytes(args.model_config) if args.model_config else None

    init_labels = formats.read_labelmap(args.init_seg)
    gt = formats.read_labelmap(args.gt) if args.gt else None
    scribbler_cfg = _load_scribbler_config(args.scribbler_config, args.seed)

    overrides = {
        "tau": args.tau,
        "zeta": args.zeta,
        "eta": args.eta,
        "lam": args.lam,
        "sigma": args.sigma,
        "epochs": args.epochs,
        "lr": args.lr,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}

    client = ServiceClient(base_url=args.server) if args.server else embedded_client()
    reports: list[EvalReport] = []
    with client:
        sid = client.create_session(
            volume_bytes,
            labels_bytes,
            probs_bytes,
            checkpoint=checkpoint_bytes,
            ground_truth=gt_bytes,
            config=config_bytes,
            seed=args.seed,
        )
        row0 = EvalReport(round=0, scribble_voxels=0)
        if gt is not None:
            row0.dice = metrics.dice(init_labels, gt)
            if init_labels.labels.any() and gt.labels.any():
                row0.assd = metrics.assd(init_labels, gt, formats.read_volume(args.volume).spacing)
        reports.append(row0)

        cumulative = ScribbleSet(init_labels.dims)
        pred = init_labels
        for round_no in range(1, args.rounds + 1):
            if gt is not None:
                rng = np.random.default_rng([args.seed, round_no, _SCRIBBLER_STREAM])
                additions = synthesize_scribbles(pred, gt, scribbler_cfg, cumulative, rng)
                if len(additions):
                    client.post_scribbles(sid, additions)
                    cumulative.update(additions)
            resp = client.refine(sid, overrides)
            row = EvalReport(
                round=resp["round"],
                scribble_voxels=resp["scribble_voxels"],
                t_weights=resp["timings"]["weights"],
                t_train=resp["timings"]["train"],
                t_infer=resp["timings"]["infer"],
                t_graphcut=resp["timings"]["graphcut"],
            )
            if resp.get("metrics"):
                row.dice = resp["metrics"].get("dice")
                row.assd = resp["metrics"].get("assd")
            reports.append(row)
            pred = client.get_result(sid)
            if args.stop_dice is not None and row.dice is not None and row.dice >= args.stop_dice:
                break

        if args.out:
            if args.rounds > 0 and reports[-1].round > 0:
                with open(args.out, "wb") as fh:
                    fh.write(client.get_result_bytes(sid))
            else:
                formats.write_nrrd(init_labels, args.out)
        if args.model_out:
            with open(args.model_out, "wb") as fh:
                fh.write(client.get_checkpoint(sid))
        client.delete(sid)

    if args.report:
        write_report(reports, args.report, include_timings=args.timings)
    for report in reports:
        print(report.to_line(include_timings=args.timings))
    return 0


def cmd_serve(args) -> int:
    import os

    import uvicorn

    from .service import create_app
    from .session import SessionStore

    host = args.host or os.environ.get("SCRIBBLESEG_HOST", "127.0.0.1")
    port = args.port or int(os.environ.get("SCRIBBLESEG_PORT", "8000"))
    ttl = float(os.environ.get("SCRIBBLESEG_SESSION_TTL", "3600"))
    uvicorn.run(create_app(SessionStore(ttl_seconds=ttl)), host=host, port=port)
    return 0


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scribbleseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="re-serialize a grid or scribble file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", choices=("volume", "labels", "prob", "scribbles"), required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("geodesic", help="distance and weight maps from scribbles")
    p.add_argument("--volume", required=True)
    p.add_argument("--scribbles", required=True)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("--passes", type=int, default=4)
    p.add_argument("--nu", type=float, default=0.0, help="spatial cost per voxel step")
    p.add_argument("--out-distance")
    p.add_argument("--out-weights")
    p.set_defaults(func=cmd_geodesic)

    p = sub.add_parser("graphcut", help="regularize a probability map into labels")
    p.add_argument("--prob", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--scribbles")
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=2.5)
    p.add_argument("--sigma", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graphcut)

    p = sub.add_parser("phantom", help="synthetic volume, ground truth and corrupted init")
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--blobs", type=int, default=2)
    p.add_argument("--radius-min", type=float, default=4.0)
    p.add_argument("--radius-max", type=float, default=7.0)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-gt", required=True)
    p.add_argument("--boundary-amplitude", type=float, default=1.5)
    p.add_argument("--drop-prob", type=float, default=0.25)
    p.add_argument("--false-positives", type=int, default=1)
    p.add_argument("--sharpness", type=float, default=1.0)
    p.add_argument("--out-init-labels")
    p.add_argument("--out-init-probs")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("scribble-sim", help="synthesize corrective scribbles")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--existing")
    p.add_argument("--out", required=True)
    p.add_argument("--max-per-round", type=int, default=5)
    p.add_argument("--min-component", type=int, default=10)
    p.add_argument("--length-min", type=int, default=3)
    p.add_argument("--length-max", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_scribble_sim)

    p = sub.add_parser("pretrain", help="offline class-balanced pretraining")
    p.add_argument("--volume", action="append", required=True)
    p.add_argument("--labels", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config file (key: value lines)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("refine", help="run synthetic-scribbler refinement rounds")
    p.add_argument("--volume", required=True)
    p.add_argument("--init-seg", required=True)
    p.add_argument("--init-prob", required=True)
    p.add_argument("--gt", help="ground truth; enables the scribbler and metrics")
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--out", help="final label map path")
    p.add_argument("--report", help="line-delimited report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--model-in", help="checkpoint to start from")
    p.add_argument("--model-out", help="save the trained checkpoint here")
    p.add_argument("--model-config", help="model config file (key: value lines)")
    p.add_argument("--scribbler-config", help="scribbler settings file")
    p.add_argument("--server", help="base URL of a running service (default: embedded)")
    p.add_argument("--stop-dice", type=float, default=None, help="stop early at this dice")
    p.add_argument("--timings", action="store_true", help="include wall times in the report")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4 if exc.detail.startswith("train:") else 3
    except (FormatError, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
