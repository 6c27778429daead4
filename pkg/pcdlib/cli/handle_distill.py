import os
from argparse import Namespace

from pcdlib.session import EXPORTED_CHECKPOINT, METRICS_FILE, RAW_CHECKPOINT, PcdSession


def handle_distill_command(args: Namespace, session: PcdSession) -> None:
    result = session.distill(
        args.teacher,
        args.data,
        args.out,
        level=args.level,
        symmetric=args.symmetric,
        resume=args.resume,
        stop_at=args.stop_at,
    )
    loss = session.config.loss
    print("distill:")
    print(f"  level: {loss.level}")
    print(f"  symmetric: {str(loss.symmetric).lower()}")
    print(f"  steps: {result.steps}")
    if result.records:
        last = result.records[-1]
        print(f"  final loss: {last.loss:.6f}")
        print(f"  final pixel cosine: {last.pixel_cosine:.6f}")
    print(f"  raw checkpoint: {os.path.join(args.out, RAW_CHECKPOINT)}")
    print(f"  exported backbone: {os.path.join(args.out, EXPORTED_CHECKPOINT)}")
    print(f"  metrics: {os.path.join(args.out, METRICS_FILE)}")


def handle_export_command(args: Namespace, session: PcdSession) -> None:
    """NormRescale export of a raw student checkpoint"""
    c = session.export(args.checkpoint, args.out, anchor=args.anchor, rescale=not args.no_rescale)
    print("export:")
    print(f"  path: {args.out}")
    print(f"  entries: {len(c.entries)}")
    print(f"  anchor: {c.metadata.get('norm_rescale_anchor')}")
