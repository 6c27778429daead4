from argparse import Namespace

from pcdlib.session import PcdSession


def handle_erf_command(args: Namespace, session: PcdSession) -> None:
    m, radius = session.erf(
        args.out,
        fmt=args.format,
        checkpoint=args.checkpoint,
        toy=args.model,
        with_head=args.with_head,
        samples=args.samples,
        input_size=args.size,
    )
    h, w = m.shape
    print("erf:")
    print(f"  map: {h}x{w}")
    print(f"  center: {m.center[0]},{m.center[1]}")
    print(f"  degenerate: {str(m.degenerate).lower()}")
    print(f"  radius95: {radius}")
    print(f"  corners positive: {str(all(v > 0 for v in m.corners())).lower()}")
    print(f"  heatmap: {args.out}")
