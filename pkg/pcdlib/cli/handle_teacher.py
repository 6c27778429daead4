from argparse import Namespace

from pcdlib.session import PcdSession


def handle_pretrain_command(args: Namespace, session: PcdSession) -> None:
    c = session.pretrain_teacher(args.data, args.out, random_init=args.random_init, metrics_path=args.metrics)
    print("teacher:")
    print(f"  path: {args.out}")
    print(f"  entries: {len(c.entries)}")
    print(f"  seed lineage: {c.metadata.get('seed_lineage')}")


def handle_adapt_head_command(args: Namespace, session: PcdSession) -> None:
    """Adapt a teacher head and print the invariance report"""
    report = session.adapt_head(
        args.teacher,
        args.out,
        drop_last_bn=args.drop_last_bn,
        tol=args.tol,
        trials=args.trials,
    )
    for line in report.lines():
        print(line)
    session.debug_print(f"adapted head written to {args.out}")
