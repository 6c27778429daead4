from argparse import Namespace

from pcdlib.session import PcdSession


def handle_gen_data_command(args: Namespace, session: PcdSession) -> None:
    """Generate the synthetic image store"""
    count = session.gen_data(args.out, n=args.n, size=args.size)
    print("dataset:")
    print(f"  path: {args.out}")
    print(f"  images: {count}")
    print(f"  size: {args.size or session.config.data.image_size}")
    print(f"  seed: {session.seed}")
