import sys
from argparse import Namespace

from pcdlib.session import PcdSession
from pcdlib.verify import summarize


def handle_verify_command(args: Namespace, session: PcdSession) -> None:
    """Run the self-check suites; exit 1 when any fails"""
    results = session.verify(args.suite)
    for result in results:
        print(result.line())
    print(summarize(results))
    if not all(r.passed for r in results):
        sys.exit(1)


def handle_config_command(args: Namespace) -> None:
    text = PcdSession.reference_config(args.preset)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
