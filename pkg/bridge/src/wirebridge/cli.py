"""Command-line entry point: ``wirebridge <spec.json>``."""

from __future__ import annotations

import argparse
import sys

from .spec import BridgeError, load_spec
from .server import BridgeServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="wirebridge",
        description="Serve a wrapped classifier behind the hard-label wire protocol.",
    )
    parser.add_argument("spec", help="BridgeSpec JSON file")
    args = parser.parse_args(argv)

    try:
        spec = load_spec(args.spec)
        server = BridgeServer(spec)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    # flush so wrappers reading a pipe see the endpoint before we block
    print(f"bridging {spec.loader} on {server.endpoint} (ctrl-c to stop)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
