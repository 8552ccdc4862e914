"""Run the sidecar: ``python -m capembed`` or the ``capembed`` script."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="capembed",
        description="Caption and embedding sidecar (MODE, STUB_SEED, STUB_DIM, "
        "MODEL_ID, MAX_BATCH are read from the environment).",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)
    uvicorn.run(create_app(), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
