"""Entry point (populated alongside the pipeline)."""


def main(argv=None) -> int:
    raise NotImplementedError
