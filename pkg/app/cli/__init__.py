from .commands import build_parser, main
