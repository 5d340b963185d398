"""
Command-line package for SandHUM
"""

from cli.main import run, build_parser

__all__ = [
    'run',
    'build_parser',
]
