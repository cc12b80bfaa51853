"""
Command line entry point: python run.py COMMAND [OPTIONS]
"""
from avatar.cli import cli

if __name__ == "__main__":
    cli(prog_name="avatar")
