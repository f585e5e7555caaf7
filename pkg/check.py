#!/bin/env python
import argparse
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

tuner_files = [
    "tuner",
    "check.py",
]  # Add Python files outside the tuner directory here


@dataclass
class Command:
    # Command to run, including args
    command: list[str]

    # Directory to run the command in, relative to the project root
    cwd: Path = Path(".")


def venv(s: str) -> str:
    """Ensure that the executable within a venv is used"""
    # This will be the bin directory of the current virtualenv
    bin = Path(sys.executable).parent
    return str(bin / s)


commands = {
    "fmt": Command([venv("black"), *tuner_files]),
    "fmt-check": Command([venv("black"), *tuner_files, "--diff", "--color", "--check"]),
    "lint": Command(
        [
            venv("flake8"),
            *tuner_files,
            # ignore config files (all config is done here)
            "--isolated",
            # match black
            "--max-line-length=100",
            # disable line length and space before
            "--extend-ignore=E501,E203",
        ]
    ),
    # the slow end-to-end convergence test only runs with "test-slow"
    "test": Command([venv("pytest"), "-m", "not slow"]),
    "test-slow": Command([venv("pytest"), "-m", "slow"]),
}


def print_divider(s, width):
    """Print the name of the command surrounded by '='"""
    print(f"{' ' + s + ' ' :=^{width}}")


def main():
    """
    Run the checks for the CI. By default, runs fmt-check, lint and test.
    It is also possible to specify a list of commands to run.

    The development requirements should be installed for this
    program to work.

    The following commands are available:
    - fmt: formatting
    - lint: linting
    - fmt-check: check formatting but don't apply fixes (for CI)
    - test: unit tests
    - test-slow: end-to-end convergence test (several minutes)
    """
    parser = argparse.ArgumentParser(
        description="""
            Run the checks for the CI. By default, runs fmt-check, lint and test.
            It is also possible to specify a list of commands to run.

            The development requirements should be installed for this
            program to work.

            The following commands are available:
            - fmt: formatting
            - lint: linting
            - fmt-check: check formatting but don't apply fixes (for CI)
            - test: unit tests
            - test-slow: end-to-end convergence test (several minutes)
       """
    )
    parser.add_argument("commands", nargs="*", default=["fmt-check", "lint", "test"])
    args = parser.parse_args()
    unknown = [c for c in args.commands if c not in commands]
    if unknown:
        parser.error(f"unknown commands {unknown}, choose from {sorted(commands)}")

    # The get_terminal_size command fails in some cases
    # where there isn't really a terminal width.
    # This is the case in the CI. 80 should be a reasonable default.
    try:
        width = os.get_terminal_size().columns
    except OSError:
        width = 80

    cwd = Path(__file__).parent

    for c in args.commands:
        command = commands[c]
        print_divider(c, width)
        result = subprocess.run(command.command, cwd=cwd / command.cwd)

        if result.returncode > 0:
            print(f"Command '{c}' failed with code {result.returncode}")
            print("Exiting...")
            sys.exit(result.returncode)
        if c == "lint":
            print("✓ Linting successful!")


if __name__ == "__main__":
    main()
