"""
Allow running dlsim as a module: python -m dlsim

This delegates to the CLI entry point.
"""

from dlsim.cli import main

if __name__ == "__main__":
    main()
