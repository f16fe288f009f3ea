"""
Command-line interface for the calipred package.

This module allows the calipred package to be executed directly:
    python -m calipred [command] [options]
"""

from .cli import main

if __name__ == "__main__":
    main()
