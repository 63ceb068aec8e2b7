"""Main entry point for the sslkit command line."""

import sys

from sslkit.cli import main

if __name__ == "__main__":
    sys.exit(main())
