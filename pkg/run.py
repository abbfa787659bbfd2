#!/usr/bin/env python3
"""Entry point for the Med-NCA harness."""

import sys

from med_nca.harness import main

if __name__ == "__main__":
    sys.exit(main())
