#!/usr/bin/env python3
"""
Script to run the ncrft command line
"""
import sys

from ncrft.main import main

if __name__ == "__main__":
    sys.exit(main())
