#!/usr/bin/env python3
"""
Main entry point for the CHG pretraining toolkit.
"""

from app.cli import main

if __name__ == "__main__":
    main()
