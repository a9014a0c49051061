#!/usr/bin/env python3
"""
TQL Lab - Main Launcher Script

Entry point for the command-line harness; see `python tql-lab.py --help`.
"""

import sys
from pathlib import Path

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent / "src"))


if __name__ == "__main__":
    try:
        from cli.cli_interface import main

        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nInterrupted by user. Goodbye!")
        sys.exit(130)
    except Exception as e:
        print(f"\nFatal error: {e}")
        import traceback

        traceback.print_exc()
        sys.exit(1)
