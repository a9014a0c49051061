"""
TQL Lab - CLI Interface

Command-line entry point with the subcommands counterexample, exact, train,
sweep and validate. Exit status 0 means success, 1 a failed run or a
counterexample mismatch, and 2 a configuration or usage error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from colorama import Fore, Style, just_fix_windows_console
from dotenv import load_dotenv

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.config_manager import ConfigManager, get_config_manager, setup_logging
from core.constants import APP_NAME, CLI_BANNER, LOG_LEVEL, SUCCESS_MESSAGES, VERSION
from core.errors import ConfigError, TQLLabError
from core.experiment import ExperimentRunner, build_counterexample_report
from core.risk import parse_measure

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class Colors:
    """Terminal colours (colorama)."""

    HEADER = Fore.MAGENTA
    OKBLUE = Fore.BLUE
    OKCYAN = Fore.CYAN
    OKGREEN = Fore.GREEN
    WARNING = Fore.YELLOW
    FAIL = Fore.RED
    ENDC = Style.RESET_ALL
    BOLD = Style.BRIGHT


class TQLLabCLI:
    """Dispatches parsed arguments to the experiment runner."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def print_success(self, message: str):
        """Print success message in green."""
        print(f"{Colors.OKGREEN}✓ {message}{Colors.ENDC}")

    def print_error(self, message: str):
        """Print error message in red."""
        print(f"{Colors.FAIL}✗ {message}{Colors.ENDC}")

    def print_warning(self, message: str):
        """Print warning message in yellow."""
        print(f"{Colors.WARNING}⚠ {message}{Colors.ENDC}")

    def print_info(self, message: str):
        """Print info message in cyan."""
        print(f"{Colors.OKCYAN}ℹ {message}{Colors.ENDC}")

    def print_header(self, message: str):
        """Print header message in magenta."""
        print(f"\n{Colors.HEADER}{Colors.BOLD}{message}{Colors.ENDC}")

    def _load(self, args) -> Optional[ConfigManager]:
        try:
            manager = get_config_manager(args.config)
        except ConfigError as e:
            self.print_error(str(e))
            return None
        overrides = {}
        if getattr(args, "seed", None) is not None:
            overrides["seed"] = args.seed
        if getattr(args, "output_dir", None):
            overrides["output_dir"] = args.output_dir
        if overrides:
            manager.config = manager.config.with_values(**overrides)
        return manager

    def cmd_counterexample(self, args) -> int:
        """Print the counterexample tables and check the expected values."""
        try:
            measure = parse_measure(args.measure)
        except TQLLabError as e:
            self.print_error(str(e))
            return EXIT_CONFIG
        report = build_counterexample_report(measure)
        self.print_header("=== Counterexample ===")
        print(report.render())
        print()
        if not report.checked:
            self.print_info(f"Non-default measure {measure}; expected values not checked")
            return EXIT_OK
        if report.ok:
            self.print_success(SUCCESS_MESSAGES["counterexample"])
            return EXIT_OK
        for mismatch in report.mismatches:
            self.print_error(mismatch)
        return EXIT_FAILURE

    def cmd_exact(self, args) -> int:
        """Run the exact methods on the configured environment."""
        manager = self._load(args)
        if manager is None:
            return EXIT_CONFIG
        if not manager.validate_config():
            self.print_error("Environment settings are invalid; see the log for details")
            return EXIT_CONFIG
        self.print_header(f"=== Exact comparison: {manager.config.env_name} ===")
        success, message = ExperimentRunner(manager.config).run_exact()
        (self.print_success if success else self.print_error)(message)
        return EXIT_OK if success else EXIT_FAILURE

    def cmd_train(self, args) -> int:
        """Train one agent."""
        manager = self._load(args)
        if manager is None:
            return EXIT_CONFIG
        if not manager.validate_config():
            self.print_error("Environment settings are invalid; see the log for details")
            return EXIT_CONFIG
        config = manager.config
        self.print_header(f"=== Training {config.agent_kind} on {config.env_name} (seed {config.seed}) ===")
        success, message = ExperimentRunner(config).run_train()
        (self.print_success if success else self.print_error)(message)
        return EXIT_OK if success else EXIT_FAILURE

    def cmd_sweep(self, args) -> int:
        """Train one agent per seed and aggregate."""
        try:
            seeds = parse_seeds(args.seeds)
        except ValueError as e:
            self.print_error(str(e))
            return EXIT_CONFIG
        manager = self._load(args)
        if manager is None:
            return EXIT_CONFIG
        if not manager.validate_config():
            self.print_error("Environment settings are invalid; see the log for details")
            return EXIT_CONFIG
        config = manager.config
        self.print_header(f"=== Sweep {config.agent_kind} on {config.env_name}: seeds {seeds} ===")
        success, message = ExperimentRunner(config).run_sweep(
            seeds, parallel=not args.serial, max_workers=args.workers
        )
        (self.print_success if success else self.print_error)(message)
        return EXIT_OK if success else EXIT_FAILURE

    def cmd_validate(self, args) -> int:
        """Validate a configuration file and print its effective values."""
        manager = self._load(args)
        if manager is None:
            return EXIT_CONFIG
        if not manager.validate_config():
            self.print_error("Environment settings are invalid; see the log for details")
            return EXIT_CONFIG
        self.print_header(f"=== {args.config} ({manager.config.config_hash}) ===")
        print(manager.config.to_text(), end="")
        if args.export:
            if not manager.export_config(args.export):
                self.print_error(f"Could not write {args.export}")
                return EXIT_FAILURE
            self.print_success(SUCCESS_MESSAGES["config_exported"].format(path=args.export))
        self.print_success("Configuration is valid")
        return EXIT_OK


def parse_seeds(text: str) -> List[int]:
    """Parse `0,1,2` or a range `0-4`."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("At least one seed is required for a sweep.")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tql-lab",
        description=f"{APP_NAME} v{VERSION} - Risk-sensitive distributional RL over whole histories",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} v{VERSION}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("counterexample", help="Print and check the counterexample tables")
    p.add_argument("--measure", default="cvar:0.1", help="Risk measure spec (default: cvar:0.1)")

    for name, help_text in (
        ("exact", "Compare the exact methods on one environment"),
        ("train", "Train one agent"),
        ("sweep", "Train one agent per seed and aggregate"),
        ("validate", "Validate a configuration file"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="Experiment configuration file")
        if name in ("exact", "train", "sweep"):
            p.add_argument("--output-dir", help="Override output_dir")
        if name == "train":
            p.add_argument("--seed", type=int, help="Override the configured seed")
        if name == "sweep":
            p.add_argument("--seeds", required=True, help="Seeds, e.g. 0,1,2 or 0-4")
            p.add_argument("--workers", type=int, help="Parallel worker processes")
            p.add_argument("--serial", action="store_true", help="Run seeds one after another")
        if name == "validate":
            p.add_argument("--export", help="Write the canonical configuration snapshot here")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for CLI."""
    load_dotenv()
    just_fix_windows_console()
    args = build_parser().parse_args(argv)
    level = "DEBUG" if args.verbose else "WARNING" if args.quiet else LOG_LEVEL
    setup_logging(level=level)

    cli = TQLLabCLI()
    if not args.quiet:
        print(Colors.HEADER + CLI_BANNER + Colors.ENDC)
    handler = getattr(cli, f"cmd_{args.command}")
    try:
        return handler(args)
    except ConfigError as e:
        cli.print_error(str(e))
        return EXIT_CONFIG
    except TQLLabError as e:
        cli.print_error(str(e))
        logging.exception("Run failed")
        return EXIT_FAILURE


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nInterrupted by user. Goodbye!")
        sys.exit(130)
