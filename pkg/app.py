"""
Command-line entry point for power-prior integration of probability and
non-probability samples.

    python app.py fit --nps nps.csv --ps ps.csv --covariates age,sex --scenario C
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from dotenv import dotenv_values
from pydantic import ValidationError

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from powerprior.config import (
    Misspecification,
    ResampleMode,
    SampleCount,
    ScenarioKind,
    Settings,
    WeightPlacement,
)
from powerprior.errors import PowerPriorError, UsageError

logger = logging.getLogger(__name__)

COMMANDS = ("weights", "fit", "fit-binary", "predict", "bootstrap", "simulate", "report")
_TRUE = {"1", "true", "yes", "on"}


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _name_list(text: str) -> List[str]:
    return [item.strip() for item in text.replace(" ", ",").split(",") if item.strip()]


def _float_list(text: str) -> List[float]:
    return [float(item) for item in _name_list(text)]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value file; keys are long flag names with _ for -")
    parser.add_argument("--out", help="output directory (env POWERPRIOR_OUT_DIR)")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--seed", type=int)


def _add_samples(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--nps", help="non-probability sample CSV")
    parser.add_argument("--ps", help="probability sample CSV with design weights")
    parser.add_argument("--response")
    parser.add_argument("--covariates", type=_name_list, help="participation covariates, comma separated")
    parser.add_argument("--study-covariates", type=_name_list)
    parser.add_argument("--weight-column")
    parser.add_argument("--nps-weight", help="nps column with pre-estimated weights (skips CLW)")
    parser.add_argument("--no-intercept", action="store_true")
    parser.add_argument("--standardize", action="store_true")
    # nps 가중치 옵션
    parser.add_argument("--lower-clamp", type=float)
    parser.add_argument("--upper-quantile", type=float)
    parser.add_argument("--no-winsorize", action="store_true")
    parser.add_argument("--no-normalize", action="store_true")
    parser.add_argument("--calibrate", action="store_true", help="calibrate nps weights to ps totals")
    parser.add_argument("--calibrate-totals", help="PopulationFacts JSON with external totals")
    parser.add_argument("--no-clamp-negative", action="store_true")
    parser.add_argument("--max-iter", type=int)
    parser.add_argument("--tol", type=float)


def _add_scenario(parser: argparse.ArgumentParser, with_kind: bool = True) -> None:
    if with_kind:
        parser.add_argument("--scenario", choices=[kind.value for kind in ScenarioKind])
    parser.add_argument("--grid-size", type=int)
    parser.add_argument("--draws", type=int)
    parser.add_argument("--a-min", type=float)
    parser.add_argument("--a-max", type=float)
    parser.add_argument("--counts", choices=[c.value for c in SampleCount])


def build_parser() -> CliParser:
    parser = CliParser(prog="powerprior", description=__doc__.splitlines()[1].strip())
    commands = parser.add_subparsers(dest="command", parser_class=CliParser)

    sub = commands.add_parser("weights", help="estimate and post-process nps weights")
    _add_common(sub)
    _add_samples(sub)

    sub = commands.add_parser("fit", help="posterior draws for one scenario")
    _add_common(sub)
    _add_samples(sub)
    _add_scenario(sub)

    sub = commands.add_parser("fit-binary", help="binary study variable via griddy Gibbs")
    _add_common(sub)
    _add_samples(sub)
    _add_scenario(sub)
    sub.add_argument("--grid-points", type=int)
    sub.add_argument("--burnin", type=int)
    sub.add_argument("--thin", type=int)
    sub.add_argument("--constraint-tol", type=float)
    sub.add_argument("--refresh-every", type=int)
    sub.add_argument("--weight-placement", choices=[p.value for p in WeightPlacement])
    sub.add_argument("--fixed-population", action="store_true")

    sub = commands.add_parser("predict", help="population mean from a draws CSV")
    _add_common(sub)
    sub.add_argument("--draws", help="draws CSV written by fit")
    sub.add_argument("--facts", help="PopulationFacts JSON")
    sub.add_argument("--scenario", choices=[kind.value for kind in ScenarioKind])

    sub = commands.add_parser("bootstrap", help="two-stage bootstrap of the population mean")
    _add_common(sub)
    _add_samples(sub)
    _add_scenario(sub)
    sub.add_argument("--replicates", type=int)
    sub.add_argument("--mode", choices=[m.value for m in ResampleMode])
    sub.add_argument("--inner-draws", type=int)
    sub.add_argument("--preliminary", action="store_true", help="also run the ps-only bootstrap")
    sub.add_argument("--ps-replicates", type=int)

    sub = commands.add_parser("simulate", help="repeated-sampling study on simulated populations")
    _add_common(sub)
    sub.add_argument("--rho-list", type=_float_list)
    sub.add_argument("--replications", type=int)
    sub.add_argument("--scenarios", type=_name_list)
    sub.add_argument("--misspec", choices=[m.value for m in Misspecification])
    sub.add_argument("--N", type=int, dest="N")
    sub.add_argument("--n1", type=int)
    sub.add_argument("--n2", type=int)
    sub.add_argument("--size-ratio", type=float)
    sub.add_argument("--draws", type=int)
    sub.add_argument("--grid-size", type=int)
    sub.add_argument("--no-postprocess", action="store_true")
    sub.add_argument("--counts", choices=[c.value for c in SampleCount])
    sub.add_argument("--lower-clamp", type=float)
    sub.add_argument("--upper-quantile", type=float)

    sub = commands.add_parser("report", help="merge runs into a comparison table")
    _add_common(sub)
    sub.add_argument("--runs", help="directory holding previous runs (default: --out)")

    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for subparser in action.choices.values():
                subparser.set_defaults(**{a.dest: None for a in subparser._actions if a.dest != "help"})
    return parser


def _coerce(action: argparse.Action, raw: str) -> Any:
    if isinstance(action, argparse._StoreTrueAction):
        return raw.strip().lower() in _TRUE
    value = action.type(raw) if action.type else raw
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config value {raw!r} for {action.dest} is not one of {list(action.choices)}")
    return value


def merge_config(subparser: argparse.ArgumentParser, args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    """
    설정 병합: 환경변수(Settings) < --config 파일 < 명령행 플래그.

    Returns:
        Dict keyed by flag dest; flags not given anywhere are absent
    """
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    merged: Dict[str, Any] = {
        "out": str(settings.out_dir),
        "threads": settings.threads,
        "log_level": settings.log_level,
        "seed": 0,
    }
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        for key, raw in dotenv_values(args.config).items():
            dest = key.strip().replace("-", "_")
            if dest not in actions:
                raise UsageError(f"unknown config key '{key}' for {args.command}")
            if raw is not None:
                merged[dest] = _coerce(actions[dest], raw)
    for dest in actions:
        value = getattr(args, dest, None)
        if value is None:
            continue
        if isinstance(actions[dest], argparse._StoreTrueAction) and not value:
            continue
        merged[dest] = value
    return merged


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command '{command}'")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 usage error, 2 data validation error, 3 numerical failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.error(f"a command is required: {', '.join(COMMANDS)}")
        subparser = _subparser(parser, args.command)
        config = merge_config(subparser, args, Settings())
        # 로깅 설정
        logging.basicConfig(level=config["log_level"], stream=sys.stderr, force=True)
        logger.info(f"🚀 {args.command} 시작")

        from integration_service import integration_service

        try:
            artifacts = integration_service.run(args.command, config)
        except UsageError as e:
            subparser.print_usage(sys.stderr)
            raise e
        logger.info(f"🎉 {args.command} 완료: {len(artifacts)} artifacts in {config['out']}")
        return 0
    except PowerPriorError as e:
        logger.error(f"{args.command if 'args' in locals() else 'cli'} 실패: {e}")
        reason = str(e).replace('"', "'").replace("\n", " ")
        print(f'error={e.code} reason="{reason}"', file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        reason = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        print(f'error={UsageError.code} reason="{reason}"', file=sys.stderr)
        return UsageError.exit_code
    except SystemExit as e:
        # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
