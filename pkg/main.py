#!/usr/bin/env python3
"""
attnverify - certify robustness of small transformer encoders against embedding
perturbations.

    main.py verify   --model M --input I --positions 0 --eps 0.01 --strategy opt --out report.json
    main.py search   --model M --input I --positions 0,1 --strategy baseline,opt --out search.json
    main.py compare  --model M --input I --positions 0,1 --strategy baseline,rule,opt --out compare.json
    main.py check    --model M --input I --positions 0 --eps 0.05 --samples 10000 --out check.json
    main.py genmodel --layers 2 --heads 2 --seq-len 4 --hidden 8 --seed 7 --out model.json --input input.json

Exit codes: verify 0 Verified, 1 Unknown, 2 Unverifiable; check 0 without violations,
1 with violations; every command exits 3 on errors.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from statistics import mean
from typing import List, Optional, Tuple

from bounds import Norm
from errors import VerifierError
from formats.reports import (csv_path, dumps_report, report_to_dict, search_to_dict, write_report,
                             write_search_csv)
from formats.task_file import load_input, save_input
from log import configure_logging
from model import ModelConfig, forward, generate_random_model, load_model, predict, random_input, save_model
from relaxations import flip_x_coefficient
from strategies import InitMode, OptimizerConfig
from symbols import PoolingMode
from verifier import (Strategy, Verdict, VerificationTask, binary_search_eps, search_max_eps,
                      soundness_sample_check, verify)

logger = logging.getLogger(__name__)

EXIT_ERROR = 3
VERDICT_EXIT = {Verdict.VERIFIED: 0, Verdict.UNKNOWN: 1, Verdict.UNVERIFIABLE: 2}


@dataclass
class JobConfig:
    model_path: Optional[str]
    input_path: Optional[str]
    positions: List[int]
    epsilon: float
    p_norm: Norm
    strategies: List[Strategy]
    optimizer: OptimizerConfig
    num_iters: int = 20
    seed: int = 0
    jobs: int = 1
    output_path: Optional[str] = None
    samples: int = 10000
    corrupt_plane: bool = False
    synthetic_threshold: Optional[float] = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "JobConfig":
        optimizer = OptimizerConfig(max_steps=args.steps, learning_rate=args.lr, init=InitMode(args.init),
                                    seed=args.seed)
        job = cls(
            model_path=args.model,
            input_path=args.input,
            positions=args.positions,
            epsilon=args.eps,
            p_norm=Norm(args.norm),
            strategies=args.strategy,
            optimizer=optimizer,
            num_iters=args.num_iters,
            seed=args.seed,
            jobs=args.jobs,
            output_path=args.out,
            samples=args.samples,
            corrupt_plane=args.corrupt_plane,
            synthetic_threshold=args.synthetic_threshold,
        )
        job.validate()
        return job

    def validate(self):
        if self.epsilon < 0:
            raise VerifierError(f"--eps must be >= 0, got {self.epsilon}")
        if self.num_iters < 1:
            raise VerifierError(f"--num-iters must be >= 1, got {self.num_iters}")
        if self.jobs < 1:
            raise VerifierError(f"--jobs must be >= 1, got {self.jobs}")
        if self.samples < 1:
            raise VerifierError(f"--samples must be >= 1, got {self.samples}")
        if not self.positions:
            raise VerifierError("--positions must name at least one row")
        if self.synthetic_threshold is None and (self.model_path is None or self.input_path is None):
            raise VerifierError("--model and --input are required")

    def load(self, positions: Optional[List[int]] = None, epsilon: Optional[float] = None):
        model = load_model(self.model_path)
        X, label = load_input(self.input_path, (model.config.seq_len, model.config.hidden_size))
        task = VerificationTask.create(model, X, positions or self.positions,
                                       self.epsilon if epsilon is None else epsilon, self.p_norm, label)
        return model, task


def _positions(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated row indices, got {text!r}")


def _strategies(text: str) -> List[Strategy]:
    try:
        return [Strategy(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown strategy in {text!r}; choose from baseline, dual, rule, opt")


def _write(job: JobConfig, command: str, body: dict):
    if job.output_path:
        write_report(job.output_path, command, body)
    else:
        sys.stdout.write(dumps_report(command, body))


def cmd_verify(job: JobConfig) -> int:
    model, task = job.load()
    report = verify(model, task, job.strategies[0], job.optimizer)
    body = report_to_dict(report)
    body["positions"] = list(task.spec.positions)
    body["label"] = task.label
    body["norm"] = task.spec.p_norm.value
    _write(job, "verify", body)
    print(f"{report.verdict.value} margin_lb={report.margin_lb:.6g}", file=sys.stderr)
    return VERDICT_EXIT[report.verdict]


def _search_one(job: JobConfig, position: int) -> List[dict]:
    """Certified epsilon for one perturbed position under every requested strategy."""
    rows = []
    if job.synthetic_threshold is not None:
        threshold = job.synthetic_threshold
        for strategy in job.strategies:
            result = binary_search_eps(lambda eps: eps <= threshold, job.num_iters)
            rows.append({"task_id": position, "position": position, "strategy": strategy.value,
                         **search_to_dict(result)})
        return rows
    model, task = job.load([position], 0.0)
    for strategy in job.strategies:
        result = search_max_eps(model, task, strategy, job.num_iters, job.optimizer)
        rows.append({"task_id": position, "position": position, "strategy": strategy.value,
                     **search_to_dict(result)})
    return rows


def _search_all(job: JobConfig) -> List[dict]:
    if job.jobs == 1:
        results = [_search_one(job, position) for position in job.positions]
    else:
        with ProcessPoolExecutor(max_workers=job.jobs) as pool:
            results = list(pool.map(_search_one, [job] * len(job.positions), job.positions))
    return [row for rows in results for row in rows]


def cmd_search(job: JobConfig) -> int:
    rows = _search_all(job)
    _write(job, "search", {"num_iters": job.num_iters, "norm": job.p_norm.value,
                           "synthetic": job.synthetic_threshold is not None, "results": rows})
    if job.output_path:
        write_search_csv(csv_path(job.output_path),
                         [(row["task_id"], row["strategy"], row["eps"], row["wall_time"]) for row in rows])
    for row in rows:
        logger.info("position %d %s: eps %.6g", row["position"], row["strategy"], row["eps"])
    return 0


def _ratio(value: float, reference: float) -> Optional[float]:
    if reference == 0:
        return 1.0 if value == 0 else None
    return value / reference


def compare_rows(rows: List[dict], strategies: List[Strategy]) -> Tuple[List[dict], dict]:
    """Per-task table keyed by strategy, with eps and time ratios against the first strategy."""
    reference = strategies[0].value
    table = []
    for task_id in dict.fromkeys(row["task_id"] for row in rows):
        cells = {row["strategy"]: row for row in rows if row["task_id"] == task_id}
        ref = cells[reference]
        entry = {"task_id": task_id, "results": {}}
        for strategy in strategies:
            cell = cells[strategy.value]
            entry["results"][strategy.value] = {
                "eps": cell["eps"],
                "wall_time": cell["wall_time"],
                "ratio": _ratio(cell["eps"], ref["eps"]),
                "time_ratio": _ratio(cell["wall_time"], ref["wall_time"]),
            }
        table.append(entry)
    aggregate = {}
    for strategy in strategies:
        ratios = [e["results"][strategy.value]["ratio"] for e in table if e["results"][strategy.value]["ratio"] is not None]
        times = [e["results"][strategy.value]["time_ratio"] for e in table
                 if e["results"][strategy.value]["time_ratio"] is not None]
        aggregate[strategy.value] = {
            "mean_ratio": mean(ratios) if ratios else None,
            "mean_time_ratio": mean(times) if times else None,
        }
    return table, aggregate


def cmd_compare(job: JobConfig) -> int:
    if len(job.strategies) < 2:
        raise VerifierError("compare needs at least two strategies")
    table, aggregate = compare_rows(_search_all(job), job.strategies)
    _write(job, "compare", {"reference": job.strategies[0].value, "num_iters": job.num_iters,
                            "tasks": table, "aggregate": aggregate})
    for strategy, values in aggregate.items():
        print(f"{strategy}: mean eps ratio {values['mean_ratio']}", file=sys.stderr)
    return 0


def cmd_check(job: JobConfig) -> int:
    model, task = job.load()
    report = verify(model, task, job.strategies[0], job.optimizer)
    if report.verdict == Verdict.UNVERIFIABLE:
        _write(job, "check", {"verdict": report.verdict.value, "samples": 0, "violations": 0})
        print("no bounds to check: softmax bounds could not be formed", file=sys.stderr)
        return 0
    hook = flip_x_coefficient if job.corrupt_plane else None
    result = soundness_sample_check(model, task, report.alpha, job.samples, job.seed, plane_hook=hook)
    _write(job, "check", {
        "strategy": report.strategy.value,
        "epsilon": task.spec.epsilon,
        "samples": result.samples,
        "violations": result.violations,
        "logit_violations": result.logit_violations,
        "margin_violations": result.margin_violations,
        "affine_violations": result.affine_violations,
        "worst_gap": result.worst_gap,
        "first_violation": result.first_violation,
    })
    if result.violations:
        print(f"{result.violations} violations; first: {json.dumps(result.first_violation)}", file=sys.stderr)
        return 1
    return 0


def cmd_genmodel(args: argparse.Namespace) -> int:
    config = ModelConfig(
        num_layers=args.layers, num_heads=args.heads, seq_len=args.seq_len, hidden_size=args.hidden,
        head_dim=args.hidden // args.heads if args.heads else 0, ffn_hidden=args.ffn, num_classes=args.classes,
        pooling=PoolingMode(args.pooling), use_output_projection=not args.no_output_projection,
    )
    model = generate_random_model(config, args.seed, with_pooler=args.pooler)
    save_model(model, args.out)
    X = random_input(config, args.seed)
    logits = forward(model, X)
    if args.input:
        save_input(args.input, X, predict(model, X))
    print(json.dumps({"logits": logits.tolist(), "label": predict(model, X)}))
    return 0


class ArgumentParser(argparse.ArgumentParser):
    # usage errors share the error exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="attnverify", description=__doc__.splitlines()[1])
    commands = parser.add_subparsers(dest="command", required=True)

    for name, default_strategy in (("verify", "baseline"), ("search", "baseline"), ("compare", "baseline,opt"),
                                   ("check", "baseline")):
        sub = commands.add_parser(name)
        sub.add_argument("--model")
        sub.add_argument("--input")
        sub.add_argument("--positions", type=_positions, default=[0])
        sub.add_argument("--eps", type=float, default=0.01)
        sub.add_argument("--norm", choices=[n.value for n in Norm], default=Norm.L1.value)
        sub.add_argument("--strategy", type=_strategies, default=_strategies(default_strategy))
        sub.add_argument("--steps", type=int, default=1000)
        sub.add_argument("--lr", type=float, default=0.05)
        sub.add_argument("--init", choices=[m.value for m in InitMode], default=InitMode.BASELINE_ZERO.value)
        sub.add_argument("--num-iters", type=int, default=20)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--jobs", type=int, default=1)
        sub.add_argument("--samples", type=int, default=10000)
        sub.add_argument("--out")
        sub.add_argument("--corrupt-plane", action="store_true", help=argparse.SUPPRESS)
        sub.add_argument("--synthetic-threshold", type=float, help=argparse.SUPPRESS)

    gen = commands.add_parser("genmodel")
    gen.add_argument("--layers", type=int, default=1)
    gen.add_argument("--heads", type=int, default=1)
    gen.add_argument("--seq-len", type=int, default=4)
    gen.add_argument("--hidden", type=int, default=8)
    gen.add_argument("--ffn", type=int, default=16)
    gen.add_argument("--classes", type=int, default=2)
    gen.add_argument("--pooling", choices=[p.value for p in PoolingMode], default=PoolingMode.MEAN.value)
    gen.add_argument("--no-output-projection", action="store_true")
    gen.add_argument("--pooler", action="store_true")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--input")
    return parser


COMMANDS = {"verify": cmd_verify, "search": cmd_search, "compare": cmd_compare, "check": cmd_check}


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "genmodel":
            return cmd_genmodel(args)
        return COMMANDS[args.command](JobConfig.from_args(args))
    except (VerifierError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
