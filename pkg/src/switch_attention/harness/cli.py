"""
Command line entry point. Every subcommand prints key=value lines to stdout, writes its files to --out
and reports failures as one `error=<Class> message="<text>"` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from typing_extensions import List, Optional, Sequence

from ..exceptions import CheckpointError, ConfigurationError, LogicalError
from ..inference.cost_accounting import CostReport, decode_mem_access_summary, gate_trace
from ..inference.session import InferenceSession
from ..model.checkpoint import load_checkpoint
from ..model.config import AttentionMode
from ..model.transformer import SwiAttnModel
from .configuration import ExperimentConfig, load_experiment
from .route_stats import measured_cost_report, route_stats, run_niah_instance
from .selftest import run_selftest
from .synthetic_data import BatchStream, Vocabulary, niah_sweep
from .telemetry import write_cost_report, write_gate_records, write_rows
from .training import cpt_swiattn, evaluate_lm_loss, pretrain_full

logger = logging.getLogger(__name__)

NIAH_COLUMNS = ("context_length", "depth_percent", "needle_distance", "inside_window", "retrieved", "full_ratio")


def _emit(**values) -> None:
    print(" ".join(f"{key}={_format(value)}" for key, value in values.items()))


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}" if not value.is_integer() else f"{value:.1f}"
    return str(value)


def _out_dir(args: argparse.Namespace) -> Optional[str]:
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_model(args: argparse.Namespace) -> SwiAttnModel:
    model = load_checkpoint(args.checkpoint)
    if getattr(args, "mode", None) is not None and AttentionMode(args.mode) is not model.config.attention_mode:
        model = model.with_attention_mode(AttentionMode(args.mode))
    return model


def _evaluation_batches(config: ExperimentConfig, model: SwiAttnModel):
    train = config.cpt
    stream = BatchStream(Vocabulary(model.config.vocab_size), config.data, train.batch_size, train.seq_len, config.seed)
    return stream.evaluation_batches(config.data.eval_batches)


def pretrain_full_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    result = pretrain_full(config.donor_model, config.pretrain, config.data, _out_dir(args))
    _emit(stage="pretrain", steps=len(result.history), final_L_LM=result.history[-1].lm_loss)
    return 0


def cpt_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    donor = load_checkpoint(args.donor)
    model_config = config.model
    if args.mode is not None:
        model_config = model_config.with_attention_mode(AttentionMode(args.mode))
    if model_config.attention_mode is AttentionMode.FULL_ONLY:
        raise ConfigurationError("mode", "continual pretraining needs swiattn, swa_only or static_hybrid")
    result = cpt_swiattn(donor, model_config, config.cpt, config.data, _out_dir(args))
    last = result.history[-1]
    _emit(
        stage="cpt",
        mode=model_config.attention_mode.value,
        steps=len(result.history),
        final_L_LM=last.lm_loss,
        full_ratio=last.full_ratio,
    )
    return 0


def eval_ppl_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    model = _load_model(args)
    batches = _evaluation_batches(config, model)
    nll = evaluate_lm_loss(model, batches)
    scored = evaluate_lm_loss(model, batches, scored_only=True)
    _emit(mode=model.config.attention_mode.value, mean_nll=nll, ppl=float(np.exp(nll)), scored_nll=scored)
    return 0


def generate_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    model = _load_model(args)
    prompt = [int(t) for t in args.prompt.split(",") if t.strip()]
    session = InferenceSession(model, temperature=args.temperature, seed=config.seed)
    result = session.generate(prompt, args.max_new, args.stop_token)
    out = _out_dir(args)
    if out is not None:
        write_gate_records(os.path.join(out, "gates.csv"), result.gate_log)
        write_cost_report(os.path.join(out, "cost.csv"), result.cost_report)
    _emit(tokens=",".join(str(t) for t in result.tokens), stopped=result.stopped)
    return 0


def niah_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    model = _load_model(args)
    instances = niah_sweep(
        Vocabulary(model.config.vocab_size), config.data, model.config.attention.window, config.seed
    )
    outcomes = [run_niah_instance(model, instance) for instance in instances]
    out = _out_dir(args)
    if out is not None:
        rows = [
            (
                o.instance.prompt_length,
                o.instance.depth_percent,
                o.instance.needle_distance,
                int(o.instance.inside_window),
                int(o.retrieved),
                o.full_ratio,
            )
            for o in outcomes
        ]
        write_rows(os.path.join(out, "niah.csv"), NIAH_COLUMNS, rows)
        write_gate_records(os.path.join(out, "gates.csv"), [r for o in outcomes for r in o.gate_records])
    for inside in (True, False):
        selected = [o for o in outcomes if o.instance.inside_window == inside]
        if selected:
            _emit(
                needle="inside_window" if inside else "outside_window",
                instances=len(selected),
                accuracy=float(np.mean([o.retrieved for o in selected])),
                full_ratio=float(np.mean([o.full_ratio for o in selected])),
            )
    return 0


def route_stats_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    model = _load_model(args)
    if args.source == "niah":
        dataset = niah_sweep(Vocabulary(model.config.vocab_size), config.data, model.config.attention.window, config.seed)
    else:
        dataset = np.concatenate([batch.tokens for batch in _evaluation_batches(config, model)])
    stats = route_stats(model, dataset)
    out = _out_dir(args)
    if out is not None:
        write_gate_records(os.path.join(out, "gates.csv"), stats.records)
    for layer, (ratio, count) in enumerate(zip(stats.layer_ratios, stats.layer_token_counts)):
        _emit(layer=layer, full_ratio=ratio, decisions=count)
    _emit(overall_full_ratio=stats.overall_ratio)
    if stats.niah_outcomes:
        _emit(inside_window_ratio=stats.ratio_inside_window, outside_window_ratio=stats.ratio_outside_window)
    return 0


MEASURED_GATES = ("corpus", "simple")


def _measured_sequences(args: argparse.Namespace, config: ExperimentConfig, model: SwiAttnModel) -> List[np.ndarray]:
    """
    corpus: held-out rows of the training mixture. simple: NIAH instances whose needle lies inside the window.
    """
    if args.gates == "corpus":
        return [row for batch in _evaluation_batches(config, model) for row in batch.tokens]
    instances = niah_sweep(Vocabulary(model.config.vocab_size), config.data, model.config.attention.window, config.seed)
    return [instance.tokens for instance in instances if instance.inside_window]


def cost_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    if args.gates in MEASURED_GATES:
        if args.checkpoint is None:
            raise ConfigurationError("checkpoint", f"--gates {args.gates} measures a trained model")
        model = _load_model(args)
        report = measured_cost_report(model, _measured_sequences(args, config, model))
        positions: List[int] = args.pos or [max(report.mean_access_by_position())]
    else:
        positions = args.pos or [config.model.max_seq_len]
        trace = gate_trace(config.model, args.gates, args.steps or max(positions), config.seed)
        report = CostReport.from_gate_trace(config.model, trace)
    out = _out_dir(args)
    if out is not None:
        write_cost_report(os.path.join(out, "cost.csv"), report)
    for position, access in decode_mem_access_summary(report, positions).items():
        _emit(pos=position, mem_access=access, window=report.window)
    _emit(gates=args.gates, prefill_flops=report.total_prefill_flops, average_mem_access=report.average_decode_access)
    return 0


def selftest_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    results = run_selftest()
    for result in results:
        print(result.line())
    return 0 if all(result.passed for result in results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON experiment config; defaults apply if omitted.")
    common.add_argument("--seed", type=int, default=None, help="Overrides SWIATTN_SEED and the config seed.")
    common.add_argument("--out", type=str, default=None, help="Directory for CSV telemetry and checkpoints.")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")

    modes = [mode.value for mode in AttentionMode]
    parser = argparse.ArgumentParser(prog="switch-attention", description="Routed full/sliding-window attention.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    subparsers.add_parser("pretrain-full", parents=[common], help="Train the full attention donor.")

    cpt = subparsers.add_parser("cpt", parents=[common], help="Continual pretraining from a donor checkpoint.")
    cpt.add_argument("--donor", type=str, required=True)
    cpt.add_argument("--mode", choices=modes, default=None, help="Attention mode of the trained model.")

    for name, help_text in (
        ("eval-ppl", "Mean NLL and perplexity on held-out batches."),
        ("generate", "Greedy or sampled generation."),
        ("niah", "Needle-in-a-haystack sweep."),
        ("route-stats", "Full attention ratios of a swiattn model."),
    ):
        command = subparsers.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--checkpoint", type=str, required=True)
        command.add_argument("--mode", choices=modes, default=None, help="Evaluate under another attention mode.")
        if name == "generate":
            command.add_argument("--prompt", type=str, required=True, help="Comma-separated token ids.")
            command.add_argument("--max-new", type=int, default=16)
            command.add_argument("--temperature", type=float, default=0.0)
            command.add_argument("--stop-token", type=int, default=None)
        if name == "route-stats":
            command.add_argument("--source", choices=["corpus", "niah"], default="corpus")

    cost = subparsers.add_parser("cost", parents=[common], help="Prefill FLOPs and decode memory access.")
    cost.add_argument(
        "--gates",
        type=str,
        default="all_full",
        help="all_full, all_swa, alternating, static_hybrid, random:<p>, or corpus / simple to measure --checkpoint.",
    )
    cost.add_argument("--checkpoint", type=str, default=None, help="Model whose own gates are measured.")
    cost.add_argument("--mode", choices=modes, default=None)
    cost.add_argument("--pos", type=int, nargs="+", default=None, help="Decode positions to summarize.")
    cost.add_argument("--steps", type=int, default=None, help="Length of the gate trace; defaults to the largest --pos.")

    subparsers.add_parser("selftest", parents=[common], help="Run the invariant checks.")
    return parser


COMMANDS = {
    "pretrain-full": pretrain_full_command,
    "cpt": cpt_command,
    "eval-ppl": eval_ppl_command,
    "generate": generate_command,
    "niah": niah_command,
    "route-stats": route_stats_command,
    "cost": cost_command,
    "selftest": selftest_command,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.verbose:
        logging.getLogger("switch_attention").setLevel(logging.DEBUG)
    try:
        config = load_experiment(args.config, args.seed)
        return COMMANDS[args.command](args, config)
    except (LogicalError, CheckpointError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        message = str(e).replace('"', "'").replace("\n", " ")
        print(f'error={e.__class__.__name__} message="{message}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
