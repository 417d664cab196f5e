"""Command-line entry point.

Every command reads the same flat configuration (defaults, then ``--config``
file, then ``--key=value`` overrides) and writes its artifacts under
``out_dir``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, defaults_help, load_config
from .data import DataError, decode, encode, load_corpus, load_task
from .kernels import bench_gemm
from .losses import LossConfigError
from .model import BOS, EOS, SEP, BitModel, ContractError, export_weight_histogram, freeze_packed, generate, histogram_table
from .pipeline import (
    PRESETS,
    StageOrderError,
    ToyData,
    TrainingDiverged,
    TrainLog,
    evaluate,
    metrics_text,
    pretrain_base,
    run_ablation,
    stage1,
    stage2,
    stage3,
    toy_data,
    train_teacher,
)
from .quant import FormatError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_STAGE = 5
EXIT_DIVERGED = 6

EXIT_HELP = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  unexpected internal error
  {EXIT_USAGE}  usage or configuration error (unknown key, bad value)
  {EXIT_MISSING}  input file missing or unreadable
  {EXIT_FORMAT}  malformed checkpoint, task or corpus file
  {EXIT_STAGE}  stage-order or model contract violation
  {EXIT_DIVERGED}  training produced a non-finite loss

errors are printed to stderr as one line: error code=<n> kind=<kind> msg=<text>

configuration keys (defaults):
{defaults_help()}
"""

COMMANDS = ("train-teacher", "convert", "pretrain", "distill", "eval", "generate", "bench", "weights-hist", "ablate")


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code, self.kind = code, kind


def _out(cfg: RunConfig, name: str) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p / name


def _in_path(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.input) if args.input else Path(cfg.out_dir) / default


def _load(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ckpt.load_checkpoint(path)


def _data(cfg: RunConfig) -> ToyData:
    toy = None
    if not cfg.task_path or not cfg.corpus_path:
        toy = toy_data(cfg.seed, cfg.toy_train, cfg.toy_heldout, cfg.toy_length, cfg.toy_corpus_docs)
    if cfg.task_path:
        train, heldout = load_task(cfg.task_path, cfg.max_seq_len).split(cfg.heldout_frac)
    else:
        train, heldout = toy.train, toy.heldout
    if cfg.corpus_path:
        corpus, probe = load_corpus(cfg.corpus_path, cfg.max_seq_len).split(cfg.heldout_frac)
    else:
        corpus, probe = toy.corpus, toy.corpus_heldout
    return ToyData(train, heldout, corpus, probe)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


# -- commands ---------------------------------------------------------------------------


def cmd_train_teacher(args, cfg: RunConfig) -> None:
    data, tc, mc = _data(cfg), cfg.train_config(), cfg.model_config()
    trainlog = TrainLog()
    base = None
    if tc.base_steps > 0:
        base = pretrain_base(mc, data.corpus, tc, trainlog)
        ckpt.save_checkpoint(base, _out(cfg, "base.bdk"), {"kind": "base", "seed": cfg.seed})
        print(f"wrote {_out(cfg, 'base.bdk')}")
    teacher, m = train_teacher(mc, data.train, tc, data.heldout, trainlog, init=base)
    ckpt.save_checkpoint(teacher, _out(cfg, "teacher.bdk"), {"kind": "teacher", "seed": cfg.seed})
    print(f"wrote {_out(cfg, 'teacher.bdk')}")
    _write(_out(cfg, "teacher_log.csv"), trainlog.to_csv())
    _write(_out(cfg, "teacher_metrics.txt"), m.to_text("teacher_"))
    sys.stdout.write(m.to_text("teacher_"))


def cmd_convert(args, cfg: RunConfig) -> None:
    src = _in_path(args, cfg, "base.bdk")
    model, _ = _load(src)
    student = stage1(model, subln=cfg.subln)
    out = Path(args.out) if args.out else _out(cfg, "student_stage1.bdk")
    ckpt.save_checkpoint(student, out, {"kind": "student_stage1", "source": src.name})
    print(f"wrote {out}")
    sys.stdout.write(metrics_text({"params_before": model.num_parameters(), "params_after": student.num_parameters()}))


def cmd_pretrain(args, cfg: RunConfig) -> None:
    student, _ = _load(_in_path(args, cfg, "student_stage1.bdk"))
    data = _data(cfg)
    trainlog = TrainLog()
    student, report = stage2(student, data.corpus, cfg.train_config(), data.corpus_heldout, trainlog)
    out = Path(args.out) if args.out else _out(cfg, "student_stage2.bdk")
    ckpt.save_checkpoint(student, out, {"kind": "student_stage2"})
    print(f"wrote {out}")
    _write(_out(cfg, "weights_before_stage2.txt"), histogram_table(report.hist_before))
    _write(_out(cfg, "weights_after_stage2.txt"), histogram_table(report.hist_after))
    _write(_out(cfg, "stage2_log.csv"), trainlog.to_csv())
    text = metrics_text({"lm_loss_before": report.loss_before, "lm_loss_after": report.loss_after, "code_tv": report.code_tv})
    _write(_out(cfg, "stage2_metrics.txt"), text)
    sys.stdout.write(text)


def cmd_distill(args, cfg: RunConfig) -> None:
    default = "student_stage2.bdk" if (Path(cfg.out_dir) / "student_stage2.bdk").exists() else "student_stage1.bdk"
    student, _ = _load(_in_path(args, cfg, default))
    teacher, _ = _load(Path(args.teacher) if args.teacher else Path(cfg.out_dir) / "teacher.bdk")
    data = _data(cfg)
    trainlog = TrainLog()
    student = stage3(student, teacher, data.train, cfg.distill_config(), cfg.train_config(), trainlog)
    out = Path(args.out) if args.out else _out(cfg, "student.bdk")
    ckpt.save_checkpoint(student, out, {"kind": "student"})
    print(f"wrote {out}")
    m = evaluate(student, data.heldout)
    trainlog.add(trainlog.rows[-1]["epoch"] if trainlog.rows else 0, "student_heldout", m.loss, accuracy=m.accuracy)
    _write(_out(cfg, "distill_log.csv"), trainlog.to_csv())
    _write(_out(cfg, "student_metrics.txt"), m.to_text("student_"))
    sys.stdout.write(m.to_text("student_"))


def cmd_eval(args, cfg: RunConfig) -> None:
    model, _ = _load(_in_path(args, cfg, "student.bdk"))
    if args.packed and not model.is_packed:
        model = freeze_packed(model)
    m = evaluate(model, _data(cfg).heldout)
    if args.predictions:
        _write(Path(args.predictions), "".join(p + "\n" for p in m.predictions))
    sys.stdout.write(m.to_text())


def cmd_generate(args, cfg: RunConfig) -> None:
    model, _ = _load(_in_path(args, cfg, "student.bdk"))
    if args.packed and not model.is_packed:
        model = freeze_packed(model)
    prompt = [BOS] + encode(args.prompt or "")
    if args.sep:
        prompt.append(SEP)
    out = generate(model, prompt, args.max_new, stop=EOS)
    print(decode(out[len(prompt) :]))


def cmd_bench(args, cfg: RunConfig) -> None:
    mc = cfg.model_config()
    d, f = mc.d_model, mc.ffn_hidden
    shapes = [(d, d)] * 4 + [(f, d), (f, d), (d, f)]
    sizes = [(m, n, k) for m in (1, 16) for n, k in shapes]
    report = bench_gemm(sizes, repeats=cfg.bench_repeats, threads=cfg.threads, seed=cfg.seed)
    fp = BitModel(mc, seed=cfg.seed)
    packed = freeze_packed(stage1(fp, subln=False))
    fp_bytes, packed_bytes = len(ckpt.dumps(fp)), len(ckpt.dumps(packed))
    block_fp = sum(v.nbytes for k, v in fp.state_arrays().items() if k in packed.linears)
    block_packed = sum(v.nbytes for k, v in packed.state_arrays().items() if k in packed.linears)
    report.fp32_bytes, report.packed_bytes = fp_bytes, packed_bytes
    report.model_rows = [
        ("model_layers", mc.n_layers),
        ("bench_shapes_per_token", len(shapes)),
        *[
            (f"all_layers_tokens_per_s.{k}", f"{report.model_tokens_per_s(k) / mc.n_layers:.3f}")
            for k in sorted({r.kernel for r in report.rows})
        ],
        ("block_fp32_bytes", block_fp),
        ("block_packed_bytes", block_packed),
        ("block_ratio", f"{block_fp / block_packed:.4f}"),
    ]
    _write(_out(cfg, "bench.txt"), report.to_text())
    _write(_out(cfg, "bench.csv"), report.to_csv())
    sys.stdout.write(report.to_text())


def cmd_weights_hist(args, cfg: RunConfig) -> None:
    model, _ = _load(_in_path(args, cfg, "student.bdk"))
    if model.is_packed:
        raise ContractError("weights-hist needs latent full-precision weights, got a packed checkpoint")
    text = histogram_table(export_weight_histogram(model, args.bins))
    out = Path(args.out) if args.out else _out(cfg, "weights_hist.txt")
    _write(out, text)


def cmd_ablate(args, cfg: RunConfig) -> None:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    data, tc, mc = _data(cfg), cfg.train_config(), cfg.model_config()
    base = pretrain_base(mc, data.corpus, tc)
    teacher, _ = train_teacher(mc, data.train, tc, data.heldout, init=base)
    result = run_ablation(PRESETS[args.preset], base, teacher, data.train, data.heldout, data.corpus, cfg.distill_config(), tc)
    _write(_out(cfg, f"ablate_{args.preset}.csv"), result.to_csv())
    sys.stdout.write(f"teacher_accuracy={result.teacher_accuracy:.6f}\n" + result.to_csv())


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "convert": cmd_convert,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "weights-hist": cmd_weights_hist,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tdistill",
        description="Fine-tune a small FP transformer, convert it to ternary weights, and distill.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file ('#' starts a comment)")
    p.add_argument("--in", dest="input", help="input checkpoint")
    p.add_argument("--out", help="output path (defaults under out_dir)")
    p.add_argument("--teacher", help="teacher checkpoint for distill")
    p.add_argument("--preset", default="stages", help="ablation preset: stages or losses")
    p.add_argument("--prompt", help="generation prompt text")
    p.add_argument("--sep", action="store_true", help="append the separator token to the prompt")
    p.add_argument("--max-new", type=int, default=8)
    p.add_argument("--packed", action="store_true", help="freeze to packed ternary before eval/generate")
    p.add_argument("--predictions", help="eval: also write one prediction per line here")
    p.add_argument("--bins", type=int, default=60)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _classify(e: BaseException) -> tuple[int, str]:
    if isinstance(e, CliError):
        return e.code, e.kind
    if isinstance(e, (ConfigError, LossConfigError)):
        return EXIT_USAGE, "config"
    if isinstance(e, FileNotFoundError):
        return EXIT_MISSING, "missing"
    if isinstance(e, (FormatError, DataError)):
        return EXIT_FORMAT, "format"
    if isinstance(e, (StageOrderError, ContractError)):
        return EXIT_STAGE, "contract"
    if isinstance(e, (TrainingDiverged, FloatingPointError)):
        return EXIT_DIVERGED, "diverged"
    return EXIT_INTERNAL, "internal"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    known_flags = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    named = {o for act in parser._actions for o in act.option_strings}
    overrides = [a for a in argv if a.startswith("--") and a.split("=", 1)[0] in known_flags - named]
    rest = [a for a in argv if a not in overrides]
    try:
        args = parser.parse_args(rest)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, overrides)
        HANDLERS[args.command](args, cfg)
    except Exception as e:  # noqa: BLE001 - every failure becomes one error line
        code, kind = _classify(e)
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error code={code} kind={kind} msg={msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
