"""``popcorn`` command line.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime failure.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import io as pio
from .config import RunConfig, dump_config, load_config, load_raw
from .data import split_validation
from .errors import ConfigError, DataError, PopcornError
from .model import load_checkpoint
from .report import build_report, format_significance, format_table, load_result, make_study, save_result
from .selection import build_graph, select
from .study import ARMS, evaluate_model, run_study, verdict
from .synth import synthesize_dataset
from .trainer import Strategy, Trainer

log = logging.getLogger("popcorn")

STRATEGIES = [s.value for s in Strategy]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides POPCORN_SEED and the file)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry; repeatable")


def build_parser():
    parser = _Parser(prog="popcorn", description="Progressive pseudo-labeling with latent proximity selection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic dataset directory")
    _common(p)
    p.add_argument("--out", type=Path, help="dataset directory (default: data_dir from the config)")

    p = sub.add_parser("train", help="train one strategy on a dataset directory")
    _common(p)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--data", type=Path, help="dataset directory (default: data_dir from the config)")
    p.add_argument("--out", type=Path, help="run directory (default: <output_dir>/<strategy>-seed<seed>)")
    p.add_argument("--max-cycles", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in the run directory")
    p.add_argument("--reproducible", action="store_true", help="zero timestamps so reruns are byte-identical")
    p.add_argument("--stop-after-cycle", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("select", help="rank unlabeled embeddings by proximity to training embeddings")
    p.add_argument("--u-feats", type=Path, required=True, help="RAW_TENSOR (|U|, d) unlabeled embeddings")
    p.add_argument("--u-ids", type=Path, required=True, help="text file, one unlabeled id per line")
    p.add_argument("--t-feats", type=Path, required=True, help="RAW_TENSOR (|T|, d) training embeddings")
    p.add_argument("--t-ids", type=Path, required=True, help="text file, one training id per line")
    p.add_argument("-K", type=int, default=200)
    p.add_argument("-p", type=int, default=5)
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("evaluate", help="score a run's final checkpoint on the test split")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--data", type=Path, required=True, help="dataset directory with a test split")
    p.add_argument("--checkpoint", type=Path, help="default: <run_dir>/checkpoints/final.ckpt")
    p.add_argument("--name", help="arm name in the result file (default: the run's strategy)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path, help="result file (default: <run_dir>/results.json)")

    p = sub.add_parser("report", help="render comparison tables from result files")
    p.add_argument("results", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("study", help="run all arms for several seeds on synthetic data")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", choices=ARMS, default=list(ARMS))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--reproducible", action="store_true")
    return parser


def _config(args):
    return load_config(args.config, args.overrides, args.seed)


def cmd_synth_data(args):
    cfg = _config(args)
    out = args.out or Path(cfg.data_dir)
    data = synthesize_dataset(cfg.synth, cfg.seed)
    try:
        pio.write_dataset(out, data.pool, data.test, data.hidden_truth,
                          {"seed": cfg.seed, "synth": cfg.synth.to_dict()})
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from None
    n_lab, n_unl = data.pool.sizes
    print(f"wrote {out}: {n_lab} labeled, {n_unl} unlabeled, {len(data.test)} test")
    return 0


def _train_config(args):
    cfg = _config(args)
    trainer = cfg.trainer
    if args.strategy:
        trainer = dataclasses.replace(trainer, strategy=args.strategy)
    if args.max_cycles is not None:
        if args.max_cycles < 0:
            raise ConfigError("--max-cycles must be >= 0")
        trainer = dataclasses.replace(trainer, max_cycles=args.max_cycles)
    return dataclasses.replace(cfg, trainer=trainer.validate())


def cmd_train(args):
    cfg = _train_config(args)
    data_dir = args.data or Path(cfg.data_dir)
    run_dir = args.out or Path(cfg.output_dir) / f"{cfg.trainer.strategy}-seed{cfg.seed}"
    pool, test = pio.load_dataset(data_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create run directory {run_dir}: {exc}") from None
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise PopcornError(f"{run_dir} is in use by another process") from None
    try:
        cfg_path = run_dir / "config.yaml"
        if args.resume and cfg_path.exists():
            previous = RunConfig.from_dict(load_raw(cfg_path))
            if previous != cfg:
                raise ConfigError(f"{cfg_path} differs from the requested configuration; refusing to resume")
        dump_config(cfg, cfg_path)
        pool, validation = split_validation(pool, cfg.trainer.validation_fraction)
        trainer = Trainer(cfg.trainer, cfg.model, cfg.augment, cfg.pairs, cfg.optimizer)
        result = trainer.run(pool, validation, test, run_dir=run_dir, resume=args.resume,
                             stop_after_cycle=args.stop_after_cycle, reproducible=args.reproducible)
    finally:
        lock.release()
    state = "finished" if result.completed else "stopped"
    print(f"{state}: {len(result.cycles)} cycles, pool sizes {result.pool.sizes}, model {result.model.state_hash()[:12]}")
    return 0


def _read_ids(path):
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    ids = [line.strip() for line in text.splitlines() if line.strip()]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return ids


def _features(feats_path, ids_path):
    feats = pio.read_raw(feats_path)
    ids = _read_ids(ids_path)
    if feats.ndim != 2 or feats.shape[0] != len(ids):
        raise DataError(f"{feats_path}: expected shape ({len(ids)}, d), got {feats.shape}")
    return dict(zip(ids, feats))


def cmd_select(args):
    if args.K < 1 or args.p < 1:
        raise ConfigError("-K and -p must be >= 1")
    graph = build_graph(_features(args.u_feats, args.u_ids), _features(args.t_feats, args.t_ids))
    res = select(graph, args.K, args.p)
    lines = ["rank\tid\tscore"] + [f"{r}\t{i}\t{s!r}" for r, (i, s) in enumerate(zip(res.selected_ids, res.scores), 1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _curve(run_dir):
    path = run_dir / "log.jsonl"
    if not path.exists():
        return []
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    return [{"cycle": r["cycle"], "validation_dice": r.get("validation_dice"), "test_dice": r.get("test_dice")}
            for r in recs if r.get("type") == "cycle"]


def _run_strategy(run_dir):
    path = run_dir / "config.yaml"
    if not path.is_file():
        return ""
    return load_config(path, env={}).trainer.strategy


def cmd_evaluate(args):
    ckpt = args.checkpoint or args.run_dir / "checkpoints" / "final.ckpt"
    if not ckpt.is_file():
        raise DataError(f"missing checkpoint: {ckpt}")
    model, _, _, extra = load_checkpoint(ckpt)
    _, test = pio.load_dataset(args.data)
    if not test:
        raise DataError(f"{args.data}: dataset has no test samples")
    strategy = _run_strategy(args.run_dir)
    result = evaluate_model(model, test, args.threshold, args.name or strategy, strategy)
    result.curve = _curve(args.run_dir)
    result.meta = {"checkpoint": str(ckpt), "cycles": extra.get("cycle"), "model_hash": model.state_hash()}
    out = args.out or args.run_dir / "results.json"
    save_result(result, out)
    m = result.means()
    print(f"{result.arm}: dice {m['dice']:.4f} precision {m['precision']:.4f} "
          f"sensitivity {m['sensitivity']:.4f} over {len(test)} images -> {out}")
    return 0


def cmd_report(args):
    study = make_study([load_result(p) for p in args.results])
    files = build_report(study, args.out, args.alpha)
    sys.stdout.write(format_table(study))
    sys.stdout.write(format_significance(study, args.alpha))
    print(f"report written to {files['table_txt'].parent}")
    return 0


def cmd_study(args):
    cfg = _config(args)

    def progress(seed, arm, res):
        log.info("seed %d %-14s dice %.4f", seed, arm, res.means()["dice"])

    studies = run_study(cfg, args.seeds, args.arms, args.out, args.reproducible, progress)
    for seed, study in studies.items():
        print(f"== seed {seed}")
        sys.stdout.write(format_table(study))
        sys.stdout.write(format_significance(study, cfg.evaluation.significance_level))
    if "popcorn" in args.arms and "baseline" in args.arms:
        v = verdict(studies, alpha=cfg.evaluation.significance_level)
        print(f"popcorn > baseline in {v['n_better']}/{len(studies)} seeds, "
              f"significant in {v['n_significant']}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "select": cmd_select,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "study": cmd_study,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PopcornError as exc:
        print(f"popcorn {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"popcorn {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (FloatingPointError, np.linalg.LinAlgError, MemoryError) as exc:
        print(f"popcorn {args.command}: runtime failure: {exc}", file=sys.stderr)
        return PopcornError.exit_code


if __name__ == "__main__":
    sys.exit(main())
