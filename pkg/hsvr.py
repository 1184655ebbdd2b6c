#!/usr/bin/env python3
"""
HSVR toolkit
Trains, regularizes and compresses rotation-form state-space sequence models

Usage:
    python hsvr.py train --preset synthetic-toy --seed 0
    python hsvr.py train --resume runs/model.ckpt --epochs 2
    python hsvr.py hsv-report runs/model.ckpt --plot
    python hsvr.py compress runs/model.ckpt --trunc-ratio 0.5
    python hsvr.py evaluate runs/compressed.ckpt --compare runs/model.ckpt
    python hsvr.py bench-lyap --sizes 64 128 256 512
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

import config
from benchmarks import bench_inference, bench_lyap, bench_scan, block_slope, median_time
from checkpoint import (checkpoint_to_model, load_checkpoint, model_to_checkpoint, restore_optimizer,
                        save_checkpoint)
from compress import (certificate_rows, compress_model, plan_by_budget, plan_by_energy,
                      plan_by_truncation_ratio)
from datasets import load_dataset
from exceptions import ConfigError, HsvrError, exit_code_for
from hankel import HsvReport, dense_hsvs, hsv_report, layers_hsv_report
from net import (EpochMetrics, SequenceModel, TrainConfig, build_optimizer, evaluate, init_model,
                 predict_logits, train)
from reports import (EVAL_COLUMNS, LYAP_COLUMNS, SCAN_COLUMNS, SWEEP_COLUMNS, plot_hsv_decay,
                     write_certificate_csv, write_csv, write_hsv_csv, write_metrics_csv)

logger = logging.getLogger(__name__)


def model_hsv_report(model: SequenceModel, workers: int = 1) -> HsvReport:
    """HSVs of every SSM layer: block gramians for rotation layers, dense ones for reduced layers."""
    sigmas = []
    for block in model.blocks:
        ssm = block.ssm
        if ssm.mode == 'rotation':
            sigmas.append(layers_hsv_report([ssm.to_params()]).sigmas[0])
            continue
        reduced = ssm.to_reduced()
        if reduced.mode == 'dense_real':
            sigmas.append(dense_hsvs(reduced.as_dense()))
        else:
            sigmas.append(reduced.sigmas[:reduced.r])
    return hsv_report(sigmas)


class HsvrToolkit:
    """Runs the toolkit commands and writes their artifacts"""

    def __init__(self, output_dir: Path = None, data_dir: Path = None, workers: int = None):
        """
        Initialize the toolkit

        Args:
            output_dir: Directory for checkpoints and CSV reports
            data_dir: Directory holding MNIST IDX files
            workers: Threads for scans and gramian solves
        """
        self.output_dir = Path(output_dir or config.OUTPUT_DIR)
        self.data_dir = Path(data_dir or config.DATA_DIR)
        self.workers = workers or config.NUM_THREADS

    def _load(self, checkpoint_path: Path) -> SequenceModel:
        ckpt = load_checkpoint(checkpoint_path)
        model = checkpoint_to_model(ckpt)
        for block in model.blocks:
            block.ssm.workers = self.workers
        return model

    def train(self, cfg: TrainConfig, hsv_every: int = config.HSV_EVERY, show_progress: bool = True) -> Dict[str, Path]:
        """
        Train a model and write checkpoint, metrics and HSV snapshots

        Returns:
            Paths of the written artifacts
        """
        self._banner("TRAIN", cfg)
        logger.info("\n[1/3] Loading dataset...")
        train_set, eval_set = load_dataset(cfg, self.data_dir)
        cfg.num_classes = max(cfg.num_classes, train_set.num_classes)

        logger.info("\n[2/3] Training...")
        model = init_model(cfg)
        optimizer = build_optimizer(model, cfg)
        rng = np.random.default_rng(cfg.seed)
        return self._fit(model, optimizer, rng, train_set, eval_set, 1, hsv_every, show_progress)

    def resume(self, checkpoint_path: Path, epochs: Optional[int] = None, hsv_every: int = config.HSV_EVERY,
               show_progress: bool = True) -> Dict[str, Path]:
        """
        Continue training from a checkpoint written by `train`

        Model weights, AdamW moments and the shuffling generator are restored, so
        resuming after k epochs replays the same batches a single longer run would.

        Args:
            checkpoint_path: Uncompressed training checkpoint
            epochs: Additional epochs (the checkpoint's epoch count when omitted)
        """
        ckpt = load_checkpoint(checkpoint_path)
        if ckpt.layer_modes != ['rotation'] * len(ckpt.layer_modes):
            raise ConfigError(f"{checkpoint_path} is compressed and cannot be trained further")
        model = checkpoint_to_model(ckpt)
        for block in model.blocks:
            block.ssm.workers = self.workers
        cfg = model.cfg
        if epochs is not None:
            if epochs < 0:
                raise ConfigError(f"epochs must be >= 0, got {epochs}")
            cfg.epochs = epochs
        optimizer = restore_optimizer(ckpt, model)
        rng = np.random.default_rng(cfg.seed)
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        first_epoch = int(ckpt.extras.get('epochs_done', 0)) + 1

        self._banner(f"RESUME at epoch {first_epoch}", cfg)
        logger.info("\n[1/3] Loading dataset...")
        train_set, eval_set = load_dataset(cfg, self.data_dir)
        logger.info("\n[2/3] Training...")
        return self._fit(model, optimizer, rng, train_set, eval_set, first_epoch, hsv_every, show_progress)

    def _banner(self, title: str, cfg: TrainConfig):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.info("=" * 70)
        logger.info(f"HSVR {title} - reg={cfg.reg:g} depth={cfg.depth} n={cfg.n} p={cfg.p} seed={cfg.seed}")
        logger.info("=" * 70)

    def _fit(self, model: SequenceModel, optimizer, rng: np.random.Generator, train_set, eval_set,
             first_epoch: int, hsv_every: int, show_progress: bool) -> Dict[str, Path]:
        cfg = model.cfg
        artifacts: Dict[str, Path] = {}

        def snapshot(epoch: int, current: SequenceModel, _: EpochMetrics):
            if hsv_every > 0 and epoch % hsv_every == 0:
                path = self.output_dir / f'hsv_epoch{epoch:03d}.csv'
                write_hsv_csv(model_hsv_report(current, self.workers), path)
                artifacts[f'hsv_epoch{epoch}'] = path

        model, metrics = train(model, train_set, cfg, eval_set=eval_set, optimizer=optimizer,
                               on_epoch=snapshot, show_progress=show_progress, rng=rng, first_epoch=first_epoch)

        logger.info("\n[3/3] Writing artifacts...")
        ckpt = model_to_checkpoint(model, optimizer, rng_state=rng.bit_generator.state,
                                   extras={'epochs_done': first_epoch - 1 + len(metrics)})
        artifacts['checkpoint'] = save_checkpoint(ckpt, self.output_dir / 'model.ckpt')
        artifacts['metrics'] = write_metrics_csv(metrics, self.output_dir / 'metrics.csv')
        artifacts['hsv'] = write_hsv_csv(model_hsv_report(model, self.workers), self.output_dir / 'hsv.csv')
        logger.info(f"✓ Final eval accuracy: {metrics[-1].eval_acc:.4f}" if metrics else "✓ No epochs run")
        return artifacts

    def hsv_report(self, checkpoint_path: Path, plot: bool = False) -> Dict[str, Path]:
        model = self._load(checkpoint_path)
        report = model_hsv_report(model, self.workers)
        artifacts = {'hsv': write_hsv_csv(report, self.output_dir / 'hsv.csv')}
        if plot:
            artifacts['plot'] = plot_hsv_decay(report, self.output_dir / 'hsv.png')
        return artifacts

    def plan(self, report: HsvReport, energy: Optional[float] = None,
             trunc_ratio: Optional[float] = None, budget: Optional[float] = None):
        given = [v is not None for v in (energy, trunc_ratio, budget)]
        if sum(given) != 1:
            raise ConfigError("exactly one of --energy, --trunc-ratio, --budget is required")
        if energy is not None:
            return plan_by_energy(report, energy)
        if trunc_ratio is not None:
            return plan_by_truncation_ratio(report, trunc_ratio)
        return plan_by_budget(report, budget)

    def compress(self, checkpoint_path: Path, energy: Optional[float] = None, trunc_ratio: Optional[float] = None,
                 budget: Optional[float] = None, diagonal: bool = False) -> Dict[str, Path]:
        """Compress every rotation layer and write the reduced checkpoint and its certificate."""
        model = self._load(checkpoint_path)
        if model.layer_modes() != ['rotation'] * len(model.blocks):
            raise ConfigError("checkpoint is already compressed")
        report = model_hsv_report(model, self.workers)
        plan = self.plan(report, energy, trunc_ratio, budget)
        logger.info(f"Rank plan ({plan.criterion}): {plan.ranks}, mean {plan.mean_rank:.2f}")
        compressed = compress_model(model, plan, diagonal=diagonal, workers=self.workers)
        reduced = [block.ssm.to_reduced() for block in compressed.blocks]
        extras = {'plan': {'criterion': plan.criterion, 'ranks': plan.ranks, 'target': plan.target,
                           'achieved_energy': plan.achieved_energy}}
        ckpt = model_to_checkpoint(compressed, extras=extras)
        return {
            'checkpoint': save_checkpoint(ckpt, self.output_dir / 'compressed.ckpt'),
            'certificate': write_certificate_csv(certificate_rows(reduced), self.output_dir / 'certificate.csv'),
        }

    def evaluate(self, checkpoint_path: Path, compare: Optional[Path] = None,
                 batch_size: int = 256, repeats: int = 10) -> Dict[str, float]:
        """Accuracy and median per-batch latency (and the runtime ratio against `compare`)."""
        model = self._load(checkpoint_path)
        _, eval_set = load_dataset(model.cfg, self.data_dir)
        accuracy = evaluate(model, eval_set, batch_size)
        inputs, _ = eval_set.tensors(np.arange(min(batch_size, len(eval_set))))
        latency = median_time(lambda: predict_logits(model, inputs, batch_size), repeats)
        rows = [{'checkpoint': str(checkpoint_path), 'accuracy': accuracy, 'median_batch_s': latency}]
        result = {'accuracy': accuracy, 'median_batch_s': latency}
        logger.info(f"✓ {checkpoint_path}: accuracy {accuracy:.4f}, {latency * 1e3:.2f} ms/batch")
        if compare is not None:
            reference = self._load(compare)
            timing = bench_inference(reference, model, inputs, repeats)
            ref_accuracy = evaluate(reference, eval_set, batch_size)
            rows.append({'checkpoint': str(compare), 'accuracy': ref_accuracy, 'median_batch_s': timing['full_s']})
            result.update({'reference_accuracy': ref_accuracy, 'runtime_ratio': timing['ratio']})
            logger.info(f"✓ Runtime ratio vs {compare}: {timing['ratio']:.3f}")
        write_csv(rows, self.output_dir / 'evaluation.csv', EVAL_COLUMNS)
        return result

    def sweep(self, checkpoint_path: Path, ratios: Sequence[float] = config.TRUNC_SWEEP,
              diagonal: bool = False) -> List[Dict]:
        """Accuracy after compression at each truncation ratio."""
        model = self._load(checkpoint_path)
        _, eval_set = load_dataset(model.cfg, self.data_dir)
        report = model_hsv_report(model, self.workers)
        rows = []
        for chi in ratios:
            plan = plan_by_truncation_ratio(report, chi)
            compressed = compress_model(model, plan, diagonal=diagonal, workers=self.workers)
            accuracy = evaluate(compressed, eval_set)
            rows.append({'trunc_ratio': chi, 'mean_rank': plan.mean_rank, 'accuracy': accuracy})
            logger.info(f"chi={chi:.2f}: mean rank {plan.mean_rank:.2f}, accuracy {accuracy:.4f}")
        write_csv(rows, self.output_dir / 'sweep.csv', SWEEP_COLUMNS)
        return rows

    def bench_lyap(self, sizes: Sequence[int], solvers: Sequence[str], repeats: int, seed: int) -> Path:
        rows = bench_lyap(sizes, solvers, repeats, seed, self.workers)
        if sum(r['solver'] == 'block' for r in rows) >= 2:
            logger.info(f"✓ Block solver log-log slope: {block_slope(rows):.2f}")
        return write_csv(rows, self.output_dir / 'bench_lyap.csv', LYAP_COLUMNS)

    def bench_scan(self, lengths: Sequence[int], workers: Sequence[int], repeats: int, seed: int) -> Path:
        rows = bench_scan(lengths, workers, repeats=repeats, seed=seed)
        return write_csv(rows, self.output_dir / 'bench_scan.csv', SCAN_COLUMNS)


def _train_config(args) -> TrainConfig:
    overrides = {
        'depth': args.depth, 'n': args.n, 'p': args.p, 'epochs': args.epochs, 'lr': args.lr,
        'batch_size': args.batch_size, 'dropout': args.dropout, 'weight_decay': args.weight_decay,
        'reg': args.reg, 'reg_kind': args.reg_kind, 'norm': args.norm, 'seed': args.seed,
        'workers': args.threads or config.NUM_THREADS, 'dataset': args.dataset, 'train_size': args.train_size,
        'eval_size': args.eval_size, 'seq_len': args.seq_len, 'gramian_solver': args.gramian_solver,
        'b_init': args.b_init,
    }
    if args.config is not None:
        values = _read_config_file(Path(args.config))
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return TrainConfig(**values)
        except TypeError as e:
            raise ConfigError(f"{args.config}: wrong value type ({e})") from e
    return TrainConfig.from_preset(args.preset, **overrides)


def _read_config_file(path: Path) -> Dict:
    """Load a JSON object of TrainConfig fields, rejecting anything else."""
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a JSON object of training settings")
    unknown = sorted(set(values) - {f.name for f in fields(TrainConfig)})
    if unknown:
        raise ConfigError(f"{path}: unknown settings {', '.join(unknown)}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Train, regularize and compress rotation-form SSM sequence models',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python hsvr.py train --preset synthetic-toy --reg 1e-4 --seed 0
  python hsvr.py compress runs/model.ckpt --trunc-ratio 0.5 --diagonalize
  python hsvr.py hsv-report runs/model.ckpt --plot
        """
    )
    parser.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    parser.add_argument('--threads', type=int, default=None,
                        help=f'Worker threads (default: {config.NUM_THREADS})')
    parser.add_argument('--out-dir', type=Path, default=config.OUTPUT_DIR,
                        help=f'Output directory (default: {config.OUTPUT_DIR})')
    parser.add_argument('--data-dir', type=Path, default=config.DATA_DIR,
                        help=f'Directory with MNIST IDX files (default: {config.DATA_DIR})')
    sub = parser.add_subparsers(dest='command', required=True)

    p_train = sub.add_parser('train', help='Train a model')
    p_train.add_argument('--preset', default='synthetic-toy', choices=sorted(config.PRESETS))
    p_train.add_argument('--config', type=Path, help='JSON file with TrainConfig fields')
    p_train.add_argument('--resume', type=Path, metavar='CHECKPOINT',
                         help='Continue from a training checkpoint; --epochs then counts additional epochs')
    p_train.add_argument('--depth', type=int)
    p_train.add_argument('--n', type=int, help='State dimension per layer')
    p_train.add_argument('--p', type=int, help='Model width')
    p_train.add_argument('--epochs', type=int)
    p_train.add_argument('--lr', type=float)
    p_train.add_argument('--batch-size', type=int)
    p_train.add_argument('--dropout', type=float)
    p_train.add_argument('--weight-decay', type=float)
    p_train.add_argument('--reg', type=float, help='Hankel nuclear-norm magnitude (0 disables)')
    p_train.add_argument('--reg-kind', choices=['hankel', 'l1'])
    p_train.add_argument('--gramian-solver', choices=['block', 'naive'])
    p_train.add_argument('--b-init', choices=['joint', 'fan'])
    p_train.add_argument('--norm', choices=['layer', 'batch'])
    p_train.add_argument('--dataset', choices=['synthetic', 'mnist'])
    p_train.add_argument('--train-size', type=int)
    p_train.add_argument('--eval-size', type=int)
    p_train.add_argument('--seq-len', type=int, help='Synthetic sequence length')
    p_train.add_argument('--hsv-every', type=int, default=config.HSV_EVERY,
                         help=f'Epochs between HSV snapshots (default: {config.HSV_EVERY})')
    p_train.add_argument('--no-progress', action='store_true', help='Hide the batch progress bar')

    p_eval = sub.add_parser('evaluate', help='Accuracy and latency of a checkpoint')
    p_eval.add_argument('checkpoint', type=Path)
    p_eval.add_argument('--compare', type=Path, help='Reference checkpoint for the runtime ratio')
    p_eval.add_argument('--batch-size', type=int, default=256)
    p_eval.add_argument('--repeats', type=int, default=10)

    p_comp = sub.add_parser('compress', help='Balanced truncation of every SSM layer')
    p_comp.add_argument('checkpoint', type=Path)
    crit = p_comp.add_mutually_exclusive_group(required=True)
    crit.add_argument('--energy', type=float, help='Retained energy fraction per layer')
    crit.add_argument('--trunc-ratio', type=float, help='Fraction of state removed on average')
    crit.add_argument('--budget', type=float, help='Total reduced state budget across layers')
    p_comp.add_argument('--diagonalize', action='store_true', help='Store reduced layers in diagonal complex form')

    p_hsv = sub.add_parser('hsv-report', help='Hankel singular values of a checkpoint')
    p_hsv.add_argument('checkpoint', type=Path)
    p_hsv.add_argument('--plot', action='store_true', help='Also write a PNG decay chart')

    p_sweep = sub.add_parser('sweep', help='Accuracy over truncation ratios')
    p_sweep.add_argument('checkpoint', type=Path)
    p_sweep.add_argument('--ratios', type=float, nargs='+', default=list(config.TRUNC_SWEEP))
    p_sweep.add_argument('--diagonalize', action='store_true')

    p_lyap = sub.add_parser('bench-lyap', help='Time the gramian solvers')
    p_lyap.add_argument('--sizes', type=int, nargs='+', default=[64, 128, 256, 512])
    p_lyap.add_argument('--solvers', default='block,naive')
    p_lyap.add_argument('--repeats', type=int, default=10)

    p_scan = sub.add_parser('bench-scan', help='Time the scan against the recurrence')
    p_scan.add_argument('--lengths', type=int, nargs='+', default=[256, 1024, 4096])
    p_scan.add_argument('--workers', type=int, nargs='+', default=[1, 4])
    p_scan.add_argument('--repeats', type=int, default=10)
    return parser


def run(args) -> int:
    toolkit = HsvrToolkit(args.out_dir, args.data_dir, args.threads)
    if args.command == 'train':
        if args.resume is not None:
            artifacts = toolkit.resume(args.resume, args.epochs, args.hsv_every, show_progress=not args.no_progress)
        else:
            artifacts = toolkit.train(_train_config(args), args.hsv_every, show_progress=not args.no_progress)
    elif args.command == 'evaluate':
        toolkit.evaluate(args.checkpoint, args.compare, args.batch_size, args.repeats)
        artifacts = {'evaluation': toolkit.output_dir / 'evaluation.csv'}
    elif args.command == 'compress':
        artifacts = toolkit.compress(args.checkpoint, args.energy, args.trunc_ratio, args.budget, args.diagonalize)
    elif args.command == 'hsv-report':
        artifacts = toolkit.hsv_report(args.checkpoint, args.plot)
    elif args.command == 'sweep':
        toolkit.sweep(args.checkpoint, args.ratios, args.diagonalize)
        artifacts = {'sweep': toolkit.output_dir / 'sweep.csv'}
    elif args.command == 'bench-lyap':
        solvers = [s.strip() for s in args.solvers.split(',') if s.strip()]
        artifacts = {'timing': toolkit.bench_lyap(args.sizes, solvers, args.repeats, args.seed)}
    else:
        artifacts = {'timing': toolkit.bench_scan(args.lengths, args.workers, args.repeats, args.seed)}
    for name, path in artifacts.items():
        print(f"  {name}: {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=config.LOG_LEVEL,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        code = run(args)
        print("\n✓ Done")
        return code
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        return exit_code_for(KeyboardInterrupt())
    except (HsvrError, FileNotFoundError) as e:
        print(f"\n✗ Error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
