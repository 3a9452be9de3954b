"""
src/cli/commands.py - Subcommands

    cmd_train     train student/teacher, write metrics.csv + checkpoints + summary
    cmd_eval      feature bank from in-dist train, score in-dist test + OOD sets,
                  write AUROC table, per-dataset score CSVs, score histograms
    cmd_diagnose  occupied soft-classes + k-NN accuracy per checkpoint, scatter
                  CSV and Spearman correlations against mean AUROC
    cmd_hist      per-channel colour histograms of two datasets + L1 distance

All commands read the same validated ExperimentConfig and write into the
fixed layout owned by ArtifactManager.

Debug relevance: When artifacts are missing or a run writes the wrong files
"""

import os
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import spearmanr

from src import tensor_core as tc
from src.artifact_manager import ArtifactManager
from src.checkpoint import load_checkpoint
from src.config import compute_config_hash
from src.data import ImageDataset, channel_l1, color_histogram, load_dataset
from src.event_stream import EventStream
from src.exceptions import ConfigError, NumericalError
from src.experiment_config import ExperimentConfig
from src.model import StudentTeacher
from src.notify import notify
from src.ood_eval import (ScoreReport, build_bank, extract_features, knn_accuracy,
                          occupied_classes, ood_scores, score_histograms, soft_class_probs)
from src.train import Trainer

from .utils import ResourceMonitor, _debug_log, _log

MODEL_STREAM = 7


# =============================================================================
# SHARED
# =============================================================================

class RunContext:
    """Validated config + output layout for one command invocation."""

    def __init__(self, raw: dict):
        self.cfg = ExperimentConfig.from_dict(raw)
        tc.set_default_dtype(self.cfg.runtime.dtype)
        self.echo = self.cfg.to_dict()
        self.config_hash = compute_config_hash(self.echo)
        self.am = ArtifactManager(self.cfg.output)
        self.image_size = self.cfg.augment.global_size
        self._datasets: Dict[int, ImageDataset] = {}
        os.environ['OODSD_RUN_DIR'] = str(self.am.out_dir)

    def dataset_specs(self) -> Dict:
        data = self.cfg.data
        specs = {data.in_dist.name: data.in_dist, data.in_test.name: data.in_test}
        if data.auxiliary is not None:
            specs[data.auxiliary.name] = data.auxiliary
        for spec in data.ood_tests:
            specs[spec.name] = spec
        # role names always resolve, whatever the dataset is called
        specs.setdefault('in_dist', data.in_dist)
        specs.setdefault('in_test', data.in_test)
        if data.auxiliary is not None:
            specs.setdefault('auxiliary', data.auxiliary)
        return specs

    def dataset(self, name: str) -> ImageDataset:
        specs = self.dataset_specs()
        if name not in specs:
            raise ConfigError('dataset', f"no dataset named '{name}', configured: {sorted(specs)}")
        return self.load(specs[name])

    def load(self, spec) -> ImageDataset:
        if id(spec) not in self._datasets:
            ds = load_dataset(spec, self.image_size)
            _log(f"📂 {spec.name}: {len(ds)} images ({ds.source}, {ds.image_size}px)")
            self._datasets[id(spec)] = ds
        return self._datasets[id(spec)]

    def new_model(self) -> StudentTeacher:
        rng = np.random.default_rng([self.cfg.seed, MODEL_STREAM])
        return StudentTeacher.from_config(self.cfg.model, rng)

    def load_model(self, path) -> StudentTeacher:
        state, meta = load_checkpoint(path)
        if meta.get('config_hash') and meta['config_hash'] != self.config_hash:
            notify(f"Checkpoint {path} was written by a different config ({meta['config_hash'][:8]})", 'warning')
        st = self.new_model()
        st.load_state_dict(state)
        return st

    def default_checkpoint(self) -> Path:
        return self.am.checkpoints_dir / 'latest.npz'


def dispatch(args, raw: dict, stop_event) -> int:
    ctx = RunContext(raw)
    try:
        if args.command == 'train':
            return cmd_train(ctx, resume=args.resume, stop_event=stop_event, svg=args.svg)
        if args.command == 'eval':
            return cmd_eval(ctx, args.checkpoint, svg=args.svg)
        if args.command == 'diagnose':
            return cmd_diagnose(ctx, args.checkpoint, svg=args.svg)
        return cmd_hist(ctx, args.dataset_a, args.dataset_b, args.bins)
    except NumericalError as e:
        ctx.am.prepare()
        path = ctx.am.dump_failure({'message': str(e), 'command': args.command, **e.context})
        _log(f"❌ Numerical failure dump: {path}")
        _debug_log('CLI', 'FAIL', f"{e} context={e.context}")
        raise


# =============================================================================
# TRAIN
# =============================================================================

TAG_MAP = {
    'init': lambda d: (f"   [INIT]  {d['experiment']} seed={d['seed']} epochs={d['epochs']} "
                       f"steps/epoch={d['steps_per_epoch']} negatives={d['negatives']}"),
    'step': lambda d: (f"   [STEP]  {d['step']:>6}  ep {d['epoch']:<3} loss {d['loss_total']:.4f} "
                       f"(pos {d['loss_pos']:.4f} neg {d['loss_neg']:.4f}) lr {d['lr']:.2e} tau_t {d['tau_t']:.4f}"),
    'epoch_complete': lambda d: (f"   [EPOCH] {d['epoch']} done, {d['steps']} steps, "
                                 f"mean loss {d['mean_loss_total']:.4f} ({d['seconds']}s)"),
    'checkpoint': lambda d: f"   [CKPT]  {d['path']} (epoch {d['epoch']}, step {d['step']})",
    'run_complete': lambda d: f"   [DONE]  {d['status']} after {d['steps']} steps",
    'error': lambda d: f"   [FAIL]  {d['type']}: {d['message']}",
}


def cmd_train(ctx: RunContext, resume: bool = False, stop_event=None, svg: bool = False) -> int:
    cfg, am = ctx.cfg, ctx.am
    am.prepare(ctx.config_hash)
    am.write_echo(ctx.echo)
    print(f"\n--- Train: {cfg.name} ---")
    _log(f"📂 Output: {am.out_dir}")

    in_dist = ctx.load(cfg.data.in_dist)
    auxiliary = ctx.load(cfg.data.auxiliary).images if cfg.data.auxiliary is not None else None

    trainer = Trainer(
        ctx.new_model(), in_dist.images, cfg.seed,
        views=cfg.augment.multicrop(), loss=cfg.loss, optim=cfg.optim, train=cfg.train,
        source=cfg.negatives.negative_source(), shift=cfg.negatives.shifts(),
        neg_n_local=cfg.negatives.n_local, auxiliary=auxiliary, workers=cfg.runtime.workers,
        checkpoint_dir=am.checkpoints_dir, config_hash=ctx.config_hash, stop_event=stop_event,
    )

    start = (0, 0)
    latest = ctx.default_checkpoint()
    if resume and latest.exists():
        start = trainer.load(latest)
        am.reset_metrics(keep_before_step=trainer.global_step)
        _log(f"✅ Resuming from {latest} at epoch {start[0]}, iteration {start[1]}")
    else:
        if resume:
            notify(f"No checkpoint at {latest}, starting fresh", 'warning')
        am.reset_metrics()

    run_meta = {
        'experiment': cfg.name,
        'seed': cfg.seed,
        'epochs': cfg.train.epochs,
        'steps_per_epoch': trainer.steps_per_epoch,
        'negatives': trainer.use_negatives,
        'config_hash': ctx.config_hash,
    }
    log_every = cfg.train.log_every

    def cli_consumer(event):
        t, d = event['type'], event['data']
        if t == 'step':
            am.append_metrics(d)
            if d['step'] % log_every == 0:
                print(TAG_MAP[t](d), flush=True)
            return
        print(TAG_MAP[t](d), flush=True)
        _debug_log('TRAIN', t.upper(), str(d))

    stream = EventStream(trainer, run_meta, lock_dir=am.tmp_dir)
    stream.on_event = cli_consumer
    monitor = ResourceMonitor()
    status = stream.run(*start)

    history = trainer.history
    summary = {
        'status': status,
        'experiment': cfg.name,
        'seed': cfg.seed,
        'config_hash': ctx.config_hash,
        'steps': trainer.global_step,
        'epochs': cfg.train.epochs,
        'final': history[-1] if history else None,
    }
    am.write_json('summary.json', summary, section='train')
    # timings and memory differ between identical runs: tmp/ only
    resources = monitor.summary()
    am.write_json('resources.json', resources, directory=am.tmp_dir)
    if svg and history:
        from src.plots import plot_metrics
        plot_metrics(history, am.reports_dir / 'metrics.svg')

    print(f"\n--- Train Results ---")
    print(f"   Status:  {status}")
    print(f"   Steps:   {trainer.global_step}")
    print(f"   Metrics: {am.metrics_path}")
    print(f"   CPU:     {resources['cpu_seconds']}s, RSS {resources['rss_mb']} MB")
    return 0 if status == 'complete' else 1


# =============================================================================
# EVAL
# =============================================================================

def _score_report(ctx: RunContext, st: StudentTeacher, bank) -> ScoreReport:
    cfg = ctx.cfg
    scores = {}
    for spec in [cfg.data.in_test] + list(cfg.data.ood_tests):
        feats = extract_features(st.teacher, ctx.load(spec).images, ctx.image_size, cfg.eval.batch_size)
        scores[spec.name] = ood_scores(feats, bank, cfg.eval.score_tau)
    return ScoreReport(cfg.data.in_test.name, scores, cfg.eval.score_tau)


def cmd_eval(ctx: RunContext, checkpoint: Optional[str] = None, svg: bool = False) -> int:
    cfg, am = ctx.cfg, ctx.am
    am.prepare()
    path = Path(checkpoint) if checkpoint else ctx.default_checkpoint()
    print(f"\n--- Eval: {cfg.name} ---")
    _log(f"📂 Checkpoint: {path}")
    st = ctx.load_model(path)

    in_dist = ctx.load(cfg.data.in_dist)
    bank = build_bank(st.teacher, in_dist.images, ctx.image_size, subsample=cfg.eval.bank_subsample,
                      seed=cfg.seed, batch_size=cfg.eval.batch_size)
    report = _score_report(ctx, st, bank)

    for name, values in report.scores.items():
        am.write_csv(f"scores_{name}.csv", ['sample_id', 'dataset', 'score'],
                     ((i, name, float(v)) for i, v in enumerate(values)))
    rows = report.auroc_table()
    am.write_csv('auroc.csv', ['dataset', 'n', 'auroc'], ((r['dataset'], r['n'], r['auroc']) for r in rows))

    edges, hists = score_histograms(report.scores, cfg.eval.hist_bins)
    names = list(hists)
    am.write_csv('hist_scores.csv', ['bin_lo', 'bin_hi'] + names,
                 ([float(edges[i]), float(edges[i + 1])] + [int(hists[n][i]) for n in names]
                  for i in range(len(edges) - 1)))
    if svg:
        from src.plots import plot_score_histograms
        plot_score_histograms(edges, hists, am.reports_dir / 'hist_scores.svg')

    in_vs_in = report.self_auroc(cfg.seed) if len(report.scores[report.in_dist]) >= 2 else None
    summary = {
        'checkpoint': str(path),
        'bank_size': len(bank),
        'score_tau': cfg.eval.score_tau,
        'score_convention': 'higher score = more anomalous',
        'in_dist': report.in_dist,
        'counts': {name: int(len(v)) for name, v in report.scores.items()},
        'auroc': {r['dataset']: r['auroc'] for r in rows},
        'mean_auroc': report.mean_auroc(),
        'in_vs_in_auroc': in_vs_in,
    }
    am.write_json('summary.json', summary, section='eval')

    print(f"\n--- AUROC ({report.in_dist} vs OOD, bank {len(bank)}) ---")
    for r in rows:
        print(f"   {r['dataset']:<20} {r['auroc'] * 100:6.2f}  (n={r['n']})")
    if summary['mean_auroc'] is not None:
        print(f"   {'mean':<20} {summary['mean_auroc'] * 100:6.2f}")
    if in_vs_in is not None:
        print(f"   {'in vs in':<20} {in_vs_in * 100:6.2f}")
    return 0


# =============================================================================
# DIAGNOSE
# =============================================================================

def _spearman(xs: List, ys: List) -> Optional[float]:
    pairs = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
    if len(pairs) < 3:
        return None
    rho = spearmanr([p[0] for p in pairs], [p[1] for p in pairs]).statistic
    return None if rho is None or np.isnan(rho) else float(rho)


def cmd_diagnose(ctx: RunContext, checkpoints: Optional[List[str]] = None, svg: bool = False) -> int:
    cfg, am = ctx.cfg, ctx.am
    am.prepare()
    paths = [Path(p) for p in checkpoints] if checkpoints else [ctx.default_checkpoint()]
    print(f"\n--- Diagnose: {cfg.name} ({len(paths)} checkpoint(s)) ---")

    in_dist = ctx.load(cfg.data.in_dist)
    in_test = ctx.load(cfg.data.in_test)
    labelled = in_dist.labels is not None and in_test.labels is not None

    scatter, occupied_rows = [], []
    for path in paths:
        st = ctx.load_model(path)
        probs = soft_class_probs(st, in_test.images, ctx.image_size, cfg.loss.tau_t_end, cfg.eval.batch_size)
        occ = occupied_classes(probs)

        bank = build_bank(st.teacher, in_dist.images, ctx.image_size,
                          labels=in_dist.labels if labelled else None,
                          subsample=cfg.eval.bank_subsample, seed=cfg.seed, batch_size=cfg.eval.batch_size)
        knn = None
        if labelled and cfg.eval.knn_k <= len(bank):
            test_feats = extract_features(st.teacher, in_test.images, ctx.image_size, cfg.eval.batch_size)
            knn = knn_accuracy(bank, test_feats, in_test.labels, cfg.eval.knn_k)
        mean_auroc = _score_report(ctx, st, bank).mean_auroc() if cfg.data.ood_tests else None

        scatter.append({'checkpoint': str(path), 'occupied': occ.count, 'knn_acc': knn, 'mean_auroc': mean_auroc})
        occupied_rows.extend((str(path), i, float(m), int(flag)) for i, (m, flag) in enumerate(zip(occ.means, occ.mask)))
        knn_text = f"{knn * 100:.2f}" if knn is not None else "n/a"
        auroc_text = f"{mean_auroc * 100:.2f}" if mean_auroc is not None else "n/a"
        print(f"   {path.name:<24} occupied {occ.count:>4}/{len(occ.means)}  "
              f"{cfg.eval.knn_k}-NN {knn_text}  mean AUROC {auroc_text}")

    am.write_csv('occupied.csv', ['checkpoint', 'class', 'mean_prob', 'occupied'], occupied_rows)
    am.write_csv('scatter.csv', ['checkpoint', 'occupied', 'knn_acc', 'mean_auroc'],
                 ((r['checkpoint'], r['occupied'], r['knn_acc'], r['mean_auroc']) for r in scatter))
    if svg:
        from src.plots import plot_scatter
        plot_scatter(scatter, am.reports_dir / 'scatter.svg')

    auroc_values = [r['mean_auroc'] for r in scatter]
    summary = {
        'checkpoints': scatter,
        'k': cfg.eval.knn_k,
        'spearman_knn_auroc': _spearman([r['knn_acc'] for r in scatter], auroc_values),
        'spearman_occupied_auroc': _spearman([r['occupied'] for r in scatter], auroc_values),
    }
    am.write_json('summary.json', summary, section='diagnose')
    return 0


# =============================================================================
# HIST
# =============================================================================

def cmd_hist(ctx: RunContext, name_a: str, name_b: Optional[str] = None, bins: int = 32) -> int:
    cfg, am = ctx.cfg, ctx.am
    am.prepare()
    if name_b is None:
        if cfg.data.auxiliary is not None:
            name_b = cfg.data.auxiliary.name
        elif cfg.data.ood_tests:
            name_b = cfg.data.ood_tests[0].name
        else:
            raise ConfigError('--b', "no auxiliary or OOD dataset configured to compare against")

    hist_a = color_histogram(ctx.dataset(name_a), bins)
    hist_b = color_histogram(ctx.dataset(name_b), bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    channels = ('r', 'g', 'b')

    rows = []
    for name, hist in ((name_a, hist_a), (name_b, hist_b)):
        for c, channel in enumerate(channels):
            for i in range(bins):
                rows.append((name, channel, i, float(edges[i]), float(edges[i + 1]), float(hist[c, i])))
    am.write_csv('hist_colors.csv', ['dataset', 'channel', 'bin', 'bin_lo', 'bin_hi', 'fraction'], rows)

    per_channel = channel_l1(hist_a, hist_b)
    summary = {
        'a': name_a,
        'b': name_b,
        'bins': bins,
        'per_channel_l1': {ch: float(v) for ch, v in zip(channels, per_channel)},
        'distance': float(per_channel.mean()),
    }
    am.write_json('summary.json', summary, section='hist')
    print(f"\n--- Colour histograms: {name_a} vs {name_b} ({bins} bins) ---")
    print(f"   L1 distance (mean over channels): {summary['distance']:.4f}")
    return 0
