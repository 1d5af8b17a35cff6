"""
Command-line entry point: python -m runners.cli <subcommand> [options]

Subcommands: train, sample, account, calibrate, eval, oracle-info.
Exit codes: 0 success, 2 validation error, 3 runtime error.
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from diffusion import denoiser as dn
from diffusion import samplers
from diffusion.dm_configs import DM_CONFIGS, create_dm_config
from evaluation import metrics
from oracle import gmm_oracle
from oracle.gmm_oracle import GmmSpec, OracleDenoiser
from privacy import accountant, dp_sgd
from runners.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from runners.run_manager import ConfigValidationError, ExperimentManager, RunManifest, SamplerSection
from utils import rng_util
from utils.config_reader import ConfigReader
from utils.csv_util import write_rows
from utils.log_util import configure_logging
from utils.plot_util import PlotUtil

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

TRAIN_LOG = 'train_log.csv'
RDP_CURVE = 'rdp_curve.csv'
RDP_COLUMNS = ['order', 'rdp', 'epsilon_at_order']
SAMPLE_COLUMNS = ['x', 'y', 'label']
SAMPLES_CSV = 'samples.csv'
METRICS = ('vicinity', 'complexity', 'variance', 'weighting', 'churn-grid')
DEFAULT_COMPLEXITY_SIGMAS = (0.005, 0.02, 0.1, 0.5, 1.0, 2.0, 5.0)

logger = logging.getLogger("Cli")


def _float_list(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _int_list(text):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _output_path(args, default_name):
    if getattr(args, 'out', None):
        return args.out
    return os.path.join(ConfigReader().output_root(), default_name)


# ---------------------------------------------------------------- train

def cmd_train(args):
    """Accountant pre-check, DP-SGD, checkpoint, training CSV and manifest."""
    manager = ExperimentManager(args.output_root)
    try:
        config = manager.load_experiment(args.config)
    except FileNotFoundError as e:
        raise ConfigValidationError('<file>', str(e))
    plan = manager.resolve_privacy(config)
    report = plan.epsilon_report()
    if report == 'non-private':
        print(f"privacy: non-private (T={plan.spec.total_steps_T})")
    else:
        print(f"privacy: eps={report['epsilon']:.6g} delta={report['delta']:g} "
              f"sigma_dp={report['sigma_dp']:.6g} q={report['q']:.6g} T={report['steps']}")

    run_dir = manager.create_run(config, args.output_dir)
    manifest = RunManifest(config.to_dict(), report, config.run.seed, plan.spec.total_steps_T)
    if plan.result is not None:
        manifest.metrics['rdp_curve'] = write_rows(manager.run_path(RDP_CURVE), RDP_COLUMNS, plan.result.rows())
    if args.account_only:
        manager.write_manifest(manifest)
        manager.close_run()
        return EXIT_OK

    data = gmm_oracle.sample_data(config.data.mixture, config.data.n,
                                  rng_util.stream(config.data.seed, rng_util.DATA))
    cfg = config.model.dm_config()
    params, ema, log = dp_sgd.train(
        data, cfg, plan.spec, config.optimizer, K=config.run.K, rng=config.run.seed,
        architecture=config.model.architecture, label_dropout=config.run.label_dropout,
        log_path=manager.run_path(TRAIN_LOG), log_every=config.run.log_every, progress=args.progress)
    if not (log.steps == log.sanitize_calls == plan.spec.total_steps_T):
        raise RuntimeError(f"executed {log.steps} steps ({log.sanitize_calls} releases), "
                           f"accounted {plan.spec.total_steps_T}")
    if plan.result is not None:
        post = accountant.account(plan.spec.sigma_dp, plan.spec.subsample_q, log.sanitize_calls,
                                  plan.spec.delta, manager.orders(), plan.result.refined)
        if post.budget != plan.result.budget:
            raise RuntimeError(f"post-run eps {post.budget.epsilon} differs from pre-check {plan.result.budget.epsilon}")
        logger.info(f"Post-run accounting agrees: eps={post.budget.epsilon:.6g}")

    manifest.checkpoint = save_checkpoint(manager.run_path(ConfigReader().get('checkpoint', 'filename',
                                                                              default='checkpoint.bin')),
                                          params, ema, cfg, log.steps, config.data.mixture)
    manifest.metrics['train_log'] = manager.run_path(TRAIN_LOG)
    if args.sample:
        source = _checkpoint_source(load_checkpoint(manifest.checkpoint), raw_weights=False)
        settings = resolve_sampler_settings(None, config.sampler)
        manifest.metrics['samples'], _ = _write_samples(source, settings, config.run.seed,
                                                        manager.run_path(SAMPLES_CSV))
    path = manager.write_manifest(manifest)
    manager.close_run()
    print(f"run: {run_dir}\nmanifest: {path}")
    return EXIT_OK


# ---------------------------------------------------------------- sources

class _Source:
    """A denoiser to sample from, with its mixture and (for checkpoints) the trained weights."""

    def __init__(self, denoiser, spec, checkpoint=None, params=None, cfg=None):
        self.denoiser = denoiser
        self.spec = spec
        self.checkpoint = checkpoint
        self.params = params
        self.cfg = cfg

    def conditional(self, label):
        if self.checkpoint is None:
            mu = self.spec.means[label]
            return OracleDenoiser(GmmSpec.single(mu, self.spec.component_std))
        return self.denoiser.with_label(label)


def _checkpoint_source(checkpoint, raw_weights):
    theta = checkpoint.params.theta if raw_weights else checkpoint.ema.theta_ema
    params = dn.DenoiserParams(checkpoint.params.architecture, theta)
    if checkpoint.mixture is None:
        logger.warning("Checkpoint carries no mixture; labelling against the default nine-mode grid")
    spec = checkpoint.mixture or GmmSpec.default()
    return _Source(dn.NetworkDenoiser(params, checkpoint.cfg), spec, checkpoint, params, checkpoint.cfg)


def _load_source(args, config=None):
    if args.oracle:
        spec = config.data.mixture if config is not None else GmmSpec.default()
        return _Source(OracleDenoiser(spec), spec)
    return _checkpoint_source(load_checkpoint(args.checkpoint), args.raw_weights)


def _load_config(args):
    if not getattr(args, 'config', None):
        return None
    try:
        return ExperimentManager(args.output_root).load_experiment(args.config)
    except FileNotFoundError as e:
        raise ConfigValidationError('<file>', str(e))


@dataclass(frozen=True)
class SamplerSettings:
    kind: str
    n: int
    schedule: samplers.ScheduleSpec
    churn: samplers.ChurnSpec
    label: Optional[int] = None
    guidance_w: Optional[float] = None


def _pick(flag, fallback):
    return fallback if flag is None else flag


def resolve_sampler_settings(args, section=None, default_kind='ddim-det'):
    """
    Resolve sampler settings: command-line flags, then the experiment's sampler
    section, then the per-sampler defaults (M=50 for ddim-det, 1000 otherwise).
    """
    flags = vars(args) if args is not None else {}

    def flag(name):
        return flags.get(name)

    kind = _pick(flag('sampler'), section.kind if section is not None else default_kind)
    if section is None:
        section = SamplerSection(kind, schedule=samplers.default_schedule(kind))
    s, c, g = section.schedule, section.churn, section.guidance
    schedule = samplers.ScheduleSpec(_pick(flag('steps'), s.steps_M), _pick(flag('sigma_min'), s.sigma_min),
                                     _pick(flag('sigma_max'), s.sigma_max), _pick(flag('rho'), s.rho))
    churn = samplers.ChurnSpec(_pick(flag('s_churn'), c.s_churn), _pick(flag('s_min'), c.s_min),
                               _pick(flag('s_max'), c.s_max), _pick(flag('s_noise'), c.s_noise))
    return SamplerSettings(kind, _pick(flag('n'), section.n), schedule, churn,
                           _pick(flag('label'), g.label if g is not None else None),
                           _pick(flag('guidance_w'), g.scale_w if g is not None else None))


def _denoiser(source, settings):
    label = settings.label
    if label is None:
        return source.denoiser
    if not 0 <= label < source.spec.num_components:
        raise ValueError(f"label must lie in [0, {source.spec.num_components})")
    if settings.guidance_w is None:
        return source.conditional(label)
    return samplers.guided_denoiser(source.conditional(label), source.denoiser,
                                    samplers.GuidanceSpec(settings.guidance_w, label))


def _nearest_mode(spec, points):
    d2 = ((points[:, None, :] - spec.mean_array()[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def _draw(source, settings, seed):
    D = _denoiser(source, settings)
    return samplers.run_sampler(settings.kind, D, settings.schedule, settings.n, seed, settings.churn)


def _write_samples(source, settings, seed, path):
    """Draw settings.n samples and write x, y, label rows; returns (path, points)."""
    points = _draw(source, settings, seed)
    if settings.label is None:
        labels = _nearest_mode(source.spec, points)
    else:
        labels = np.full(len(points), settings.label)
    logger.info(f"{len(points)} samples from {settings.kind} (M={settings.schedule.steps_M}) -> {path}")
    rows = [(p[0], p[1], int(k)) for p, k in zip(points, labels)]
    return write_rows(path, SAMPLE_COLUMNS, rows), points


# ---------------------------------------------------------------- sample

def cmd_sample(args):
    config = _load_config(args)
    source = _load_source(args, config)
    settings = resolve_sampler_settings(args, config.sampler if config is not None else None)
    path, points = _write_samples(source, settings, args.seed, _output_path(args, SAMPLES_CSV))
    print(f"samples: {path}")
    if args.svg:
        PlotUtil.save_scatter(points, args.svg, source.spec.mean_array(), title=settings.kind)
    return EXIT_OK


# ---------------------------------------------------------------- accounting

def _steps(args):
    if args.steps is not None:
        return args.steps
    if args.epochs == 0:
        return 0
    return accountant.steps_for(args.n, args.q * args.n, args.epochs, args.step_convention)


def _print_account(result, csv_path=None):
    b = result.budget
    print(f"sigma={result.sigma:.6g} q={result.q:.6g} T={result.steps} delta={b.delta:g} "
          f"epsilon={b.epsilon:.6g} order={b.order}")
    if csv_path:
        write_rows(csv_path, RDP_COLUMNS, result.rows())
        print(f"curve: {csv_path}")


def cmd_account(args):
    T = _steps(args)
    result = accountant.account(args.sigma, args.q, T, args.delta, ExperimentManager().orders(),
                                args.conversion == 'refined')
    _print_account(result, args.csv)
    return EXIT_OK


def cmd_calibrate(args):
    T = _steps(args)
    manager = ExperimentManager()
    refined = args.conversion == 'refined'
    settings = ConfigReader()
    sigma = accountant.calibrate_sigma(
        accountant.DpBudget(args.target_eps, args.delta), args.q, T,
        float(settings.get('accountant', 'calibration_rtol', default=1e-4)),
        tuple(settings.get('accountant', 'calibration_bracket', default=accountant.DEFAULT_BRACKET)),
        manager.orders(), refined)
    print(f"sigma_dp={sigma:.6g}")
    _print_account(accountant.account(sigma, args.q, T, args.delta, manager.orders(), refined), args.csv)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _eval_vicinity(source, args, settings, out_dir):
    if args.data:
        samples = gmm_oracle.sample_data(source.spec, settings.n, rng_util.stream(args.seed, rng_util.DATA))
    else:
        samples = _draw(source, settings, args.seed)
    table = metrics.vicinity_table(source.spec, samples)
    for h, frac in table:
        print(f"h={h}: {100 * frac:.1f}%")
    return write_rows(os.path.join(out_dir, 'vicinity.csv'), ['h', 'coverage'], table)


def _eval_complexity(source, args, settings, out_dir):
    sigmas = args.sigmas or list(DEFAULT_COMPLEXITY_SIGMAS)
    report = metrics.complexity_report(source.denoiser, sigmas, args.n_mc, args.seed, source.spec,
                                       settings.schedule, args.n_mc_endtoend)
    return report.to_csv(os.path.join(out_dir, 'complexity.csv'))


def _network_for_variance(source, args):
    if source.params is not None:
        return source.params, source.cfg
    # no trained weights: a freshly initialised network with the default architecture
    arch = dn.ArchitectureSpec(num_classes=source.spec.num_components)
    return dn.init_params(arch, args.seed, zero_head=False), create_dm_config('edm')


def _eval_variance(source, args, settings, out_dir):
    params, cfg = _network_for_variance(source, args)
    point = gmm_oracle.sample_data(source.spec, 1, rng_util.stream(args.seed, rng_util.DATA))[0]
    ks = args.K or [1, 2, 4, 8, 16, 32]
    slope, variances = metrics.loss_variance_slope(params, cfg, point, ks, args.reseeds, args.seed)
    print(f"log Var vs log K slope: {slope:.4f}")
    path = write_rows(os.path.join(out_dir, 'variance.csv'), ['K', 'loss_variance'], zip(ks, variances))
    if args.gradients:
        report = metrics.gradient_variance_experiment(params, cfg, point, ks, args.grad_reseeds, args.seed)
        report.to_csv(os.path.join(out_dir, 'gradient_variance.csv'))
        report.histogram_csv(os.path.join(out_dir, 'gradient_variance_histogram.csv'))
    if args.svg:
        PlotUtil.save_variance_plot(ks, variances, args.svg)
    return path


def _eval_weighting(source, args, settings, out_dir):
    sigmas = args.sigmas or list(np.geomspace(0.002, 80.0, 25))
    configs = [create_dm_config(kind) for kind in DM_CONFIGS]
    return write_rows(os.path.join(out_dir, 'weighting.csv'),
                      ['kind', 'sigma', 'density', 'loss_weight', 'relative_weight'],
                      metrics.weighting_table(configs, sigmas))


def _eval_churn_grid(source, args, settings, out_dir):
    guidance = args.guidance_grid or [None]
    label = settings.label
    D = source.conditional(label) if label is not None else source.denoiser
    rows = metrics.churn_grid(D, source.spec, settings.schedule, args.s_churn_grid, settings.n, args.seed,
                              settings.churn, guidance_scales=guidance, d_uncond=source.denoiser, label=label)
    for w, s, cov in rows:
        print(f"w={w:g} s_churn={s:g}: h=3 coverage {100 * cov:.1f}%")
    return write_rows(os.path.join(out_dir, 'churn_grid.csv'), ['guidance_w', 's_churn', 'coverage_h3'], rows)


_EVALUATORS = {
    'vicinity': _eval_vicinity,
    'complexity': _eval_complexity,
    'variance': _eval_variance,
    'weighting': _eval_weighting,
    'churn-grid': _eval_churn_grid,
}


def cmd_eval(args):
    if args.metric == 'churn-grid' and args.guidance_grid and args.label is None:
        raise ValueError("--guidance-grid needs --label")
    source = _load_source(args)
    if args.label is not None and not 0 <= args.label < source.spec.num_components:
        raise ValueError(f"label must lie in [0, {source.spec.num_components})")
    default_kind = 'churn' if args.metric == 'churn-grid' else 'ddim-det'
    settings = resolve_sampler_settings(args, default_kind=default_kind)
    out_dir = args.out or os.path.join(ConfigReader().output_root(), 'eval')
    os.makedirs(out_dir, exist_ok=True)
    path = _EVALUATORS[args.metric](source, args, settings, out_dir)
    print(f"{args.metric}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------- oracle-info

def cmd_oracle_info(args):
    spec = GmmSpec.default()
    print(f"components: {spec.num_components}  component_std: {spec.component_std:g}")
    for k, (mu, w) in enumerate(zip(spec.means, spec.weights)):
        print(f"  mode {k}: mean=({mu[0]:+.6f}, {mu[1]:+.6f}) weight={w:.6g}")
    print(f"min mode separation: {spec.min_separation():.3f} std")
    for h in range(1, 7):
        print(f"  h={h}: expected coverage {100 * gmm_oracle.expected_vicinity(h):.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_source(p):
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--checkpoint', help='checkpoint written by train')
    group.add_argument('--oracle', action='store_true', help='use the analytic mixture denoiser')
    p.add_argument('--raw-weights', action='store_true', help='use theta instead of the EMA weights')


def _add_sampler(p):
    # unset flags fall back to the experiment's sampler section, then to the per-sampler defaults
    p.add_argument('--sampler', choices=samplers.SAMPLERS, default=None, help='default ddim-det')
    p.add_argument('--steps', type=int, default=None, help='schedule length M (50 for ddim-det, 1000 otherwise)')
    p.add_argument('--sigma-min', type=float, default=None, help='default 0.002')
    p.add_argument('--sigma-max', type=float, default=None, help='default 80')
    p.add_argument('--rho', type=float, default=None, help='default 7')
    p.add_argument('--s-churn', type=float, default=None, help='default 0')
    p.add_argument('--s-min', type=float, default=None, help='default 0')
    p.add_argument('--s-max', type=float, default=None, help='default inf')
    p.add_argument('--s-noise', type=float, default=None, help='default 1')
    p.add_argument('--guidance-w', type=float, default=None)
    p.add_argument('--label', type=int, default=None)
    p.add_argument('--n', type=int, default=None, help='default 10000')
    p.add_argument('--seed', type=int, default=0)


def _add_accounting(p):
    p.add_argument('--q', type=float, required=True, help='sampling rate')
    p.add_argument('--n', type=int, default=60000, help='dataset size, for --epochs')
    steps = p.add_mutually_exclusive_group(required=True)
    steps.add_argument('--epochs', type=float)
    steps.add_argument('--steps', type=int)
    p.add_argument('--delta', type=float, default=1e-5)
    p.add_argument('--conversion', choices=('refined', 'classic'), default='refined')
    p.add_argument('--step-convention', choices=('round', 'ceil'), default='round')
    p.add_argument('--csv', help='write the composed RDP curve here')


def build_parser():
    parser = argparse.ArgumentParser(prog='python -m runners.cli', description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--log-level', default=None)
    parser.add_argument('--output-root', default=None, help='overrides outputs.root and $DPDM_OUTPUT_ROOT')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train a denoiser with DP-SGD')
    p.add_argument('config')
    p.add_argument('--output-dir', default=None)
    p.add_argument('--account-only', action='store_true', help='pre-check and manifest only')
    p.add_argument('--progress', action='store_true')
    p.add_argument('--sample', action='store_true', help="draw samples.csv with the config's sampler section")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('sample', help='draw samples from a checkpoint or the oracle')
    _add_source(p)
    _add_sampler(p)
    p.add_argument('--config', default=None, help="experiment config whose sampler section (and, with --oracle, "
                                                   "mixture) supplies the defaults")
    p.add_argument('--out', default=None)
    p.add_argument('--svg', default=None)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser('account', help='epsilon for sigma, q, T, delta')
    p.add_argument('--sigma', type=float, required=True)
    _add_accounting(p)
    p.set_defaults(handler=cmd_account)

    p = sub.add_parser('calibrate', help='smallest sigma meeting (eps, delta)')
    p.add_argument('--target-eps', type=float, required=True)
    _add_accounting(p)
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser('eval', help='evaluation metrics')
    _add_source(p)
    _add_sampler(p)
    p.add_argument('--metric', choices=METRICS, required=True)
    p.add_argument('--data', action='store_true', help='vicinity of exact data draws')
    p.add_argument('--sigmas', type=_float_list, default=None)
    p.add_argument('--K', type=_int_list, default=None)
    p.add_argument('--n-mc', type=int, default=4096)
    p.add_argument('--n-mc-endtoend', type=int, default=None)
    p.add_argument('--reseeds', type=int, default=10000)
    p.add_argument('--gradients', action='store_true', help='also measure per-parameter gradient variance')
    p.add_argument('--grad-reseeds', type=int, default=200)
    p.add_argument('--s-churn-grid', type=_float_list, default=[0.0, 10.0, 20.0, 50.0, 80.0])
    p.add_argument('--guidance-grid', type=_float_list, default=None)
    p.add_argument('--out', default=None, help='output directory')
    p.add_argument('--svg', default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('oracle-info', help='describe the nine-mode mixture')
    p.set_defaults(handler=cmd_oracle_info)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.output_root:
        os.environ['DPDM_OUTPUT_ROOT'] = args.output_root
    configure_logging(level=args.log_level)
    try:
        return args.handler(args)
    except (ConfigValidationError, accountant.InfeasibleBudgetError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(e, ConfigValidationError) else EXIT_RUNTIME
    except (CheckpointFormatError, FileNotFoundError, accountant.CalibrationError,
            dp_sgd.TrainingDivergedError, RuntimeError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == '__main__':
    sys.exit(main())
