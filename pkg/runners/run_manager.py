"""
ExperimentManager: loads and validates experiment configs and manages the
lifecycle of a run directory (create, resolve privacy, write manifest).
"""
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import yaml

from diffusion import denoiser as dn
from diffusion import samplers
from diffusion.dm_configs import DM_CONFIGS, create_dm_config
from oracle.gmm_oracle import GmmSpec
from privacy import accountant
from privacy.dp_sgd import OptimizerSpec, PrivacySpec
from utils.config_reader import ConfigReader

__version__ = "1.0.0"

MANIFEST_FILENAME = 'manifest.yml'
SECTIONS = ('data', 'model', 'privacy', 'optimizer', 'sampler', 'run')
CONVERSIONS = ('refined', 'classic')


class ConfigValidationError(ValueError):
    """Invalid or unknown experiment-config key; the message starts with the dotted key path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class DataSection:
    mixture: GmmSpec
    n: int
    seed: int


@dataclass(frozen=True)
class ModelSection:
    kind: str
    parameters: Dict[str, float]
    architecture: dn.ArchitectureSpec

    def dm_config(self):
        return create_dm_config(self.kind, **self.parameters)


@dataclass(frozen=True)
class PrivacySection:
    """None-valued sigma_dp means calibrate from target_epsilon before training."""
    clip: float = 1.0
    sigma_dp: Optional[float] = None
    target_epsilon: Optional[float] = None
    delta: float = 1e-5
    conversion: str = 'refined'
    step_convention: str = 'round'

    @property
    def refined(self):
        return self.conversion == 'refined'


@dataclass(frozen=True)
class SamplerSection:
    kind: str = 'ddim-det'
    n: int = 10000
    schedule: samplers.ScheduleSpec = field(default_factory=samplers.ScheduleSpec)
    churn: samplers.ChurnSpec = field(default_factory=samplers.ChurnSpec)
    guidance: Optional[samplers.GuidanceSpec] = None


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    epochs: Optional[float] = None
    steps: Optional[int] = None
    batch_size: int = 256
    K: int = 1
    label_dropout: float = 0.1
    output_dir: Optional[str] = None
    log_every: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    data: DataSection
    model: ModelSection
    privacy: Optional[PrivacySection]
    optimizer: OptimizerSpec
    sampler: SamplerSection
    run: RunSection

    @property
    def is_private(self):
        return self.privacy is not None

    @property
    def subsample_q(self):
        return self.run.batch_size / self.data.n

    def total_steps(self):
        """Composition steps T: run.steps, or epochs converted with the configured convention."""
        if self.run.steps is not None:
            return self.run.steps
        convention = self.privacy.step_convention if self.privacy else 'round'
        return accountant.steps_for(self.data.n, self.run.batch_size, self.run.epochs, convention)

    def to_dict(self):
        """Resolved snapshot with every default filled in."""
        return {
            'data': {'mixture': self.data.mixture.to_dict(),
                     'n': self.data.n, 'seed': self.data.seed},
            'model': {'kind': self.model.kind, 'parameters': dict(self.model.parameters),
                      'architecture': self.model.architecture.to_dict()},
            'privacy': 'non-private' if self.privacy is None else _plain(asdict(self.privacy)),
            'optimizer': {**_plain(asdict(self.optimizer)), 'betas': list(self.optimizer.betas)},
            'sampler': {'kind': self.sampler.kind, 'n': self.sampler.n,
                        'schedule': _plain(asdict(self.sampler.schedule)),
                        'churn': _plain(asdict(self.sampler.churn)),
                        'guidance': None if self.sampler.guidance is None else asdict(self.sampler.guidance)},
            'run': _plain(asdict(self.run)),
        }


@dataclass(frozen=True)
class PrivacyPlan:
    """Everything DP-SGD and the manifest need once sigma has been fixed."""
    spec: PrivacySpec
    result: Optional[accountant.AccountingResult]

    def epsilon_report(self):
        if self.result is None:
            return 'non-private'
        return {'epsilon': self.result.budget.epsilon, 'delta': self.result.budget.delta,
                'order': self.result.budget.order, 'sigma_dp': self.result.sigma,
                'q': self.result.q, 'steps': self.result.steps,
                'conversion': 'refined' if self.result.refined else 'classic'}


@dataclass
class RunManifest:
    config: Dict[str, Any]
    privacy: Any
    seed: int
    steps: int
    checkpoint: Optional[str] = None
    metrics: Dict[str, str] = field(default_factory=dict)
    hashes: Dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def to_dict(self):
        return _plain(asdict(self))


def _plain(value):
    """YAML-safe copy: tuples become lists, infinities become strings."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return value


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


class _Section:
    """Strict reader over one mapping of the experiment config."""

    def __init__(self, data, path):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigValidationError(path, f"expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.seen = set()

    def key(self, name):
        return f"{self.path}.{name}" if self.path else name

    def get(self, name, kind, default=None, check=None, message=None):
        self.seen.add(name)
        if name not in self.data or self.data[name] is None:
            return default
        raw = self.data[name]
        try:
            if kind is bool or isinstance(raw, bool):
                if not isinstance(raw, bool) or kind is not bool:
                    raise TypeError
                value = raw
            elif kind is int:
                if isinstance(raw, float) and not raw.is_integer():
                    raise TypeError
                value = int(raw)
            else:
                value = kind(raw)
        except (TypeError, ValueError):
            raise ConfigValidationError(self.key(name), f"expected {kind.__name__}, got {raw!r}")
        if check is not None and not check(value):
            raise ConfigValidationError(self.key(name), message or f"invalid value {raw!r}")
        return value

    def sub(self, name):
        self.seen.add(name)
        return _Section(self.data.get(name), self.key(name))

    def raw(self, name):
        self.seen.add(name)
        return self.data.get(name)

    def finish(self):
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigValidationError(self.key(unknown[0]), "unknown key")


def _positive(v):
    return v > 0


def _parse_data(section: _Section, seed):
    mixture = section.raw('mixture')
    if mixture is None or mixture == 'default9':
        spec = GmmSpec.default()
    elif isinstance(mixture, dict):
        m = _Section(mixture, section.key('mixture'))
        means = m.raw('means')
        std = m.get('component_std', float, 1.0 / 25.0)
        weights = m.raw('weights')
        m.finish()
        try:
            spec = GmmSpec(means=tuple(tuple(p) for p in means), component_std=std,
                           weights=None if weights is None else tuple(weights))
        except (TypeError, ValueError) as e:
            raise ConfigValidationError(section.key('mixture'), str(e))
    else:
        raise ConfigValidationError(section.key('mixture'), "expected 'default9' or a mapping")
    n = section.get('n', int, 100000, _positive, "must be positive")
    data_seed = section.get('seed', int, seed)
    section.finish()
    return DataSection(spec, n, data_seed)


def _parse_model(section: _Section, num_classes):
    kind = section.get('kind', str, 'edm').lower()
    if kind not in DM_CONFIGS:
        raise ConfigValidationError(section.key('kind'), f"expected one of {sorted(DM_CONFIGS)}")
    params = section.sub('parameters')
    parameters = {k: params.get(k, float) for k in list(params.data)}
    params.finish()
    arch_section = section.sub('architecture')
    arch = dn.ArchitectureSpec(
        depth=arch_section.get('depth', int, 4, _positive, "must be positive"),
        hidden_width=arch_section.get('hidden_width', int, 128, _positive, "must be positive"),
        embedding_dim=arch_section.get('embedding_dim', int, 16, _positive, "must be positive"),
        fourier_frequencies=arch_section.get('fourier_frequencies', int, 16, _positive, "must be positive"),
        num_classes=num_classes)
    arch_section.finish()
    section.finish()
    try:
        create_dm_config(kind, **parameters)
    except ValueError as e:
        raise ConfigValidationError(section.key('parameters'), str(e))
    return ModelSection(kind, parameters, arch)


def _parse_privacy(raw, path='privacy'):
    if raw == 'non-private':
        return None
    if raw is None:
        raise ConfigValidationError(path, "expected 'non-private' or a mapping with sigma_dp or target_epsilon")
    section = _Section(raw, path)
    plan = PrivacySection(
        clip=section.get('clip', float, 1.0, _positive, "must be positive"),
        sigma_dp=section.get('sigma_dp', float, None, _positive, "must be positive"),
        target_epsilon=section.get('target_epsilon', float, None, _positive, "must be positive"),
        delta=section.get('delta', float, 1e-5, lambda d: 0 < d < 1, "must lie in (0, 1)"),
        conversion=section.get('conversion', str, 'refined', lambda c: c in CONVERSIONS,
                               f"expected one of {CONVERSIONS}"),
        step_convention=section.get('step_convention', str, 'round', lambda c: c in ('round', 'ceil'),
                                    "expected 'round' or 'ceil'"))
    section.finish()
    if (plan.sigma_dp is None) == (plan.target_epsilon is None):
        raise ConfigValidationError(path, "give exactly one of sigma_dp and target_epsilon")
    return plan


def _parse_optimizer(section: _Section):
    betas = section.raw('betas')
    try:
        spec = OptimizerSpec(
            learning_rate=section.get('learning_rate', float, 3e-4),
            betas=(0.9, 0.999) if betas is None else tuple(float(b) for b in betas),
            eps=section.get('eps', float, 1e-8),
            ema_decay=section.get('ema_decay', float, 0.999))
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(section.path, str(e))
    section.finish()
    return spec


def _parse_sampler(section: _Section, num_classes):
    kind = section.get('kind', str, 'ddim-det', lambda k: k in samplers.SAMPLERS,
                       f"expected one of {samplers.SAMPLERS}")
    n = section.get('n', int, 10000, _positive, "must be positive")
    try:
        schedule = samplers.ScheduleSpec(
            steps_M=section.get('steps', int, samplers.DEFAULT_STEPS[kind]),
            sigma_min=section.get('sigma_min', float, 0.002),
            sigma_max=section.get('sigma_max', float, 80.0),
            rho=section.get('rho', float, 7.0))
    except ValueError as e:
        raise ConfigValidationError(section.path, str(e))
    c = section.sub('churn')
    try:
        churn = samplers.ChurnSpec(c.get('s_churn', float, 0.0), c.get('s_min', float, 0.0),
                                   c.get('s_max', float, math.inf), c.get('s_noise', float, 1.0))
    except ValueError as e:
        raise ConfigValidationError(c.path, str(e))
    c.finish()
    guidance = None
    if section.raw('guidance') is not None:
        g = section.sub('guidance')
        guidance = samplers.GuidanceSpec(
            g.get('scale', float, 1.0),
            g.get('label', int, None, lambda k: 0 <= k < num_classes, f"must lie in [0, {num_classes})"))
        g.finish()
    section.finish()
    return SamplerSection(kind, n, schedule, churn, guidance)


def _parse_run(section: _Section):
    run = RunSection(
        seed=section.get('seed', int, 0),
        epochs=section.get('epochs', float, None, lambda e: e >= 0, "must be non-negative"),
        steps=section.get('steps', int, None, lambda s: s >= 0, "must be non-negative"),
        batch_size=section.get('batch_size', int, 256, _positive, "must be positive"),
        K=section.get('K', int, 1, lambda k: k >= 1, "must be >= 1"),
        label_dropout=section.get('label_dropout', float, 0.1, lambda p: 0 <= p <= 1, "must lie in [0, 1]"),
        output_dir=section.get('output_dir', str, None),
        log_every=section.get('log_every', int, 100, lambda s: s >= 0, "must be non-negative"))
    section.finish()
    if (run.epochs is None) == (run.steps is None):
        raise ConfigValidationError(section.path, "give exactly one of epochs and steps")
    return run


class ExperimentManager:
    """
    Manages the lifecycle of an experiment run.
    Loads experiment configs from YAML and provides run-directory utilities.
    """
    def __init__(self, output_root: Optional[str] = None, settings: Optional[ConfigReader] = None):
        """
        Initialize ExperimentManager with the directory runs are created under.
        Args:
            output_root (str, optional): Defaults to ConfigReader().output_root().
            settings (ConfigReader, optional): Framework settings.
        """
        self._settings = settings or ConfigReader()
        self._output_root = output_root or self._settings.output_root()
        self._run_dir: Optional[str] = None
        self.logger = logging.getLogger(self.__class__.__name__)

    def load_experiment_from_yaml(self, path: str) -> Dict[str, Any]:
        """
        Load an experiment config file (YAML or JSON).
        Args:
            path (str): Path of the file; relative paths are also tried under configs/experiments.
        Returns:
            dict: The raw config mapping.
        Raises:
            FileNotFoundError, ConfigValidationError
        """
        if not os.path.exists(path):
            candidate = os.path.join(os.path.dirname(self._settings.config_path), 'experiments', path)
            if not os.path.exists(candidate):
                raise FileNotFoundError(f"Experiment config not found: {path}")
            path = candidate
        with open(path, 'r', encoding='utf-8') as f:
            try:
                raw = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigValidationError('<root>', f"not valid YAML/JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigValidationError('<root>', f"invalid structure in {path}, expected a mapping")
        return raw

    def parse_experiment(self, raw: Dict[str, Any], name: str = 'experiment') -> ExperimentConfig:
        """
        Validate a raw mapping into an ExperimentConfig.
        Raises:
            ConfigValidationError: With the dotted path of the first offending key.
        """
        root = _Section(raw, '')
        run = _parse_run(root.sub('run'))
        data = _parse_data(root.sub('data'), run.seed)
        num_classes = data.mixture.num_components
        config = ExperimentConfig(
            name=name,
            data=data,
            model=_parse_model(root.sub('model'), num_classes),
            privacy=_parse_privacy(root.raw('privacy') if 'privacy' in root.data else 'non-private'),
            optimizer=_parse_optimizer(root.sub('optimizer')),
            sampler=_parse_sampler(root.sub('sampler'), num_classes),
            run=run)
        root.finish()
        if config.run.batch_size > config.data.n:
            raise ConfigValidationError('run.batch_size', f"exceeds data.n={config.data.n}")
        return config

    def load_experiment(self, path: str) -> ExperimentConfig:
        name = os.path.splitext(os.path.basename(path))[0]
        return self.parse_experiment(self.load_experiment_from_yaml(path), name)

    def resolve_privacy(self, config: ExperimentConfig) -> PrivacyPlan:
        """
        Fix sigma_DP (calibrating when a target epsilon is given) and account for T steps.
        Raises:
            InfeasibleBudgetError: If the target cannot be met inside the calibration bracket.
        """
        q = config.subsample_q
        T = config.total_steps()
        if not config.is_private:
            return PrivacyPlan(PrivacySpec.non_private(q, T), None)
        p = config.privacy
        sigma = p.sigma_dp
        if sigma is None:
            bracket = tuple(self._settings.get('accountant', 'calibration_bracket', default=accountant.DEFAULT_BRACKET))
            rtol = float(self._settings.get('accountant', 'calibration_rtol', default=1e-4))
            try:
                sigma = accountant.calibrate_sigma(accountant.DpBudget(p.target_epsilon, p.delta), q, T,
                                                   rtol, bracket, self.orders(), p.refined)
            except accountant.CalibrationError as e:
                raise accountant.InfeasibleBudgetError(str(e))
        result = accountant.account(sigma, q, T, p.delta, self.orders(), p.refined)
        self.logger.info(f"Privacy pre-check: sigma_dp={sigma:.6g} q={q:.6g} T={T} -> "
                         f"eps={result.budget.epsilon:.6g} at delta={p.delta} ({p.conversion} conversion)")
        return PrivacyPlan(PrivacySpec(p.clip, sigma, q, T, p.delta), result)

    def orders(self):
        top = int(self._settings.get('accountant', 'orders_max', default=64))
        extra = self._settings.get('accountant', 'extra_orders', default=[128, 256]) or []
        return tuple(range(2, top + 1)) + tuple(int(a) for a in extra)

    def create_run(self, config: ExperimentConfig, output_dir: Optional[str] = None) -> str:
        """
        Create (or reuse) the run directory for config.
        Returns:
            str: Absolute run directory path.
        """
        target = output_dir or config.run.output_dir or config.name
        if not os.path.isabs(target):
            target = os.path.join(self._output_root, target)
        os.makedirs(target, exist_ok=True)
        self._run_dir = target
        self.logger.info(f"Run directory: {target}")
        return target

    def get_run_dir(self) -> Optional[str]:
        """
        Return the current run directory, if any.
        """
        return self._run_dir

    def run_path(self, filename: str) -> str:
        if self._run_dir is None:
            raise RuntimeError("no active run; call create_run first")
        return os.path.join(self._run_dir, filename)

    def write_manifest(self, manifest: RunManifest) -> str:
        """
        Hash every referenced file and write the manifest atomically.
        Returns:
            str: Manifest path.
        """
        files = ([manifest.checkpoint] if manifest.checkpoint else []) + list(manifest.metrics.values())
        for path in files:
            manifest.hashes[os.path.basename(path)] = sha256_file(path)
        path = self.run_path(MANIFEST_FILENAME)
        tmp = f"{path}.tmp"
        with open(tmp, 'w', encoding='utf-8') as f:
            yaml.safe_dump(manifest.to_dict(), f, sort_keys=True)
        os.replace(tmp, path)
        self.logger.info(f"Manifest written to {path}")
        return path

    def close_run(self) -> None:
        """
        Forget the current run directory, if any.
        """
        self._run_dir = None


def load_manifest(path):
    with open(path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f)
